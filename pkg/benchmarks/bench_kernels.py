"""Time the compiled cIoU threshold sweep against the NumPy fallback.

    python3 benchmarks/bench_kernels.py [--n 50] [--size 256]
"""
import argparse
import timeit

import numpy as np

from avsl import _pykernels
from avsl.metrics import TAUS, consensus_gt

try:
    from avsl import _ckernels
except ImportError:  # extension not built
    _ckernels = None


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--n", type=int, default=50, help="maps per timing run")
    ap.add_argument("--size", type=int, default=256)
    ap.add_argument("--repeat", type=int, default=3)
    args = ap.parse_args()

    rng = np.random.default_rng(0)
    h = w = args.size
    cases = []
    for _ in range(args.n):
        x0, y0 = rng.integers(0, w // 2, 2)
        boxes = [(a, int(x0), int(y0), int(x0 + w // 3 + a), int(y0 + h // 3)) for a in range(3)]
        cases.append((consensus_gt(boxes, 3, h, w), rng.uniform(size=(h, w))))

    backends = {"python": _pykernels.ciou_sweep}
    if _ckernels is not None:
        backends["cython"] = _ckernels.ciou_sweep
    else:
        print("compiled extension not available; timing the fallback only")

    ref = [_pykernels.ciou_sweep(g, p, TAUS) for g, p in cases[:5]]
    timings = {}
    for name, fn in backends.items():
        for (g, p), r in zip(cases[:5], ref):
            assert np.allclose(fn(g, p, TAUS), r, atol=1e-12), name
        t = min(timeit.repeat(lambda: [fn(g, p, TAUS) for g, p in cases], number=1, repeat=args.repeat))
        timings[name] = t
        print(f"{name:7s} {1e3 * t / args.n:8.3f} ms/map  ({args.n} maps of {h}x{w}, {len(TAUS)} thresholds)")
    if "cython" in timings:
        print(f"speedup {timings['python'] / timings['cython']:.1f}x")


if __name__ == "__main__":
    main()
