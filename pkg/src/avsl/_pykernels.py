"""Pure-numpy reference for the compiled kernels."""
import numpy as np


def ciou_sweep(gt, pred, taus):
    """cIoU of ``gt`` against ``pred > tau`` for every tau in ``taus``."""
    g = np.asarray(gt, dtype=np.float64)
    p = np.asarray(pred, dtype=np.float64)
    if g.shape != p.shape:
        raise ValueError("gt and pred shapes differ")
    t = np.asarray(taus, dtype=np.float64)
    g_sum = g.sum()
    background = g == 0
    out = np.zeros(t.shape[0])
    for n, tau in enumerate(t):
        b = p > tau
        denom = g_sum + np.count_nonzero(b & background)
        if denom > 0:
            out[n] = g[b].sum() / denom
    return out
