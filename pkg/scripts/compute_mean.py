"""Print the per-channel pixel mean of a synthetic corpus.

The result, rounded to one decimal, is the DEFAULT_MEAN constant in
avsl/data.py.  Pass --manifest to measure an existing dataset instead.
"""
import argparse

from avsl.data import dataset_mean, generate_dataset, load_manifest


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--n", type=int, default=400)
    ap.add_argument("--type-mix", default="mixed")
    ap.add_argument("--manifest")
    args = ap.parse_args()
    samples = load_manifest(args.manifest) if args.manifest else generate_dataset(args.seed, args.n, args.type_mix)
    mean = dataset_mean(samples)
    print("(" + ", ".join(f"{m:.1f}" for m in mean) + ")")


if __name__ == "__main__":
    main()
