"""Command-line entry point.

Exit codes: 0 ok, 2 not found / usage, 3 numeric failure, 4 config mismatch.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np
import torch

from . import data, protocols, training
from .model import ConfigMismatchError
from .viz import overlay

logger = logging.getLogger("avsl")

EXIT_OK, EXIT_NOT_FOUND, EXIT_NUMERIC, EXIT_MISMATCH = 0, 2, 3, 4


def num_workers() -> int:
    try:
        return max(1, int(os.environ.get("AVSL_NUM_WORKERS", "1")))
    except ValueError:
        return 1


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    text = obj if isinstance(obj, str) else json.dumps(obj, indent=2) + "\n"
    path.write_text(text)


def _setup(args) -> Path:
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if args.deterministic:
        torch.use_deterministic_algorithms(True)
        torch.set_num_threads(1)
    torch.manual_seed(args.seed)
    # timestamps go to the log file only, never into artifacts
    handler = logging.FileHandler(out / "avsl.log")
    handler.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(name)s: %(message)s"))
    for old in list(logger.handlers):  # repeated main() calls in one process
        logger.removeHandler(old)
        old.close()
    logger.addHandler(handler)
    logger.setLevel(logging.INFO)
    return out


# ------------------------------------------------------------------ commands


def cmd_synth_data(args) -> int:
    out = _setup(args)
    if args.n_train < 1 or args.n_test < 1 or args.n_typed < 1:
        args.parser.error("--n-train, --n-test and --n-typed must be >= 1")
    workers = 1 if args.deterministic else num_workers()
    gen = dict(n_classes=args.n_classes, workers=workers)
    sets = {
        "train": data.generate_dataset(args.seed, args.n_train, args.type_mix, split="train", prefix="train", **gen),
        "test": data.generate_dataset(args.seed + 1, args.n_test, args.type_mix, split="test", prefix="test", **gen),
        "typeA": data.generate_dataset(args.seed + 2, args.n_typed, "A", split="test", prefix="typeA", **gen),
        "typeB": data.generate_dataset(args.seed + 3, args.n_typed, "B", split="test", prefix="typeB", **gen),
    }
    for name, samples in sets.items():
        data.write_manifest(out / f"{name}.jsonl", samples)
        print(f"{name:6s} {len(samples):5d} samples -> {out / (name + '.jsonl')}")
    return EXIT_OK


def cmd_train(args) -> int:
    out = _setup(args)
    cfg = training.TrainConfig(
        batch_size=args.batch_size, epochs=args.epochs, lr_main=args.lr, seed=args.seed,
        ablate_constant_p=args.ablate_constant_p, pretrained=args.pretrained_weights is not None,
        pretrained_weights=args.pretrained_weights, k=args.k, width_multiplier=args.width_mult,
        deterministic=True,
    )
    ckpt, trace = training.train(cfg, args.manifest, out)
    steps_per_epoch = max(1, len(trace) // cfg.epochs)
    for e in range(cfg.epochs):
        chunk = [r["loss"] for r in trace[e * steps_per_epoch:(e + 1) * steps_per_epoch] if r["loss"] is not None]
        print(f"epoch {e + 1:3d}  loss {np.mean(chunk):.4f}")
    print(f"checkpoint: {ckpt}")
    return EXIT_OK


def cmd_eval(args) -> int:
    out = _setup(args)
    if args.mode == "random":
        report = protocols.run_random_eval(args.manifest, seed=args.seed)
        _write_json(Path(args.report or out / "random.json"), report.to_json())
        print(f"random      cIoU@0.5 {report.ciou_at_tau:.4f}  AUC {report.auc:.4f}")
        return EXIT_OK
    if args.checkpoint is None:
        args.parser.error("--checkpoint is required unless --mode random")
    loc = protocols.Localizer.from_checkpoint(args.checkpoint)
    modes = {"loc": "localization", "potential": "potential"}
    wanted = ["loc", "potential"] if args.mode == "both" else [args.mode]
    reports = {}
    for m in wanted:
        reports[m] = protocols.run_standard_eval(loc, args.manifest, modes[m])
        path = Path(args.report) if (args.report and args.mode != "both") else out / f"{m}.json"
        _write_json(path, reports[m].to_json())
        print(f"{modes[m]:12s} cIoU@0.5 {reports[m].ciou_at_tau:.4f}  AUC {reports[m].auc:.4f}")
    if args.mode == "both":
        gap = protocols.report_gap(reports["loc"], reports["potential"])
        _write_json(out / "gap.json", gap)
        print(f"{'gap':12s} cIoU@0.5 {gap['ciou@0.5']:+.4f}  AUC {gap['auc']:+.4f}")
    return EXIT_OK


def cmd_concat_eval(args) -> int:
    out = _setup(args)
    r_loc, r_pot, gap = protocols.run_concat_eval(args.checkpoint, args.manifest, args.n_pairs, seed=args.seed)
    _write_json(out / "concat_loc.json", r_loc.to_json())
    _write_json(out / "concat_potential.json", r_pot.to_json())
    _write_json(out / "concat_gap.json", gap)
    for name, r in (("localization", r_loc), ("potential", r_pot)):
        print(f"{name:12s} cIoU@0.5 {r.ciou_at_tau:.4f}  AUC {r.auc:.4f}  (n={len(r.per_sample)})")
    print(f"{'gap':12s} cIoU@0.5 {gap['ciou@0.5']:+.4f}  AUC {gap['auc']:+.4f}")
    return EXIT_OK


def cmd_gap(args) -> int:
    out = _setup(args)
    table = protocols.run_type_gap_analysis(args.checkpoint, args.type_a, args.type_b, seed=args.seed)
    _write_json(out / "type_gap.json", table.to_json())
    text = table.render()
    (out / "type_gap.txt").write_text(text)
    print(text, end="")
    return EXIT_OK


def cmd_visualize(args) -> int:
    out = _setup(args)
    samples = {s.id: s for s in data.load_manifest(args.manifest)}
    if args.sample_id not in samples:
        print(f"unknown sample id {args.sample_id!r}", file=sys.stderr)
        return EXIT_NOT_FOUND
    s = samples[args.sample_id]
    loc = protocols.Localizer.from_checkpoint(args.checkpoint)
    audio = data.read_wav(args.audio) if args.audio else s.audio
    maps = loc.maps(s.image, audio)
    dest = Path(args.out) if args.out else out
    dest.mkdir(parents=True, exist_ok=True)
    data.save_png(dest / f"{s.id}_original.png", s.image)
    data.save_png(dest / f"{s.id}_potential.png", overlay(s.image, maps["potential"]))
    data.save_png(dest / f"{s.id}_localization.png", overlay(s.image, maps["localization"]))
    print(f"wrote 3 overlays for {s.id} to {dest}")
    return EXIT_OK


# -------------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    def global_flags(defaults: bool) -> argparse.ArgumentParser:
        # accepted before or after the subcommand; only the top level carries
        # defaults so a subparser never overwrites a value given earlier
        g = argparse.ArgumentParser(add_help=False)
        keep = argparse.SUPPRESS
        g.add_argument("--seed", type=int, default=0 if defaults else keep)
        g.add_argument("--out-dir", default="out" if defaults else keep)
        g.add_argument("--deterministic", action="store_true", default=False if defaults else keep)
        return g

    common = global_flags(False)
    p = argparse.ArgumentParser(prog="avsl", description=__doc__.splitlines()[0], parents=[global_flags(True)])
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth-data", parents=[common], help="generate a synthetic Type-A/B dataset")
    s.add_argument("--n-train", type=int, required=True)
    s.add_argument("--n-test", type=int, required=True)
    s.add_argument("--n-typed", type=int, default=30, help="size of typeA.jsonl / typeB.jsonl")
    s.add_argument("--type-mix", choices=("A", "B", "mixed"), default="mixed")
    s.add_argument("--n-classes", type=int, default=2)
    s.set_defaults(func=cmd_synth_data)

    s = sub.add_parser("train", parents=[common], help="train with the similarity loss")
    s.add_argument("--manifest", required=True)
    s.add_argument("--epochs", type=int, default=30)
    s.add_argument("--pretrained-weights")
    s.add_argument("--ablate-constant-p", action="store_true")
    s.add_argument("--width-mult", type=float, default=1.0)
    s.add_argument("--k", type=int, default=128)
    s.add_argument("--lr", type=float, default=1e-4)
    s.add_argument("--batch-size", type=int, default=8)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", parents=[common], help="standard protocol evaluation")
    s.add_argument("--checkpoint")
    s.add_argument("--manifest", required=True)
    s.add_argument("--mode", choices=("loc", "potential", "both", "random"), default="both")
    s.add_argument("--report")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("concat-eval", parents=[common], help="concat-and-localize evaluation")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--manifest", required=True)
    s.add_argument("--n-pairs", type=int, default=500)
    s.set_defaults(func=cmd_concat_eval)

    s = sub.add_parser("gap", parents=[common], help="Type-A/Type-B gap analysis")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--type-a", required=True)
    s.add_argument("--type-b", required=True)
    s.set_defaults(func=cmd_gap)

    s = sub.add_parser("visualize", parents=[common], help="write heat-map overlays for one sample")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--manifest", required=True)
    s.add_argument("--sample-id", required=True)
    s.add_argument("--audio", help="WAV to use instead of the sample's own audio")
    s.add_argument("--out")
    s.set_defaults(func=cmd_visualize)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    args.parser = parser
    try:
        return args.func(args)
    except ConfigMismatchError as exc:
        print(f"config mismatch: {exc}", file=sys.stderr)
        return EXIT_MISMATCH
    except training.NonFiniteLossError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except FileNotFoundError as exc:
        print(f"not found: {exc}", file=sys.stderr)
        return EXIT_NOT_FOUND
    except (protocols.ConfigError, training.ConfigError, data.ManifestError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NOT_FOUND


if __name__ == "__main__":
    sys.exit(main())
