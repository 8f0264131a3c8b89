"""Command-line entry points.

Exit codes: 0 on success, 1 on validation failure (bad arguments, failed
gradient checks, mismatched checkpoints), 2 on I/O trouble (missing or
malformed files).
"""

from __future__ import annotations

import argparse
import sys

from .ablation import ABLATION_NAMES, run_ablation
from .attention import export_attention
from .config import load_config
from .gradsuite import TOLERANCE, run_gradient_suite, suite_passes
from .storage import FormatError
from .synthscene import GenerationError, GenParams, make_dataset
from .train import evaluate, train


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="avseg",
                                     description="desk-scale audio-visual segmentation")
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("gen-data", help="generate a synthetic dataset")
    gen.add_argument("--mode", required=True, choices=("s4", "ms3", "disambig"))
    gen.add_argument("--videos", required=True, type=int)
    gen.add_argument("--seed", required=True, type=int)
    gen.add_argument("--out", required=True)
    gen.add_argument("--frame-size", type=int, default=64)
    gen.add_argument("--mel-bins", type=int, default=32)
    gen.add_argument("--noise", type=float, default=0.02)

    tr = sub.add_parser("train", help="train a model from a config file")
    tr.add_argument("--config", required=True)
    tr.add_argument("--out", required=True, help="checkpoint path")
    tr.add_argument("--log", help="optional per-epoch CSV log")

    ev = sub.add_parser("eval", help="score a checkpoint on a split")
    ev.add_argument("--ckpt", required=True)
    ev.add_argument("--data", required=True)
    ev.add_argument("--split", required=True, choices=("train", "valid", "test"))
    ev.add_argument("--csv", required=True)

    ab = sub.add_parser("ablate", help="run a paired-seed ablation recipe")
    ab.add_argument("--name", required=True, choices=ABLATION_NAMES)
    ab.add_argument("--config", required=True)
    ab.add_argument("--out", required=True)

    at = sub.add_parser("attn", help="export stage-4 attention heatmaps")
    at.add_argument("--ckpt", required=True)
    at.add_argument("--video", required=True)
    at.add_argument("--out", required=True)

    gc = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    gc.add_argument("--seed", required=True, type=int)
    gc.add_argument("--rounds", type=int, default=1,
                    help="consecutive seeds to run (default 1)")
    return parser


def _run(args) -> int:
    if args.command == "gen-data":
        params = GenParams(height=args.frame_size, width=args.frame_size,
                           mel_bins=args.mel_bins, noise_level=args.noise)
        counts = make_dataset(args.videos, args.mode, args.seed, args.out, params)
        print(f"wrote {counts['train']}/{counts['valid']}/{counts['test']} "
              f"train/valid/test videos to {args.out}")
        return 0

    if args.command == "train":
        config = load_config(args.config)
        _, log = train(config, checkpoint_path=args.out, log_path=args.log)
        if log.records:
            last = log.records[-1]
            print(f"epoch {last.epoch}: bce {last.mean_bce:.4f} "
                  f"valid mIoU {last.valid_miou:.4f} F {last.valid_fscore:.4f}")
        print(f"checkpoint written to {args.out}")
        return 0

    if args.command == "eval":
        report = evaluate(args.ckpt, args.data, args.split, csv_path=args.csv)
        print(f"{args.split}: mIoU {report.miou:.4f}  F-score {report.fscore:.4f} "
              f"({len(report.per_video)} videos)")
        return 0

    if args.command == "ablate":
        rows = run_ablation(args.name, load_config(args.config), args.out)
        for variant, m, f in rows:
            print(f"{variant:>12s}  mIoU {m:.4f}  F {f:.4f}")
        return 0

    if args.command == "attn":
        written = export_attention(args.ckpt, args.video, args.out)
        print(f"wrote {len(written)} heatmaps to {args.out}")
        return 0

    if args.command == "gradcheck":
        failed = False
        for seed in range(args.seed, args.seed + args.rounds):
            results = run_gradient_suite(seed)
            for name, err in results:
                status = "ok" if err <= TOLERANCE else "FAIL"
                print(f"seed {seed}  {name:20s} {err:.3e}  {status}")
            failed = failed or not suite_passes(results)
        return 1 if failed else 0

    raise AssertionError(f"unhandled command {args.command!r}")


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        return _run(args)
    except (FormatError, FileNotFoundError, NotADirectoryError, PermissionError, OSError) as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return 2
    except (ValueError, GenerationError) as exc:
        print(f"invalid input: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
