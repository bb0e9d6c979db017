"""Command-line entry point with four verbs:

    gen     sample a synthetic benchmark to a directory
    train   run one training stage, writing a checkpoint and a loss CSV
    eval    score a checkpoint over a benchmark's eval split
    track   run one tracking session over a directory of frame PNGs

Exit codes: 0 success, 1 runtime failure, 2 usage error. Logs go to stderr;
machine-readable outputs (sequences, checkpoints, CSVs, reports, masks) go
to files. QUERYTRACK_CONFIG names a default config file for commands that
accept --config.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

from .core import ConfigError, Frame, RunConfig, load_config
from .core import _read_png_rgb, _write_png_mask
from .metrics import evaluate_benchmark
from .model import build_model, load_checkpoint, save_checkpoint
from .synthgen import GenerationError, generate_benchmark, load_benchmark, write_benchmark
from .tracker import ABLATIONS, Tracker
from .training import train

ENV_CONFIG = "QUERYTRACK_CONFIG"


def _log(msg: str) -> None:
    print(f"querytrack: {msg}", file=sys.stderr)


def _resolve_config(path_arg) -> RunConfig:
    path = path_arg or os.environ.get(ENV_CONFIG)
    return load_config(path) if path else RunConfig()


def cmd_gen(args) -> int:
    if args.train < 1 or args.eval < 1:
        _log("--train and --eval must both be >= 1")
        return 2
    try:
        bench = generate_benchmark(args.train, args.eval, args.seed)
        write_benchmark(bench, args.out)
    except GenerationError as e:
        _log(f"generation failed: {e}")
        return 1
    print(f"wrote {len(bench.train)} train + {len(bench.eval)} eval sequences "
          f"({len(bench.change_suite)} with a change event) to {args.out}")
    return 0


def cmd_train(args) -> int:
    if args.stage > 1 and not args.ckpt_in:
        _log(f"stage {args.stage} requires --ckpt-in with a "
             f"stage-{args.stage - 1} checkpoint")
        return 2
    data = Path(args.data)
    if not data.is_dir():
        _log(f"benchmark directory not found: {data}")
        return 2
    try:
        if args.ckpt_in:
            model = load_checkpoint(args.ckpt_in)
            if args.config:
                _log("--config ignored: the checkpoint carries its own config")
        else:
            model = build_model(_resolve_config(args.config))
    except ConfigError as e:
        _log(str(e))
        return 2
    except (OSError, ValueError) as e:
        _log(f"cannot load checkpoint {args.ckpt_in}: {e}")
        return 1

    bench = load_benchmark(data)
    csv_path = args.loss_csv or f"{args.ckpt_out}.loss.csv"
    try:
        history = train(model, bench.train, stage=args.stage, steps=args.steps,
                        csv_path=csv_path, log=_log)
    except RuntimeError as e:
        _log(str(e))
        return 1
    except ValueError as e:
        _log(str(e))
        return 2
    save_checkpoint(model, args.ckpt_out)
    print(f"final loss {history.final:.6f} (from {history.initial:.6f}); "
          f"checkpoint at {args.ckpt_out}")
    return 0


def cmd_eval(args) -> int:
    data = Path(args.data)
    if not data.is_dir():
        _log(f"benchmark directory not found: {data}")
        return 2
    try:
        model = load_checkpoint(args.ckpt)
    except (OSError, ValueError) as e:
        _log(f"cannot load checkpoint {args.ckpt}: {e}")
        return 1
    bench = load_benchmark(data)
    try:
        report = evaluate_benchmark(model, bench.eval, ablate=args.ablate)
    except ValueError as e:
        _log(str(e))
        return 1
    report_path = Path(args.report)
    report_path.parent.mkdir(parents=True, exist_ok=True)
    report_path.write_text(report.to_json() + "\n")
    print(report.table())
    if report.failures:
        _log(f"{len(report.failures)} instruction run(s) failed")
        return 1
    return 0


def cmd_track(args) -> int:
    frames_dir = Path(args.frames)
    if not frames_dir.is_dir():
        _log(f"frames directory not found: {frames_dir}")
        return 2
    paths = sorted(frames_dir.glob("*.png"))
    if not paths:
        _log(f"no .png frames in {frames_dir}")
        return 2
    try:
        model = load_checkpoint(args.ckpt)
    except (OSError, ValueError) as e:
        _log(f"cannot load checkpoint {args.ckpt}: {e}")
        return 1
    unknown = model.vocab.unknown_words(args.instruction)
    if unknown:
        _log("instruction words outside the lexicon (treated as <UNK>): "
             + " ".join(unknown))
    try:
        frames = [Frame(pixels=_read_png_rgb(p), index=i)
                  for i, p in enumerate(paths)]
        result = Tracker(model).run(frames, args.instruction)
    except (ValueError, OSError) as e:
        _log(f"session failed: {e}")
        return 1
    out = Path(args.out)
    (out / "masks").mkdir(parents=True, exist_ok=True)
    for i, mask in enumerate(result.masks):
        _write_png_mask(out / "masks" / f"{i:05d}.png", mask)
    (out / "answer.txt").write_text(result.text + "\n")
    stats = {
        "fallback": result.stats.fallback,
        "frames": result.stats.frames,
        "purport_scores": list(result.stats.purport_scores),
        "rethink_frames": list(result.stats.rethink_frames),
        "rethink_frequency": result.stats.rethink_frequency,
        "threshold": result.stats.threshold,
    }
    (out / "stats.json").write_text(json.dumps(stats, sort_keys=True, indent=2) + "\n")
    print(f"tracked {len(frames)} frames; answer: {result.text}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="querytrack",
        description="instruction-conditioned tracking on synthetic video")
    sub = parser.add_subparsers(dest="verb", required=True)

    p = sub.add_parser("gen", help="sample a synthetic benchmark")
    p.add_argument("--out", required=True)
    p.add_argument("--train", type=int, required=True)
    p.add_argument("--eval", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train", help="run one training stage")
    p.add_argument("--stage", type=int, choices=(1, 2, 3), required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--config")
    p.add_argument("--ckpt-in")
    p.add_argument("--ckpt-out", required=True)
    p.add_argument("--steps", type=int, default=200)
    p.add_argument("--loss-csv")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a checkpoint on a benchmark")
    p.add_argument("--data", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--report", required=True)
    p.add_argument("--ablate", choices=ABLATIONS, default="none")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("track", help="track one instruction over frame PNGs")
    p.add_argument("--frames", required=True)
    p.add_argument("--instruction", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_track)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
