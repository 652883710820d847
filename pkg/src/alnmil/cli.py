"""Command-line entry point: ``alnmil <command> [--config FILE] [--seed N] [--out DIR]``.

Commands are synth, tile, bags, train, eval and report. Failures print one
line ``error: <ErrorClass>: <message>`` to stderr and exit with status 1
(2 for usage errors).
"""

from __future__ import annotations

import argparse
import logging
import os
import sys

from . import pipeline
from .config import load_config
from .errors import AlnMilError, MissingInputError
from .synth import SynthConfig, generate


def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="TOML run configuration")
    common.add_argument("--seed", type=int, help="root seed (overrides the config file)")
    common.add_argument("--out", help="output directory (overrides out_dir)")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override one config value, e.g. --set train.epochs=50")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="alnmil", description="Attention MIL for ALN status from biopsy slides.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common], help="write a synthetic witness-task dataset")
    p.add_argument("--n-patients", type=int, default=50)
    p.add_argument("--slide-size", type=int, default=256)
    p.add_argument("--tile-size", type=int, default=32)
    p.add_argument("--no-masks", action="store_true")

    sub.add_parser("tile", parents=[common], help="tile slides and filter patches by entropy")
    sub.add_parser("bags", parents=[common], help="split cohorts and build the bag manifest")
    sub.add_parser("train", parents=[common], help="train the MIL model")
    p = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint on every cohort")
    p.add_argument("--checkpoint")
    p.add_argument("--threshold", type=float)
    p = sub.add_parser("report", parents=[common], help="Markdown comparison of finished runs")
    p.add_argument("runs", nargs="+", help="run output directories")
    p.add_argument("--cohort", default="test")
    p.add_argument("--names", help="comma-separated row labels")
    sub.add_parser("run", parents=[common], help="tile, bags, train and eval in one go")
    return parser


def _dispatch(args) -> None:
    if args.command == "synth":
        if not args.out:
            raise MissingInputError("synth needs --out")
        cfg = SynthConfig(args.n_patients, args.slide_size, args.tile_size, seed=args.seed or 0)
        generate(args.out, cfg, write_masks=not args.no_masks)
        print(f"wrote {args.n_patients} slides to {args.out}")
        return
    if args.command == "report":
        names = args.names.split(",") if args.names else None
        text = pipeline.cmd_report(args.runs, args.cohort, names)
        if args.out:
            with open(args.out, "w", encoding="utf-8", newline="\n") as fh:
                fh.write(text)
        print(text, end="")
        return

    flags = {"seed": args.seed, "out_dir": args.out, "threshold": getattr(args, "threshold", None)}
    cfg = load_config(args.config, args.set, **flags)
    os.makedirs(cfg.out_dir, exist_ok=True)
    if args.command == "tile":
        meta = pipeline.cmd_tile(cfg)
        print(f"tiled {len(meta['slides'])} slides, {sum(meta['slides'].values())} patches kept")
    elif args.command == "bags":
        meta = pipeline.cmd_bags(cfg)
        print("bags per cohort: " + ", ".join(f"{k} {v}" for k, v in meta["bags"].items()))
    elif args.command == "train":
        meta = pipeline.cmd_train(cfg)
        print(f"trained {meta['epochs']} epochs, best validation AUROC {meta['best_val_auroc']}")
    elif args.command == "eval":
        pipeline.cmd_eval(cfg, args.checkpoint)
        print(open(os.path.join(pipeline.stage_dir(cfg, "eval"), "metrics.csv"), encoding="utf-8").read(), end="")
    elif args.command == "run":
        pipeline.run_all(cfg)
        print(open(os.path.join(pipeline.stage_dir(cfg, "eval"), "metrics.csv"), encoding="utf-8").read(), end="")


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        _dispatch(args)
    except (AlnMilError, ValueError, KeyError, OSError) as exc:
        msg = " ".join(str(exc).split()) or type(exc).__name__
        print(f"error: {type(exc).__name__}: {msg}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
