"""Command-line entry point: ``cfflow {train,eval,bench,ablate,sweep}``."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import experiments
from .config import SWEEP_GRIDS, ConfigError, RunConfig, apply_overrides, load_config


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cfflow", description="Coarse-to-fine two-step flow sampler: training and evaluation runs.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p: argparse.ArgumentParser):
        p.add_argument("--config", type=Path, help="flat key = value config file (defaults when omitted)")
        p.add_argument("--seed", type=int, help="run seed (sets train.seed)")
        p.add_argument("--out", type=Path, help="output directory")
        p.add_argument("--override", action="append", default=[], metavar="KEY=VALUE", help="config override, repeatable")
        p.add_argument("-v", "--verbose", action="store_true")

    common(sub.add_parser("train", help="train one model (train.method = cf | fm)"))
    p = sub.add_parser("eval", help="score a checkpoint against exact task samples")
    common(p)
    p.add_argument("--checkpoint", type=Path, required=True)
    p = sub.add_parser("bench", help="NFE/latency frontier: FM@k rows and CF@2")
    common(p)
    p.add_argument("--cf-checkpoint", type=Path)
    p.add_argument("--fm-checkpoint", type=Path)
    common(sub.add_parser("ablate", help="train and score the five ablation variants"))
    p = sub.add_parser("sweep", help="hyperparameter grids, one isolated run per cell")
    common(p)
    p.add_argument("--grid", action="append", choices=SWEEP_GRIDS, help="grid to run, repeatable (default: sweep.grids)")
    p.add_argument("--workers", type=int, help="parallel cells (default: sweep.workers)")
    return parser


def resolve_config(args: argparse.Namespace, base: RunConfig | None = None) -> RunConfig:
    cfg = load_config(args.config) if args.config else (base or RunConfig())
    cfg = apply_overrides(cfg, args.override)
    if args.seed is not None:
        cfg = cfg.with_overrides(train={"seed": args.seed})
    if args.out is not None:
        cfg = cfg.with_overrides(out=str(args.out))
    return cfg


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "eval":
            from .checkpoint import load_checkpoint

            cfg = resolve_config(args, base=load_checkpoint(args.checkpoint).config)
            path = experiments.cmd_eval(args.checkpoint, cfg, args.out)
        else:
            cfg = resolve_config(args)
            if args.command == "train":
                path = experiments.cmd_train(cfg) / "checkpoint.txt"
            elif args.command == "bench":
                if (args.cf_checkpoint is None) != (args.fm_checkpoint is None):
                    raise ConfigError("--cf-checkpoint and --fm-checkpoint go together")
                ckpts = {"cf": args.cf_checkpoint, "fm": args.fm_checkpoint} if args.cf_checkpoint else None
                path = experiments.cmd_bench(cfg, ckpts)
            elif args.command == "ablate":
                path = experiments.cmd_ablate(cfg)
            else:
                path = experiments.cmd_sweep(cfg, args.grid, workers=args.workers)
    except (ConfigError, FileNotFoundError) as exc:
        print(f"cfflow {args.command}: {exc}", file=sys.stderr)
        return 2
    print(path)
    return 0


if __name__ == "__main__":
    sys.exit(main())
