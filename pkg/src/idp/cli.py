"""Command-line entry point: one verb per pipeline stage plus ``run`` for all of them."""
from __future__ import annotations

import argparse
import logging
import sys

import torch

from .config import ConfigError, load_config
from .pipeline import STAGES, StageError, run_all, run_stage
from .checkpoint import CheckpointError
from .dataset import DataError

VERBS = {stage.replace("_", "-"): stage for stage in ("synth",) + STAGES}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="idp", description=__doc__)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="INI configuration file")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="override one configuration key (repeatable)")
    common.add_argument("--seed", type=int, help="override run.seed")
    common.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="verb", required=True)
    for verb in VERBS:
        p = sub.add_parser(verb, parents=[common], help=f"run the {verb} stage")
        if verb == "deploy":
            p.add_argument("--mode", choices=("zero-shot", "finetune-all", "retrain-encoder"),
                           help="deployment mode (overrides transfer.mode)")
    run = sub.add_parser("run", parents=[common], help="run every stage in order")
    run.add_argument("--mode", choices=("zero-shot", "finetune-all", "retrain-encoder"))
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    torch.set_num_threads(1)
    overrides = list(args.overrides)
    if getattr(args, "mode", None):
        overrides.append(f"transfer.mode={args.mode}")
    try:
        cfg = load_config(args.config, overrides, args.seed)
        if args.verb == "run":
            outdir = run_all(cfg)
            print(outdir)
        else:
            for path in run_stage(cfg, VERBS[args.verb]):
                print(path)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (StageError, CheckpointError, DataError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
