"""``occdet <command> [--config PATH] [--seed N] [--out DIR]``

Exit status 0 means every assertion of the command held, 1 means at least
one failed, 2 is a usage or configuration error.
"""
from __future__ import annotations

import argparse
import sys

from ..errors import DivergedLoss, OccdetError
from .commands import COMMANDS
from .config import ExperimentConfig


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="occdet", description="Run occdet experiments and write JSON reports.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, fn in COMMANDS.items():
        p = sub.add_parser(name, help=(fn.__doc__ or "").strip().splitlines()[0] if fn.__doc__ else None)
        p.add_argument("--config", help="JSON experiment config; defaults are used when omitted")
        p.add_argument("--seed", type=int, help="override the dataset seed")
        p.add_argument("--out", help="output directory (default: the config's output_dir)")
        if name in ("train-compare", "eval-occlusion"):
            p.add_argument("--epochs", type=int, help="override the training budget")
    return parser


def load_config(args) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    if args.seed is not None:
        cfg.data_seed = args.seed
    return cfg


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args)
        out = args.out or cfg.output_dir
        kwargs = {"epochs": args.epochs} if getattr(args, "epochs", None) is not None else {}
        result = COMMANDS[args.command](cfg, out, **kwargs)
    except OccdetError as exc:
        seed = getattr(exc, "seed", None)
        where = f" (seed {seed})" if seed is not None else ""
        print(f"{args.command}: {type(exc).__name__}{where}: {exc}", file=sys.stderr)
        return 1 if isinstance(exc, DivergedLoss) else 2
    for line in result.messages:
        print(line)
    print(f"{result.name}: {'passed' if result.passed else 'FAILED'}; report at {result.path}")
    return 0 if result.passed else 1


if __name__ == "__main__":
    sys.exit(main())
