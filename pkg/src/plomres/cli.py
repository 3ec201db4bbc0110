"""Command-line entry point.

Every subcommand runs the pipeline up to its stage; completed stages whose
inputs are unchanged are loaded from the output directory.
"""

from __future__ import annotations

import argparse
import logging
import sys

from . import config as config_mod
from .pipeline import Pipeline, StageError

COMMANDS = {
    "train": "train",
    "reduce": "reduce",
    "learn": "learn",
    "residual": "residual",
    "learn-constrained": "constrained",
    "report": "report",
    "pipeline": "report",
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="plomres", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="YAML run configuration")
        p.add_argument("--seed", type=int, help="override the configured seed")
        p.add_argument("--out", help="output directory (overrides the config)")
        p.add_argument("-v", "--verbose", action="store_true")
        if name == "learn-constrained":
            p.add_argument("--algo", type=int, choices=(1, 2, 3), required=True)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = config_mod.load(args.config)
        if args.seed is not None:
            cfg["seed"] = args.seed
        if args.command == "learn-constrained":
            cfg["constrained"]["algos"] = [args.algo]
        cfg = config_mod.from_dict(cfg)
        pipe = Pipeline(cfg, args.out)
    except (config_mod.ConfigError, TypeError, ValueError) as exc:
        print(f"plomres: [config] {exc}", file=sys.stderr)
        return 2
    try:
        executed = pipe.run(until=COMMANDS[args.command])
    except StageError as exc:
        print(f"plomres: {exc}", file=sys.stderr)
        return 3
    ran = ", ".join(executed) if executed else "nothing (all stages up to date)"
    print(f"{args.command}: ran {ran}; outputs in {pipe.out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
