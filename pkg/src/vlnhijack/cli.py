"""Command-line entry point: ``vlnhijack <command> --config <path> [--out DIR] [--workers N] [--seed S]``.

Exit status: 0 on success, 1 on a validation error, 2 when an upstream artifact is missing.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .config import ConfigError, parse_config, replace
from .pipeline import COMMANDS, Pipeline
from .storage import ArtifactError

logger = logging.getLogger("vlnhijack")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="vlnhijack", description=__doc__.splitlines()[0])
    parser.add_argument("command", choices=COMMANDS)
    parser.add_argument("--config", type=Path, default=None, help="INI-style config file (defaults if omitted)")
    parser.add_argument("--out", type=Path, default=Path("run"), help="run directory (default: ./run)")
    parser.add_argument("--workers", type=int, default=1, help="worker processes for attack jobs")
    parser.add_argument("--seed", type=int, default=None, help="override [run] seed")
    parser.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        text = args.config.read_text(encoding="utf-8") if args.config else ""
    except OSError as exc:
        logger.error("cannot read config: %s", exc)
        return 2
    try:
        cfg = parse_config(text)
        if args.seed is not None:
            cfg = replace(cfg, "run", seed=args.seed)
        if args.workers < 1:
            raise ConfigError("workers out of range")
        Pipeline(cfg, args.out, args.workers).run(args.command)
    except ArtifactError as exc:
        logger.error("%s", exc)
        return 2
    except ValueError as exc:
        logger.error("%s", exc)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
