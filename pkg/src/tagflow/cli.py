"""Command-line pipeline driver.

Subcommands: phantom | harp | register | evaluate | pipeline. Every
subcommand takes --config PATH; --out, --seed and --jobs override the
corresponding config values. Logging verbosity comes from the TAGFLOW_LOG
environment variable (error | info | debug).

Exit codes: 0 success, 1 usage/config error, 2 numerical failure,
3 I/O failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import os
import sys

from .config import ConfigError, parse_config_file
from .demons import NumericalDivergenceError
from .pipeline import (
    StageFailure,
    run_pipeline,
    stage_evaluate,
    stage_harp,
    stage_phantom,
    stage_register,
)

__all__ = ["main"]

log = logging.getLogger("tagflow.cli")

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_NUMERICAL = 2
EXIT_IO = 3

_LOG_LEVELS = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message)


def _build_parser() -> _Parser:
    parser = _Parser(prog="tagflow", description=__doc__.strip().splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in [
        ("phantom", "render the synthetic tagged sequence"),
        ("harp", "extract harmonic phase volumes from the frames"),
        ("register", "run the configured registration strategies"),
        ("evaluate", "score the estimates and write metrics + figures"),
        ("pipeline", "run all stages in order"),
    ]:
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", required=True, help="path to the key=value config file")
        p.add_argument("--out", help="output directory (overrides output.dir)")
        p.add_argument("--jobs", type=int, default=1, help="worker cap for parallel stages")
        p.add_argument("--seed", type=int, help="override phantom.seed")
        if name in ("register", "pipeline"):
            p.add_argument("--trace", action="store_true",
                           help="write per-registration convergence CSVs")
    return parser


def _setup_logging() -> None:
    raw = os.environ.get("TAGFLOW_LOG", "info").lower()
    if raw not in _LOG_LEVELS:
        raise ConfigError(f"TAGFLOW_LOG must be one of {sorted(_LOG_LEVELS)}, got {raw!r}")
    logging.basicConfig(level=_LOG_LEVELS[raw], format="%(levelname)s %(name)s: %(message)s")


def _classify(exc: BaseException) -> int:
    if isinstance(exc, StageFailure):
        return _classify(exc.cause)
    if isinstance(exc, ConfigError):
        return EXIT_CONFIG
    if isinstance(exc, (NumericalDivergenceError, ArithmeticError)):
        return EXIT_NUMERICAL
    if isinstance(exc, OSError):
        return EXIT_IO
    return EXIT_CONFIG


def main(argv=None) -> int:
    try:
        _setup_logging()
        args = _build_parser().parse_args(argv)
        config = parse_config_file(args.config)
        if args.seed is not None:
            config = dataclasses.replace(
                config, phantom=dataclasses.replace(config.phantom, seed=args.seed)
            )
        out_dir = args.out if args.out is not None else config.output_dir
        jobs = max(1, args.jobs)
        if args.command == "phantom":
            stage_phantom(config, out_dir, jobs)
        elif args.command == "harp":
            stage_harp(config, out_dir, jobs)
        elif args.command == "register":
            stage_register(config, out_dir, jobs, trace=args.trace)
        elif args.command == "evaluate":
            stage_evaluate(config, out_dir, jobs)
        elif args.command == "pipeline":
            run_pipeline(config, out_dir, jobs, trace=args.trace)
    except (ConfigError, StageFailure, NumericalDivergenceError, OSError) as exc:
        print(f"tagflow: error: {exc}", file=sys.stderr)
        return _classify(exc)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
