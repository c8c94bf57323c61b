"""Command-line entry point: ``dgadr <subcommand> [options]``."""

from __future__ import annotations

import argparse
import sys
from collections.abc import Sequence
from pathlib import Path
from typing import Any

from dotenv import load_dotenv
from loguru import logger

from dgadr.__about__ import __version__
from dgadr.config import Settings
from dgadr.exceptions import DgadrError
from dgadr.flows.commands import FLOWS

LOG_FORMAT = (
    "<green>{time:YYYY-MM-DD HH:mm:ss}</green> | <level>{level: <8}</level> | "
    "<cyan>{name}</cyan> - <level>{message}</level>"
)


def setup_logging(level: str = "INFO") -> None:
    """Route loguru output to stderr at ``level``."""
    logger.remove()
    logger.add(sys.stderr, level=level.upper(), format=LOG_FORMAT)


def _add_common(parser: argparse.ArgumentParser, *, out_help: str) -> None:
    parser.add_argument("--config", type=Path, help="flat key = value config file")
    parser.add_argument("--out", type=Path, help=out_help)
    parser.add_argument(
        "--log-level", help="log level (default: $DGADR_LOG_LEVEL or INFO)"
    )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dgadr",
        description="Desk-scale domain-generalization experiments.",
    )
    parser.add_argument(
        "--version", action="version", version=f"%(prog)s {__version__}"
    )
    commands = parser.add_subparsers(dest="command", required=True)

    gen = commands.add_parser("gen", help="generate a synthetic multi-domain CSV")
    _add_common(gen, out_help="dataset CSV to write (required)")
    gen.add_argument("--seed", type=int, help="generator seed (data_seed)")

    train = commands.add_parser("train", help="train on all domains but one")
    train.add_argument("data", type=Path, help="dataset CSV")
    _add_common(train, out_help="run directory")
    train.add_argument("--target-domain", type=int, help="domain held out")
    train.add_argument("--seed", type=int, help="training seed")
    train.add_argument("--alpha", type=float, help="DomAlign weight")

    loto = commands.add_parser("loto", help="leave-one-domain-out protocol")
    loto.add_argument("data", type=Path, help="dataset CSV")
    _add_common(loto, out_help="run directory")
    loto.add_argument("--seed", type=int, help="run a single seed")
    loto.add_argument("--alpha", type=float, help="DomAlign weight")
    loto.add_argument("--jobs", type=int, help="parallel runs")

    evaluate = commands.add_parser("eval", help="evaluate a saved model")
    evaluate.add_argument("data", type=Path, help="dataset CSV")
    _add_common(evaluate, out_help="run directory")
    evaluate.add_argument("--params", type=Path, required=True, help="parameter file")
    evaluate.add_argument("--target-domain", type=int, help="evaluate one domain")

    analyze = commands.add_parser("analyze", help="KL matrix, dispersion and PCA")
    analyze.add_argument("data", type=Path, help="dataset CSV")
    _add_common(analyze, out_help="run directory")
    analyze.add_argument(
        "--params", type=Path, help="parameter file (raw features if omitted)"
    )

    gradcheck = commands.add_parser("gradcheck", help="finite-difference self-check")
    _add_common(gradcheck, out_help="run directory")
    gradcheck.add_argument("--alpha", type=float, help="DomAlign weight")
    return parser


def _overrides(args: argparse.Namespace) -> dict[str, Any]:
    overrides: dict[str, Any] = {}
    seed = getattr(args, "seed", None)
    if seed is not None:
        overrides["data_seed" if args.command == "gen" else "seeds"] = str(seed)
    for flag, key in (("alpha", "alpha"), ("jobs", "jobs")):
        value = getattr(args, flag, None)
        if value is not None:
            overrides[key] = value
    return overrides


def build_store(args: argparse.Namespace, settings: Settings) -> dict[str, Any]:
    """Initial flow store for a parsed command line."""
    if args.command == "gen":
        if args.out is None:
            msg = "gen needs --out <csv>"
            raise DgadrError(msg)
        run_dir = args.out.parent
    else:
        run_dir = args.out or settings.runs_dir / args.command
    return {
        "command": args.command,
        "config_path": args.config,
        "overrides": _overrides(args),
        "defaults": {"jobs": settings.jobs},
        "run_dir": run_dir,
        "out_path": args.out if args.command == "gen" else None,
        "data_path": getattr(args, "data", None),
        "params_path": getattr(args, "params", None),
        "target_domain": getattr(args, "target_domain", None),
    }


def main(argv: Sequence[str] | None = None) -> int:
    """Run one subcommand; returns the process exit code."""
    load_dotenv()
    args = build_parser().parse_args(argv)

    try:
        settings = Settings(log_level=args.log_level)
        setup_logging(settings.log_level)
        store = build_store(args, settings)
    except (DgadrError, ValueError) as e:
        print(f"dgadr: error: {e}", file=sys.stderr)
        return 1

    run_dir = Path(store["run_dir"])
    run_dir.mkdir(parents=True, exist_ok=True)
    sink = logger.add(run_dir / "run.log", level="DEBUG", mode="w")
    try:
        store = FLOWS[args.command].run(store)
    finally:
        logger.remove(sink)

    for line in store.get("summary", []):
        print(line)
    if store.get("action") == "error":
        print(f"dgadr: error: {store.get('error', 'unknown error')}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
