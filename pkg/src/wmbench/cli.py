"""Command-line interface for wmbench."""

import argparse
import logging
import sys
from pathlib import Path
from typing import NoReturn, Optional

from ._errors import ExitCodes, WmBenchError, get_exit_code_for_exception, get_exit_message
from ._logging_config import configure_third_party_loggers, is_debug_enabled, setup_logging
from ._version import __version__
from .evaluation import read_leaderboard, rank_table, write_frame
from .pipeline import RunConfig, run_pipeline

logger = logging.getLogger(__name__)

# Subcommand to last stage it brings up to date
STAGE_COMMANDS = {
    "embed": "embed",
    "attack": "attack",
    "evaluate": "evaluate",
    "report": "report",
    "run-all": "report",
}


def _add_run_arguments(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", "-c", type=Path, required=True, help="Run configuration (TOML)")
    parser.add_argument("--seed", type=int, help="Master seed")
    parser.add_argument("--output", "-o", type=Path, help="Output directory holding run directories")
    parser.add_argument("--alpha", type=float, help="Significance level of watermark verification")
    parser.add_argument("--fpr-target", type=float, help="False-positive rate for TPR@FPR")
    parser.add_argument("--workers", type=int, help="Parallel workers within a stage")
    parser.add_argument("--run-id", help="Run directory name")


def create_parser() -> argparse.ArgumentParser:
    """Create command-line argument parser."""
    parser = argparse.ArgumentParser(
        prog="wmbench",
        description="Robustness benchmark for invisible image watermarks",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="""
Examples:
  wmbench run-all --config bench.toml            # Every stage, then reports
  wmbench attack --config bench.toml --workers 8 # Embed and attack only
  wmbench rank table.csv -o ranked.csv           # Rank a leaderboard table
  python -m wmbench report -c bench.toml         # Alternative startup method

Stages already up to date with the configuration are skipped.

Environment Variables:
  WMBENCH_LOG_LEVEL    Set logging level (DEBUG, INFO, WARNING, ERROR)
  WMBENCH_LOG_JSON     Use JSON logging format (true/false)
        """,
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")

    subparsers = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")
    helps = {
        "embed": "Watermark every dataset image",
        "attack": "Embed, then run builtin attacks and ingest external ones",
        "evaluate": "Decode, score and measure quality of every attacked image",
        "report": "Normalize quality and write curves, leaderboards and radar",
        "run-all": "Run every stage",
    }
    for command, help_text in helps.items():
        _add_run_arguments(subparsers.add_parser(command, help=help_text))

    rank = subparsers.add_parser(
        "rank", help="Rank attacks of a leaderboard CSV (attack, Q@<t>P x2, Avg P, Avg Q)"
    )
    rank.add_argument("table", type=Path, help="Leaderboard CSV to rank")
    rank.add_argument("--output", "-o", type=Path, help="Where to write the ranked table (default stdout)")
    return parser


def _load_config(args: argparse.Namespace) -> RunConfig:
    return RunConfig.load(args.config).with_overrides(
        seed=args.seed,
        output_dir=args.output,
        alpha=args.alpha,
        fpr_target=args.fpr_target,
        workers=args.workers,
        run_id=args.run_id,
    )


def _run(args: argparse.Namespace) -> None:
    config = _load_config(args)
    bundle = run_pipeline(config, until=STAGE_COMMANDS[args.command])
    logger.info(
        "Run %s: executed %s, skipped %s",
        config.run_id,
        ", ".join(bundle.executed) or "nothing",
        ", ".join(bundle.skipped) or "nothing",
    )
    for note in bundle.notes:
        logger.warning("%s", note)
    for name in sorted(bundle.reports):
        print(bundle.reports[name])


def _rank(args: argparse.Namespace) -> None:
    ranked = rank_table(read_leaderboard(args.table))
    if args.output is None:
        ranked.to_csv(sys.stdout, index=False, float_format="%.10g", lineterminator="\n")
    else:
        print(write_frame(ranked, args.output))


def main(args: Optional[list[str]] = None) -> NoReturn:
    """Main CLI entry point."""
    parser = create_parser()
    parsed = parser.parse_args(args)

    setup_logging()
    configure_third_party_loggers()

    try:
        if parsed.command == "rank":
            _rank(parsed)
        else:
            _run(parsed)
    except KeyboardInterrupt:
        logger.info("Interrupted")
        sys.exit(ExitCodes.INTERRUPTED)
    except WmBenchError as e:
        code = get_exit_code_for_exception(e)
        logger.error("%s: %s", get_exit_message(code), e, exc_info=is_debug_enabled())
        sys.exit(code)
    except (OSError, RuntimeError) as e:
        logger.error("Fatal error: %s", e, exc_info=True)
        sys.exit(ExitCodes.FAILURE)
    sys.exit(ExitCodes.OK)


if __name__ == "__main__":
    main()
