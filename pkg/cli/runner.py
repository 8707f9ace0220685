"""Generic runner for raggedshard commands.

Usage:
    python -m cli plan toy --devices 2 --gcoll-bytes 4
    python -m cli plan gpt_oss_120b --devices 128 --granularity 16 --out plan.json
    python -m cli validate plan.json
    python -m cli sweep deepseek_v3_671b --granularity 1,16,128 --out padding.csv
    python -m cli simulate toy_mlp --demo muon --devices 4
    python -m cli simulate quant32 --demo quant --devices 4

Exit codes: 0 success, 2 validation or property failure, 3 config error.
"""

import argparse
import json
import logging
import sys
from typing import Optional, Sequence

from cli.base import EXIT_CONFIG, EXIT_VALIDATION
from raggedshard.errors import (
    ConfigError,
    MixedElementWidth,
    NonDividingGranularity,
    NotMatrix,
    RaggedShardError,
)

logger = logging.getLogger("raggedshard.runner")

# Registry of command names to their classes.
COMMAND_REGISTRY = {
    "plan": "cli.plan.PlanCommand",
    "validate": "cli.validate.ValidateCommand",
    "sweep": "cli.sweep.SweepCommand",
    "simulate": "cli.simulate.SimulateCommand",
}

CONFIG_ERRORS = (ConfigError, NonDividingGranularity, MixedElementWidth, NotMatrix, OSError)


def _import_class(dotted_path: str):
    """Dynamically import a class from a dotted module path."""
    module_path, class_name = dotted_path.rsplit(".", 1)
    import importlib

    module = importlib.import_module(module_path)
    return getattr(module, class_name)


def _int_list(value: str) -> list[int]:
    """Parse '8,16,32' (or a single '8') into a list of ints."""
    try:
        values = [int(v) for v in value.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got '{value}'")
    if not values or any(v < 1 for v in values):
        raise argparse.ArgumentTypeError(f"expected positive integers, got '{value}'")
    return values


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="raggedshard",
        description="Plan, validate and simulate RaggedShard buffer layouts.",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="Available commands: " + ", ".join(sorted(COMMAND_REGISTRY.keys())),
    )
    parser.add_argument(
        "command",
        choices=sorted(COMMAND_REGISTRY.keys()),
        help="Name of the command to run.",
    )
    parser.add_argument(
        "config",
        help="Model config (bundled name or JSON path); for validate, a plan JSON file.",
    )
    parser.add_argument(
        "--devices",
        type=_int_list,
        default=None,
        help="Device count, or a comma-separated list for sweep (default from settings).",
    )
    parser.add_argument(
        "--gcoll-bytes",
        type=int,
        default=None,
        help="Collective alignment in bytes (default: 16).",
    )
    parser.add_argument(
        "--ordering",
        choices=["default", "block", "shape", "best"],
        default=None,
        help="Tensor ordering heuristic (default: default).",
    )
    parser.add_argument(
        "--granularity",
        type=_int_list,
        default=None,
        help="Row granularity for quantized tensors; comma-separated list for sweep.",
    )
    parser.add_argument("--group", default=None, help="Restrict to one FSDP group of the config.")
    parser.add_argument("--naive", action="store_true", help="Plan by plain concatenation (baseline).")
    parser.add_argument(
        "--demo",
        choices=["muon", "quant"],
        default="muon",
        help="Simulation to run (default: muon).",
    )
    parser.add_argument("--steps", type=int, default=None, help="Muon demo steps (default from settings).")
    parser.add_argument("--seed", type=int, default=None, help="Random seed (default from settings).")
    parser.add_argument("--settings", default=None, help="Alternate settings.yaml.")
    parser.add_argument("--out", default=None, help="Write output here instead of stdout.")
    parser.add_argument(
        "--log-level",
        default="WARNING",
        choices=["DEBUG", "INFO", "WARNING", "ERROR"],
        help="Logging level (default: WARNING).",
    )
    return parser


def _report_error(exc: BaseException) -> None:
    print(json.dumps({"error": type(exc).__name__, "message": str(exc)}), file=sys.stderr)


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)

    logging.basicConfig(
        level=getattr(logging, args.log_level),
        format="%(asctime)s %(name)s %(levelname)s %(message)s",
    )

    command_class = _import_class(COMMAND_REGISTRY[args.command])
    try:
        return command_class(args).execute()
    except CONFIG_ERRORS as exc:
        _report_error(exc)
        return EXIT_CONFIG
    except RaggedShardError as exc:
        _report_error(exc)
        return EXIT_VALIDATION
    except ValueError as exc:
        _report_error(exc)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
