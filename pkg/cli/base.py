"""Base class for raggedshard CLI commands.

Every subcommand inherits from RaggedShardCommand, which provides:
- Settings loading (configs/settings.yaml merged over defaults)
- Model config loading and the planner configured from flags and settings
- Output to a file (--out) or stdout
- The execute() harness that logs start, completion and failure
"""

import logging
import sys
from argparse import Namespace
from contextlib import contextmanager
from typing import Iterator, Optional, TextIO

from configs.loader import ModelConfig, load_model_config, load_settings
from raggedshard.planner import Ordering, Planner

logger = logging.getLogger("raggedshard.cli")

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_CONFIG = 3


class RaggedShardCommand:
    """Base class providing config loading and output handling for all commands."""

    def __init__(self, command_name: str, args: Namespace):
        self.command_name = command_name
        self.args = args
        self.config = self._load_config()

    # ------------------------------------------------------------------
    # Configuration
    # ------------------------------------------------------------------

    def _load_config(self) -> dict:
        """Load settings, letting command-line flags override the file."""
        settings = load_settings(getattr(self.args, "settings", None))
        planner = settings["planner"]
        if getattr(self.args, "gcoll_bytes", None) is not None:
            planner["gcoll_bytes"] = self.args.gcoll_bytes
        if getattr(self.args, "ordering", None) is not None:
            planner["ordering"] = self.args.ordering
        return settings

    def planner(self) -> Planner:
        cfg = self.config["planner"]
        return Planner(
            gcoll_bytes=int(cfg["gcoll_bytes"]),
            ordering=Ordering(cfg["ordering"]),
            refine_budget=int(cfg["refine_budget"]),
        )

    def load_model(self) -> ModelConfig:
        return load_model_config(self.args.config)

    # ------------------------------------------------------------------
    # Output
    # ------------------------------------------------------------------

    @contextmanager
    def output(self) -> Iterator[TextIO]:
        """Yield the --out file, or stdout when no path was given."""
        path: Optional[str] = getattr(self.args, "out", None)
        if not path:
            yield sys.stdout
            return
        with open(path, "w", newline="") as f:
            yield f
        logger.info(f"[{self.command_name}] Wrote {path}")

    @staticmethod
    def summary(text: str) -> None:
        """Human-readable report lines go to stderr so stdout stays machine-readable."""
        print(text, file=sys.stderr)

    # ------------------------------------------------------------------
    # Execution harness
    # ------------------------------------------------------------------

    def run(self) -> int:
        """Override in subclass. Returns the process exit code."""
        raise NotImplementedError("Subclasses must implement run()")

    def execute(self) -> int:
        """Run the command with logging and error handling."""
        logger.info(f"[{self.command_name}] Starting run")
        try:
            code = self.run()
            logger.info(f"[{self.command_name}] Completed (exit {code})")
            return code
        except Exception as exc:
            logger.error(f"[{self.command_name}] Failed: {exc}")
            raise
