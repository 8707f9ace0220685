"""The validate command -- re-checks a plan JSON document written by ``plan``.

Accepts either the multi-group document or a single plan object. Prints the
violation list as JSON; exit code 2 when any plan is invalid.
"""

import json
import logging

from cli.base import EXIT_OK, EXIT_VALIDATION, RaggedShardCommand
from raggedshard.errors import ConfigError
from raggedshard.planner import plan_from_dict, validate_plan

logger = logging.getLogger("raggedshard.cli.validate")


def load_plan_document(path: str) -> list[tuple[str, dict]]:
    """Return (group name, plan dict) pairs from a plan file."""
    try:
        with open(path) as f:
            data = json.load(f)
    except OSError as exc:
        raise ConfigError(f"Cannot read plan file {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"Plan file {path} is not valid JSON: {exc}") from exc
    if isinstance(data, dict) and "groups" in data:
        try:
            return [(entry.get("group", f"group{i}"), entry["plan"]) for i, entry in enumerate(data["groups"])]
        except (AttributeError, KeyError, TypeError) as exc:
            raise ConfigError(f"Plan file {path} has a malformed group entry: {exc}") from exc
    return [("plan", data)]


class ValidateCommand(RaggedShardCommand):
    def __init__(self, args):
        super().__init__("validate", args)

    def run(self) -> int:
        results = []
        invalid = 0
        for name, raw in load_plan_document(self.args.config):
            try:
                plan, problem = plan_from_dict(raw)
            except (KeyError, TypeError, ValueError) as exc:
                raise ConfigError(f"group {name}: malformed plan: {exc}") from exc
            violations = validate_plan(plan, problem)
            invalid += bool(violations)
            results.append({"group": name, "valid": not violations,
                            "violations": [v.to_dict() for v in violations]})
            logger.info(f"group {name}: {len(violations)} violation(s)")

        with self.output() as out:
            out.write(json.dumps({"plans": results}, indent=2) + "\n")
        self.summary(f"  {len(results) - invalid}/{len(results)} plans valid")
        return EXIT_VALIDATION if invalid else EXIT_OK
