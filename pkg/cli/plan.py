"""The plan command -- lays out every FSDP group of a model config.

Writes one JSON document with a plan per group (stable key order, so the
output is byte-stable) and prints a per-group summary with planning time
to stderr. Exit code 0 only when every plan validates.
"""

import json
import logging

from cli.base import EXIT_OK, EXIT_VALIDATION, RaggedShardCommand
from configs.loader import ModelConfig, TensorGroup, get_group, with_row_granularity
from raggedshard.planner import (
    Ordering,
    naive_plan,
    padding_report,
    plan_to_dict,
    validate_plan,
)

logger = logging.getLogger("raggedshard.cli.plan")


def single_int(value, flag: str) -> int:
    """Flags like --devices accept lists for sweep; plan and simulate take one value."""
    if isinstance(value, (list, tuple)):
        if len(value) != 1:
            raise ValueError(f"{flag} takes a single value here, got {list(value)}")
        return int(value[0])
    return int(value)


class PlanCommand(RaggedShardCommand):
    """Plans each group of a model config on ``--devices`` devices."""

    def __init__(self, args, command_name: str = "plan"):
        super().__init__(command_name, args)

    # ------------------------------------------------------------------
    # Planning helpers
    # ------------------------------------------------------------------

    def groups_of(self, config: ModelConfig) -> list[TensorGroup]:
        if getattr(self.args, "group", None):
            return [get_group(config, self.args.group)]
        return list(config.groups)

    def plan_group(self, group: TensorGroup, m: int):
        planner = self.planner()
        if not getattr(self.args, "naive", False):
            return planner.solve(group.tensors, m)
        problem = planner.problem(group.tensors, m)
        if problem.ordering is Ordering.BEST:
            problem = problem.with_ordering(Ordering.DEFAULT)
        plan = naive_plan(problem)
        return plan, problem, validate_plan(plan, problem), 0.0

    # ------------------------------------------------------------------
    # Main logic
    # ------------------------------------------------------------------

    def run(self) -> int:
        config = self.load_model()
        if getattr(self.args, "granularity", None) is not None:
            config = with_row_granularity(config, single_int(self.args.granularity, "--granularity"))
        m = single_int(self.args.devices or self.config["simulate"]["devices"], "--devices")

        groups, rows = [], []
        failed = False
        for group in self.groups_of(config):
            plan, _, violations, seconds = self.plan_group(group, m)
            report = padding_report(plan)
            groups.append({"group": group.name, "repeat": group.repeat, "plan": plan_to_dict(plan, violations)})
            rows.append((group, plan, report, violations, seconds))
            failed = failed or bool(violations)
            if violations:
                logger.warning(f"group {group.name}: {len(violations)} violation(s)")

        document = {"config": config.name, "devices": m, "naive": bool(getattr(self.args, "naive", False)),
                    "groups": groups}
        with self.output() as out:
            out.write(json.dumps(document, indent=2) + "\n")

        self._print_summary(config, m, rows)
        return EXIT_VALIDATION if failed else EXIT_OK

    def _print_summary(self, config: ModelConfig, m: int, rows) -> None:
        self.summary(f"\n  raggedshard - Plan: {config.name} on {m} devices\n")
        self.summary(f"  {'Group':<16} {'Tensors':>8} {'Repeat':>7} {'S':>14} {'Padding':>9} {'Time':>9} {'Status'}")
        self.summary(f"  {'-'*16} {'-'*8} {'-'*7} {'-'*14} {'-'*9} {'-'*9} {'-'*10}")
        padded = total = 0
        for group, plan, report, violations, seconds in rows:
            status = f"{len(violations)} VIOLATIONS" if violations else "OK"
            self.summary(
                f"  {group.name:<16} {len(plan.tensors):>8} {group.repeat:>7} {plan.S:>14,} "
                f"{100 * report.ratio:>8.3f}% {1000 * seconds:>7.1f}ms {status}"
            )
            padded += report.padding_elements * group.repeat
            total += plan.total_elements * group.repeat
        ratio = padded / total if total else 0.0
        self.summary(f"\n  Whole model: {total:,} elements, padding {100 * ratio:.3f}%\n")
