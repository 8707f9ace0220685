"""The sweep command -- padding ratio over device counts and row granularities.

For every (m, granularity) pair the quantized tensors of the config get
Rows(granularity), every group is planned, and one CSV row is written:

    m,granularity,S,padding_ratio

S is the per-device buffer size summed over all FSDP units (each group's S
times its repeat), so padding_ratio = (m*S - elements) / elements for the
whole model. With --group the row describes that one group.
"""

import csv
import logging

from cli.base import EXIT_OK, EXIT_VALIDATION
from cli.plan import PlanCommand
from configs.loader import ModelConfig, with_row_granularity
from raggedshard.planner import padding_report

logger = logging.getLogger("raggedshard.cli.sweep")

CSV_FIELDS = ["m", "granularity", "S", "padding_ratio"]


def sweep_model(command: PlanCommand, config: ModelConfig, devices: list[int], granularities: list[int]):
    """Yield (m, granularity, S, padding_ratio, violation_count) rows in a fixed order."""
    for granularity in granularities:
        variant = with_row_granularity(config, granularity)
        groups = command.groups_of(variant)
        for m in devices:
            S_total = padded = elements = bad = 0
            for group in groups:
                plan, _, violations, _ = command.plan_group(group, m)
                report = padding_report(plan)
                S_total += plan.S * group.repeat
                padded += report.padding_elements * group.repeat
                elements += plan.total_elements * group.repeat
                bad += len(violations)
            ratio = padded / elements if elements else 0.0
            logger.info(f"m={m} granularity={granularity}: S={S_total} padding={ratio:.6f}")
            yield m, granularity, S_total, ratio, bad


def _int_list(value, default) -> list[int]:
    if value is None:
        return [int(v) for v in default]
    if isinstance(value, (list, tuple)):
        return [int(v) for v in value]
    return [int(value)]


class SweepCommand(PlanCommand):
    """Writes the padding CSV for one model config."""

    def __init__(self, args):
        super().__init__(args, "sweep")

    def run(self) -> int:
        config = self.load_model()
        devices = _int_list(getattr(self.args, "devices", None), self.config["sweep"]["devices"])
        granularities = _int_list(getattr(self.args, "granularity", None), self.config["sweep"]["granularities"])

        failed = 0
        with self.output() as out:
            writer = csv.writer(out, lineterminator="\n")
            writer.writerow(CSV_FIELDS)
            for m, granularity, S, ratio, bad in sweep_model(self, config, devices, granularities):
                writer.writerow([m, granularity, S, f"{ratio:.6f}"])
                failed += bad
        if failed:
            logger.warning(f"{failed} plan violation(s) during the sweep")
        return EXIT_VALIDATION if failed else EXIT_OK
