"""Padding and planning time on the bundled production-scale configs."""

from argparse import Namespace

import pytest

from cli.plan import PlanCommand
from cli.sweep import sweep_model
from configs.loader import get_group, load_model_config
from raggedshard.planner import Planner

DEVICES = [8, 32, 128, 512]


def command(config):
    return PlanCommand(Namespace(config=config, group=None, naive=False, gcoll_bytes=None,
                                 ordering=None, settings=None))


def sweep(config, devices, granularities):
    return list(sweep_model(command(config), load_model_config(config), devices, granularities))


@pytest.mark.parametrize("config", ["gpt_oss_120b", "deepseek_v3_671b"])
def test_fine_granularity_pads_little(config):
    for m, granularity, S, ratio, bad in sweep(config, DEVICES, [1, 16]):
        assert bad == 0
        assert S > 0
        assert ratio < 0.03, (m, granularity, ratio)


def test_coarse_granularity_padding_is_bounded_and_uneven():
    rows = sweep("gpt_oss_120b", list(range(8, 513, 8)), [128])
    ratios = [ratio for _, _, _, ratio, _ in rows]
    assert all(bad == 0 for *_, bad in rows)
    assert max(ratios) <= 0.20
    steps = [b - a for a, b in zip(ratios, ratios[1:])]
    assert any(s > 0 for s in steps) and any(s < 0 for s in steps)


def test_sweep_rows_come_in_fixed_order():
    rows = sweep("toy", [1, 2, 4], [1, 2])
    assert [(m, g) for m, g, *_ in rows] == [(1, 1), (2, 1), (4, 1), (1, 2), (2, 2), (4, 2)]


def test_moe_layer_plans_quickly():
    group = get_group(load_model_config("deepseek_v3_671b"), "moe_layer")
    planner = Planner()
    best = min(planner.solve(group.tensors, 128)[3] for _ in range(3))
    assert best < 0.3
