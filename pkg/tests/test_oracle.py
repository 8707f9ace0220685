import numpy as np
import pytest

from raggedshard.errors import LimitExceeded
from raggedshard.oracle import OracleLimits, exists_layout, oracle_min_shard, valid_starts
from raggedshard.planner import Ordering, check_valid_shard

from tests.test_planner import problem, random_problem


@pytest.mark.parametrize(
    "specs,m,expected",
    [
        ([(6, 3), (4, 2)], 2, 6),
        ([(4, 4), (4, 4)], 2, 4),
        ([(8, 4), (3, 3)], 2, 7),
        ([(10, 5)], 3, 5),
    ],
)
def test_known_minima(specs, m, expected):
    assert oracle_min_shard(problem(specs, m)) == expected


def test_valid_starts_mask():
    assert valid_starts(6, 3, 5, 2).tolist() == [False, False, True, False, False]


def test_single_device_accepts_every_start():
    assert valid_starts(3, 2, 8, 1).all()


def test_exists_layout():
    assert not exists_layout((6, 4), (3, 2), 5, 2)
    assert exists_layout((6, 4), (3, 2), 6, 2)
    assert not exists_layout((6, 4), (3, 2), 4, 2)


def test_oracle_result_is_feasible_and_tight():
    rng = np.random.default_rng(11)
    for _ in range(200):
        prob = random_problem(rng)
        S = oracle_min_shard(prob)
        assert S % prob.g_coll == 0
        assert S >= prob.lower_bound()
        assert check_valid_shard(prob, S)[0]
        if S > prob.lower_bound():
            assert not check_valid_shard(prob, S - prob.g_coll)[0]


def test_best_ordering_is_minimum_over_orders():
    rng = np.random.default_rng(12)
    for _ in range(50):
        prob = random_problem(rng)
        per_order = [
            oracle_min_shard(prob.with_ordering(o))
            for o in (Ordering.DEFAULT, Ordering.BY_BLOCK_SIZE, Ordering.BY_SHAPE)
        ]
        assert oracle_min_shard(prob.with_ordering(Ordering.BEST)) == min(per_order)


def test_empty_problem():
    assert oracle_min_shard(problem([], 3)) == 0


@pytest.mark.parametrize(
    "specs,m",
    [
        ([(1, 1)] * 7, 2),
        ([(200, 1), (100, 1)], 2),
        ([(4, 1)], 5),
    ],
)
def test_limits(specs, m):
    with pytest.raises(LimitExceeded):
        oracle_min_shard(problem(specs, m))


def test_custom_limits():
    prob = problem([(4, 1)] * 8, 2)
    assert oracle_min_shard(prob, OracleLimits(max_tensors=8)) == 16
