"""Exhaustive reference solver for small layout problems.

Tries every start offset for every tensor (all inter-tensor padding
assignments) at every candidate S from the capacity lower bound upward, so
it finds the exact minimum per-device size for the problem's tensor order.
Cost grows with m * S per candidate; only used to check the planner on
instances within ``OracleLimits``.
"""

import logging
from dataclasses import dataclass

import numpy as np

from raggedshard.errors import LimitExceeded
from raggedshard.planner import Ordering, PlanProblem

logger = logging.getLogger("raggedshard.oracle")


@dataclass(frozen=True)
class OracleLimits:
    max_tensors: int = 6
    max_elements: int = 256
    max_devices: int = 4


def _check_limits(problem: PlanProblem, limits: OracleLimits) -> None:
    if len(problem.tensors) > limits.max_tensors:
        raise LimitExceeded(f"{len(problem.tensors)} tensors exceeds oracle limit {limits.max_tensors}")
    if problem.total_elements > limits.max_elements:
        raise LimitExceeded(
            f"{problem.total_elements} elements exceeds oracle limit {limits.max_elements}"
        )
    if problem.m > limits.max_devices:
        raise LimitExceeded(f"{problem.m} devices exceeds oracle limit {limits.max_devices}")


def valid_starts(e: int, g: int, S: int, m: int) -> np.ndarray:
    """Mask over start offsets 0..mS-e: no device boundary cuts a block."""
    starts = np.arange(m * S - e + 1)
    ok = np.ones(starts.shape, dtype=bool)
    for k in range(1, m):
        boundary = k * S
        inside = (starts < boundary) & (boundary < starts + e)
        ok &= ~inside | ((boundary - starts) % g == 0)
    return ok


def exists_layout(sizes: tuple[int, ...], blocks: tuple[int, ...], S: int, m: int) -> bool:
    """True if some placement of the tensors, in this order, fits in m regions of S.

    ``reach[p]`` is True when the remaining tensors can be placed at or after
    offset ``p``; it is built back to front over every start offset.
    """
    capacity = m * S
    if sum(sizes) > capacity:
        return False
    reach = np.ones(capacity + 1, dtype=bool)
    for e, g in zip(reversed(sizes), reversed(blocks)):
        ok = valid_starts(e, g, S, m) & reach[e:]
        nxt = np.zeros(capacity + 1, dtype=bool)
        nxt[: ok.size] = np.logical_or.accumulate(ok[::-1])[::-1]
        reach = nxt
    return bool(reach[0])


def _oracle_for_order(problem: PlanProblem) -> int:
    ordered = problem.ordered()
    sizes = tuple(t.numel for t in ordered)
    blocks = tuple(t.block_size for t in ordered)
    S = problem.lower_bound()
    while not exists_layout(sizes, blocks, S, problem.m):
        S += problem.g_coll
    return S


def oracle_min_shard(problem: PlanProblem, limits: OracleLimits = OracleLimits()) -> int:
    """Exact minimum S for the problem's tensor order; LimitExceeded on large inputs."""
    _check_limits(problem, limits)
    if not problem.tensors:
        return 0
    if problem.ordering is Ordering.BEST:
        best = min(
            _oracle_for_order(problem.with_ordering(o))
            for o in (Ordering.DEFAULT, Ordering.BY_BLOCK_SIZE, Ordering.BY_SHAPE)
        )
    else:
        best = _oracle_for_order(problem)
    logger.debug("oracle: %d tensors, m=%d -> S=%d", len(problem.tensors), problem.m, best)
    return best
