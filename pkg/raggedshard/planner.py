"""Grouped RaggedShard buffer-layout planner.

Places a group of RaggedShard tensors into one global communication buffer
of ``m * S`` elements, split into ``m`` equal device regions, such that

- every tensor occupies one contiguous interval ``[l_t, r_t)``,
- intervals never overlap and keep the chosen tensor order,
- no device boundary ``k * S`` cuts through a sharding block,

while minimising the per-device size ``S``. Padding goes between tensors,
never inside them.

For a fixed order and a fixed ``S`` the leftmost placement of each tensor
is optimal (the next tensor only depends on where the previous one ends),
so feasibility is decided exactly in one pass. ``dp(t, i; S)`` is the
number of device shards needed by the first ``i`` blocks of ``t``; it is
monotone, so it is recorded as at most ``m`` constant segments per tensor.
The outer search walks the LCM prefixes of the tensors' granularities and
binary-searches multiples of each prefix LCM.
"""

import logging
import math
import time
from dataclasses import dataclass, field
from enum import Enum
from typing import Optional, Sequence

from raggedshard.core import GranularitySpec, TensorSpec, resolve_granularity
from raggedshard.errors import (
    InternalInconsistency,
    MixedElementWidth,
    ShapeMismatch,
)

logger = logging.getLogger("raggedshard.planner")

# Scan the whole lower-bound gap only when it costs at most this many
# single-tensor placements.
DEFAULT_REFINE_BUDGET = 20_000

# Collective alignment quantum in bytes.
DEFAULT_GCOLL_BYTES = 16


class Ordering(str, Enum):
    DEFAULT = "default"
    BY_BLOCK_SIZE = "block"
    BY_SHAPE = "shape"
    BEST = "best"


# ---------------------------------------------------------------------------
# Problem
# ---------------------------------------------------------------------------


def gcoll_elements(gcoll_bytes: int, elem_bytes: int) -> int:
    """Collective alignment in elements: ceil(gcoll_bytes / elem_bytes), at least 1."""
    return max(1, -(-gcoll_bytes // elem_bytes))


@dataclass(frozen=True)
class PlanProblem:
    """One communication group: tensors, device count and alignment unit."""

    tensors: tuple[TensorSpec, ...]
    m: int
    g_coll: int = 1
    ordering: Ordering = Ordering.DEFAULT

    def __post_init__(self):
        object.__setattr__(self, "tensors", tuple(self.tensors))
        object.__setattr__(self, "ordering", Ordering(self.ordering))
        if self.m < 1:
            raise ValueError(f"device count must be >= 1, got {self.m}")
        if self.g_coll < 1:
            raise ValueError(f"g_coll must be >= 1, got {self.g_coll}")
        widths = {t.elem_bytes for t in self.tensors}
        if len(widths) > 1:
            raise MixedElementWidth(f"group mixes element widths {sorted(widths)}")
        names = [t.name for t in self.tensors]
        if len(set(names)) != len(names):
            raise ShapeMismatch("tensor names within a group must be unique")
        for t in self.tensors:
            resolve_granularity(t)

    @classmethod
    def from_tensors(
        cls,
        tensors: Sequence[TensorSpec],
        m: int,
        gcoll_bytes: int = DEFAULT_GCOLL_BYTES,
        ordering: Ordering = Ordering.DEFAULT,
    ) -> "PlanProblem":
        elem_bytes = tensors[0].elem_bytes if tensors else 1
        return cls(tuple(tensors), m, gcoll_elements(gcoll_bytes, elem_bytes), ordering)

    @property
    def total_elements(self) -> int:
        return sum(t.numel for t in self.tensors)

    def with_ordering(self, ordering: Ordering) -> "PlanProblem":
        return PlanProblem(self.tensors, self.m, self.g_coll, ordering)

    def ordered(self) -> tuple[TensorSpec, ...]:
        """Tensors in buffer order for this problem's ordering heuristic."""
        by_index = sorted(self.tensors, key=lambda t: t.order_index)
        if self.ordering is Ordering.BY_BLOCK_SIZE:
            return tuple(sorted(by_index, key=lambda t: -t.block_size))
        if self.ordering is Ordering.BY_SHAPE:
            return tuple(sorted(by_index, key=lambda t: (t.shape, -t.order_index), reverse=True))
        return tuple(by_index)

    def lower_bound(self) -> int:
        """round_up(ceil(sum(e_t) / m), g_coll)."""
        even = -(-self.total_elements // self.m)
        return -(-even // self.g_coll) * self.g_coll


# ---------------------------------------------------------------------------
# Leftmost placement
# ---------------------------------------------------------------------------


def _leftmost_start(p: int, e: int, g: int, S: int, cap: float) -> Optional[int]:
    """Smallest l >= p such that [l, l + e) keeps every boundary k*S block-aligned.

    Returns None when no start keeps the tensor below ``cap``. Only the shard
    containing ``p`` and the one after it need checking: from the second
    shard on, the conditions repeat with period S and the end only grows.
    """
    c = p - p % S
    nxt = c + S
    if p + e <= nxt:
        return p if p + e <= cap else None

    rem = S % g
    start = p + (nxt - p) % g
    if start < nxt:
        if start + e > cap:
            return None
        if rem == 0 or start + e <= nxt + S:
            return start

    # Next shard: start on its boundary, or cross exactly one boundary.
    if e <= S or rem == 0:
        return nxt if nxt + e <= cap else None
    start = nxt + rem
    if start < nxt + S and start + e <= nxt + 2 * S and start + e <= cap:
        return start
    return None


def _leftmost_layout(
    sizes: Sequence[int], blocks: Sequence[int], S: int, cap: float
) -> tuple[list[int], bool]:
    """Place tensors left to right; returns (starts, all_placed)."""
    starts: list[int] = []
    p = 0
    for e, g in zip(sizes, blocks):
        start = _leftmost_start(p, e, g, S, cap)
        if start is None:
            return starts, False
        starts.append(start)
        p = start + e
    return starts, True


def _feasible(sizes: Sequence[int], blocks: Sequence[int], S: int, m: int) -> bool:
    if m * S < sum(sizes):
        return False
    return _leftmost_layout(sizes, blocks, S, m * S)[1]


# ---------------------------------------------------------------------------
# DP state
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Segment:
    """Blocks ``first..last`` of one tensor, all needing ``shards`` device shards."""

    first: int
    last: int
    shards: int
    offset: int  # buffer offset of block ``first``


@dataclass(frozen=True)
class DpState:
    S: int
    order: tuple[str, ...]
    starts: tuple[int, ...]
    segments: tuple[tuple[Segment, ...], ...]
    shards_needed: Optional[int]  # dp(last tensor, u_last); None if a tensor cannot be placed

    def dp(self, tensor_index: int, block: int) -> int:
        for seg in self.segments[tensor_index]:
            if seg.first <= block <= seg.last:
                return seg.shards
        raise IndexError(f"block {block} of tensor {tensor_index} not recorded")


def _segments(start: int, g: int, u: int, S: int) -> tuple[Segment, ...]:
    segs: list[Segment] = []
    i = 0
    while i < u:
        offset = start + i * g
        device = offset // S
        boundary = (device + 1) * S
        last = min(u - 1, -(-(boundary - start) // g) - 1)
        segs.append(Segment(i, last, device + 1, offset))
        i = last + 1
    return tuple(segs)


def check_valid_shard(problem: PlanProblem, S: int) -> tuple[bool, DpState]:
    """Decide whether per-device size ``S`` admits a valid layout in the problem's order."""
    if S < 1 or S % problem.g_coll:
        raise ValueError(f"S={S} must be a positive multiple of g_coll={problem.g_coll}")
    ordered = problem.ordered()
    sizes = [t.numel for t in ordered]
    blocks = [t.block_size for t in ordered]
    starts, placed = _leftmost_layout(sizes, blocks, S, math.inf)
    segments = tuple(
        _segments(start, g, e // g, S) for start, e, g in zip(starts, sizes, blocks)
    )
    shards_needed = None
    if placed:
        shards_needed = segments[-1][-1].shards if segments else 0
    feasible = shards_needed is not None and shards_needed <= problem.m
    state = DpState(
        S=S,
        order=tuple(t.name for t in ordered),
        starts=tuple(starts),
        segments=segments,
        shards_needed=shards_needed,
    )
    return feasible, state


# ---------------------------------------------------------------------------
# Search for S*
# ---------------------------------------------------------------------------


def _prefix_lcms(ordered: Sequence[TensorSpec], g_coll: int) -> list[int]:
    """g_coll, then LCM prefixes over tensors sorted by element count, largest first."""
    by_size = sorted(ordered, key=lambda t: (-t.numel, t.order_index))
    values = [g_coll]
    g = g_coll
    for t in by_size:
        g = math.lcm(g, t.block_size)
        if g != values[-1]:
            values.append(g)
    return values


def _search_multiples(
    sizes: Sequence[int], blocks: Sequence[int], m: int, g: int, lo_k: int, hi_k: int, limit: float
) -> Optional[int]:
    """Smallest feasible k*g found by galloping then binary search, below ``limit``."""
    prev_bad = lo_k - 1
    step = 1
    k = lo_k
    found = None
    while k * g < limit:
        if _feasible(sizes, blocks, k * g, m):
            found = k
            break
        prev_bad = k
        if k >= hi_k:
            break
        k = min(k + step, hi_k)
        step *= 2
    if found is None:
        return None
    lo, hi = prev_bad, found
    while hi - lo > 1:
        mid = (lo + hi) // 2
        if _feasible(sizes, blocks, mid * g, m):
            hi = mid
        else:
            lo = mid
    return hi * g


def _min_for_order(problem: PlanProblem, refine_budget: int) -> int:
    ordered = problem.ordered()
    if not ordered:
        return 0
    sizes = [t.numel for t in ordered]
    blocks = [t.block_size for t in ordered]
    lower = -(-problem.total_elements // problem.m)
    bound = sum(e + g for e, g in zip(sizes, blocks))

    best = math.inf
    for g in _prefix_lcms(ordered, problem.g_coll):
        lo_k = -(-lower // g)
        hi_k = -(-bound // g)
        found = _search_multiples(sizes, blocks, problem.m, g, lo_k, hi_k, best)
        logger.debug("prefix lcm %d: candidate %s", g, found)
        if found is not None and found < best:
            best = found
    if best is math.inf:
        raise InternalInconsistency(f"no feasible shard size up to the search bound {bound}")

    floor = problem.lower_bound()
    window = (best - floor) // problem.g_coll
    if window and window * len(ordered) <= refine_budget:
        for S in range(floor, best, problem.g_coll):
            if _feasible(sizes, blocks, S, problem.m):
                logger.debug("window scan improved S from %d to %d", best, S)
                best = S
                break
    return int(best)


def min_shard_size(problem: PlanProblem, refine_budget: int = DEFAULT_REFINE_BUDGET) -> int:
    """Minimal per-device buffer size S* found by the LCM-prefix search.

    With ``Ordering.BEST`` the three orderings are searched and the smallest
    S* kept. ``refine_budget=0`` gives the raw prefix search.
    """
    if problem.ordering is Ordering.BEST:
        return min(
            _min_for_order(problem.with_ordering(o), refine_budget)
            for o in (Ordering.DEFAULT, Ordering.BY_BLOCK_SIZE, Ordering.BY_SHAPE)
        )
    return _min_for_order(problem, refine_budget)


# ---------------------------------------------------------------------------
# Plans
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DevicePiece:
    """Part of a tensor owned by one device, in device-local offsets."""

    device: int
    local_start: int
    local_stop: int


@dataclass(frozen=True)
class LayoutPlan:
    m: int
    S: int
    g_coll: int
    ordering: Ordering
    tensors: tuple[TensorSpec, ...]  # buffer order
    intervals: tuple[tuple[int, int], ...]
    device_owners: tuple[tuple[DevicePiece, ...], ...]
    padding: tuple[tuple[int, int], ...]

    @property
    def capacity(self) -> int:
        return self.m * self.S

    @property
    def total_elements(self) -> int:
        return sum(t.numel for t in self.tensors)

    def index_of(self, name: str) -> int:
        for i, t in enumerate(self.tensors):
            if t.name == name:
                return i
        raise KeyError(name)

    def interval_of(self, name: str) -> tuple[int, int]:
        return self.intervals[self.index_of(name)]


def device_pieces(start: int, stop: int, S: int) -> tuple[DevicePiece, ...]:
    """Split a buffer interval at device boundaries."""
    pieces: list[DevicePiece] = []
    pos = start
    while pos < stop:
        device = pos // S
        end = min(stop, (device + 1) * S)
        pieces.append(DevicePiece(device, pos - device * S, end - device * S))
        pos = end
    return tuple(pieces)


def padding_intervals(intervals: Sequence[tuple[int, int]], capacity: int) -> tuple[tuple[int, int], ...]:
    """Unowned gaps in [0, capacity)."""
    gaps: list[tuple[int, int]] = []
    pos = 0
    for start, stop in sorted(intervals):
        if start > pos:
            gaps.append((pos, start))
        pos = max(pos, stop)
    if pos < capacity:
        gaps.append((pos, capacity))
    return tuple(gaps)


def _assemble(
    problem: PlanProblem, ordering: Ordering, ordered: Sequence[TensorSpec], S: int, starts: Sequence[int]
) -> LayoutPlan:
    intervals = tuple((s, s + t.numel) for s, t in zip(starts, ordered))
    return LayoutPlan(
        m=problem.m,
        S=S,
        g_coll=problem.g_coll,
        ordering=ordering,
        tensors=tuple(ordered),
        intervals=intervals,
        device_owners=tuple(device_pieces(a, b, S) for a, b in intervals) if S else (),
        padding=padding_intervals(intervals, problem.m * S),
    )


def build_plan(problem: PlanProblem, S: int, state: DpState) -> LayoutPlan:
    """Reconstruct the leftmost layout recorded in ``state``."""
    if problem.ordering is Ordering.BEST:
        raise ValueError("build_plan needs a concrete ordering")
    if not problem.tensors:
        return _assemble(problem, problem.ordering, (), S, ())
    if state.S != S or state.shards_needed is None or state.shards_needed > problem.m:
        raise ValueError(f"state for S={state.S} is not a feasible witness for S={S}")
    ordered = problem.ordered()
    if tuple(t.name for t in ordered) != state.order or len(state.starts) != len(ordered):
        raise InternalInconsistency("state order does not match the problem")

    for t, start, segs in zip(ordered, state.starts, state.segments):
        g = t.block_size
        covered = 0
        for seg in segs:
            offset = start + seg.first * g
            end = start + (seg.last + 1) * g
            if seg.first != covered or seg.offset != offset:
                raise InternalInconsistency(f"{t.name}: segment {seg} does not continue the tensor")
            if offset < (seg.shards - 1) * S or end > seg.shards * S:
                raise InternalInconsistency(f"{t.name}: segment {seg} leaves shard {seg.shards}")
            covered = seg.last + 1
        if covered != t.num_blocks:
            raise InternalInconsistency(f"{t.name}: segments cover {covered} of {t.num_blocks} blocks")
    return _assemble(problem, problem.ordering, ordered, S, state.starts)


def naive_plan(problem: PlanProblem) -> LayoutPlan:
    """Back-to-back concatenation with end padding only; ignores block boundaries."""
    ordered = problem.ordered()
    starts, pos = [], 0
    for t in ordered:
        starts.append(pos)
        pos += t.numel
    S = problem.lower_bound() if ordered else 0
    return _assemble(problem, problem.ordering, ordered, S, starts)


def plan_layout(problem: PlanProblem, refine_budget: int = DEFAULT_REFINE_BUDGET) -> LayoutPlan:
    """Solve for S* and build the leftmost plan for it."""
    if not problem.tensors:
        return _assemble(problem, Ordering.DEFAULT if problem.ordering is Ordering.BEST else problem.ordering, (), 0, ())
    candidates = (
        [Ordering.DEFAULT, Ordering.BY_BLOCK_SIZE, Ordering.BY_SHAPE]
        if problem.ordering is Ordering.BEST
        else [problem.ordering]
    )
    best: Optional[tuple[int, PlanProblem]] = None
    for ordering in candidates:
        sub = problem.with_ordering(ordering)
        S = _min_for_order(sub, refine_budget)
        if best is None or S < best[0]:
            best = (S, sub)
    S, chosen = best
    feasible, state = check_valid_shard(chosen, S)
    if not feasible:
        raise InternalInconsistency(f"search returned infeasible S={S}")
    return build_plan(chosen, S, state)


# ---------------------------------------------------------------------------
# Validation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Violation:
    constraint: str
    tensor: str
    detail: str
    other: Optional[str] = None
    boundary: Optional[int] = None
    interval: Optional[tuple[int, int]] = None

    def to_dict(self) -> dict:
        return {
            "constraint": self.constraint,
            "tensor": self.tensor,
            "other": self.other,
            "boundary": self.boundary,
            "interval": list(self.interval) if self.interval else None,
            "detail": self.detail,
        }


def validate_plan(plan: LayoutPlan, problem: PlanProblem) -> list[Violation]:
    """Check a plan against the layout constraints; empty list means valid."""
    violations: list[Violation] = []
    S, m = plan.S, plan.m

    if m != problem.m:
        violations.append(Violation("balanced_load", "*", f"plan has {m} devices, problem has {problem.m}"))
    if S and S % problem.g_coll:
        violations.append(Violation("alignment", "*", f"S={S} is not a multiple of g_coll={problem.g_coll}"))

    expected = {t.name: t for t in problem.tensors}
    seen = {t.name for t in plan.tensors}
    for name in sorted(set(expected) - seen):
        violations.append(Violation("membership", name, "tensor missing from plan"))
    for name in sorted(seen - set(expected)):
        violations.append(Violation("membership", name, "tensor not in problem"))

    capacity = m * S
    for t, (start, stop) in zip(plan.tensors, plan.intervals):
        ref = expected.get(t.name, t)
        if stop - start != ref.numel or start < 0 or stop > capacity:
            violations.append(
                Violation(
                    "contiguity", t.name,
                    f"interval length {stop - start} for {ref.numel} elements within capacity {capacity}",
                    interval=(start, stop),
                )
            )
        if S:
            g = ref.block_size
            for k in range(start // S + 1, min(m, (stop - 1) // S) + 1):
                boundary = k * S
                if start < boundary < stop and (boundary - start) % g:
                    violations.append(
                        Violation(
                            "non_sharded_block", t.name,
                            f"boundary {boundary} at offset {boundary - start} is not a multiple of {g}",
                            boundary=k, interval=(start, stop),
                        )
                    )

    # Overlap sweep over intervals sorted by start.
    ranked = sorted(zip(plan.intervals, (t.name for t in plan.tensors)))
    active: list[tuple[int, str]] = []
    for (start, stop), name in ranked:
        active = [(end, other) for end, other in active if end > start]
        for _, other in active:
            violations.append(
                Violation("overlap", other, f"{other} overlaps {name}", other=name, interval=(start, stop))
            )
        active.append((stop, name))

    if problem.ordering is not Ordering.BEST:
        wanted = [t.name for t in problem.with_ordering(plan.ordering).ordered()]
        actual = [name for _, name in ranked]
        if set(wanted) == set(actual) and wanted != actual:
            violations.append(Violation("order", "*", f"buffer order {actual} differs from {wanted}"))

    if S:
        for t, (start, stop), pieces in zip(plan.tensors, plan.intervals, plan.device_owners):
            if tuple(pieces) != device_pieces(start, stop, S):
                violations.append(
                    Violation("balanced_load", t.name, "device ownership does not follow [(k-1)S, kS)",
                              interval=(start, stop))
                )
        if len(plan.device_owners) != len(plan.tensors):
            violations.append(Violation("balanced_load", "*", "device ownership missing for some tensors"))
    if tuple(plan.padding) != padding_intervals(plan.intervals, capacity):
        violations.append(Violation("padding", "*", "padding intervals are not the complement of tensors"))
    return violations


# ---------------------------------------------------------------------------
# Padding accounting
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PaddingReport:
    padding_elements: int
    ratio: float
    per_device_padding: tuple[int, ...] = field(default=())
    max_owned: int = 0
    min_owned: int = 0

    def to_dict(self) -> dict:
        return {
            "padding_elements": self.padding_elements,
            "ratio": self.ratio,
            "per_device_padding": list(self.per_device_padding),
            "max_owned": self.max_owned,
            "min_owned": self.min_owned,
        }


def padding_report(plan: LayoutPlan) -> PaddingReport:
    total = plan.total_elements
    padding = plan.capacity - total
    owned = [0] * plan.m
    for pieces in plan.device_owners:
        for piece in pieces:
            owned[piece.device] += piece.local_stop - piece.local_start
    return PaddingReport(
        padding_elements=padding,
        ratio=padding / total if total else 0.0,
        per_device_padding=tuple(plan.S - o for o in owned),
        max_owned=max(owned) if owned else 0,
        min_owned=min(owned) if owned else 0,
    )


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------


def _tensor_to_dict(t: TensorSpec) -> dict:
    return {
        "name": t.name,
        "shape": list(t.shape),
        "elem_bytes": t.elem_bytes,
        "granularity": t.granularity.to_dict(),
        "order_index": t.order_index,
        "block_size": t.block_size,
    }


def plan_to_dict(plan: LayoutPlan, violations: Optional[Sequence[Violation]] = None) -> dict:
    """Stable JSON document for a plan."""
    report = padding_report(plan)
    return {
        "m": plan.m,
        "S": plan.S,
        "g_coll": plan.g_coll,
        "ordering": plan.ordering.value,
        "tensors": [
            {
                **_tensor_to_dict(t),
                "interval": [start, stop],
                "devices": [[p.device, p.local_start, p.local_stop] for p in pieces],
            }
            for t, (start, stop), pieces in zip(plan.tensors, plan.intervals, plan.device_owners or [()] * len(plan.tensors))
        ],
        "padding": [list(gap) for gap in plan.padding],
        "padding_elements": report.padding_elements,
        "padding_ratio": report.ratio,
        "violations": [v.to_dict() for v in (violations or [])],
    }


def plan_from_dict(data: dict) -> tuple[LayoutPlan, PlanProblem]:
    """Rebuild a plan and the problem it claims to solve from its JSON document."""
    tensors, intervals, owners = [], [], []
    for entry in data["tensors"]:
        tensors.append(
            TensorSpec(
                name=entry["name"],
                shape=tuple(entry["shape"]),
                elem_bytes=int(entry["elem_bytes"]),
                granularity=GranularitySpec.from_dict(entry["granularity"]),
                order_index=int(entry["order_index"]),
            )
        )
        intervals.append(tuple(entry["interval"]))
        owners.append(tuple(DevicePiece(*map(int, piece)) for piece in entry.get("devices", [])))
    ordering = Ordering(data.get("ordering", "default"))
    problem = PlanProblem(tuple(tensors), int(data["m"]), int(data["g_coll"]), ordering)
    plan = LayoutPlan(
        m=int(data["m"]),
        S=int(data["S"]),
        g_coll=int(data["g_coll"]),
        ordering=ordering,
        tensors=tuple(tensors),
        intervals=tuple((int(a), int(b)) for a, b in intervals),
        device_owners=tuple(owners),
        padding=tuple((int(a), int(b)) for a, b in data.get("padding", [])),
    )
    return plan, problem


# ---------------------------------------------------------------------------
# Planner facade
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Planner:
    """Read-only planner configuration; safe to share across threads."""

    gcoll_bytes: int = DEFAULT_GCOLL_BYTES
    ordering: Ordering = Ordering.DEFAULT
    refine_budget: int = DEFAULT_REFINE_BUDGET

    def problem(self, tensors: Sequence[TensorSpec], m: int) -> PlanProblem:
        return PlanProblem.from_tensors(tensors, m, self.gcoll_bytes, self.ordering)

    def solve(self, tensors: Sequence[TensorSpec], m: int) -> tuple[LayoutPlan, PlanProblem, list[Violation], float]:
        """Plan one group; returns (plan, problem, violations, seconds)."""
        problem = self.problem(tensors, m)
        started = time.perf_counter()
        plan = plan_layout(problem, self.refine_budget)
        elapsed = time.perf_counter() - started
        violations = validate_plan(plan, problem.with_ordering(plan.ordering))
        logger.info(
            "planned %d tensors on %d devices: S=%d padding=%.4f%% in %.3fs",
            len(plan.tensors), m, plan.S, 100 * padding_report(plan).ratio, elapsed,
        )
        return plan, problem, violations, elapsed
