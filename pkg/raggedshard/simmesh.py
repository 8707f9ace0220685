"""Simulated device mesh and DTensor-style redistribution.

A SimMesh runs one Python thread per logical rank. Ranks only meet inside
collectives, which are rendezvous points over shared in-process state keyed
by (process group, per-rank call index). Every rank combines the gathered
payloads in rank order, so results do not depend on thread scheduling and
Partial reductions are bit-exact against a rank-order single-process sum.

DistTensor follows DTensor's SPMD model: each rank holds its own object
with the same global spec and placements and its own local payload.
RaggedShard payloads are flat runs of whole sharding blocks taken from the
tensor's communication (block-major) order.
"""

import logging
import threading
import time
from dataclasses import dataclass
from functools import lru_cache
from typing import Any, Callable, Optional, Sequence, Union

import numpy as np

from raggedshard.core import (
    BlockPermutation,
    Partial,
    Placement,
    RaggedShard,
    Replicate,
    Shard,
    StridedRaggedShard,
    TensorSpec,
    block_layout,
    check_placement,
    even_counts,
    ragged_offsets,
)
from raggedshard.errors import (
    CollectiveMismatch,
    MeshMismatch,
    ShapeMismatch,
    UnsupportedConversion,
)

logger = logging.getLogger("raggedshard.simmesh")

DEFAULT_TIMEOUT_S = 30.0

MeshDim = Union[int, str]


class _Aborted(CollectiveMismatch):
    """Raised in ranks waiting on a collective after another rank failed."""


class _Slot:
    def __init__(self, expected: int):
        self.expected = expected
        self.meta: dict[int, tuple] = {}
        self.payload: dict[int, Any] = {}
        self.error: Optional[str] = None
        self.taken = 0


# ---------------------------------------------------------------------------
# Mesh
# ---------------------------------------------------------------------------


class SimMesh:
    """An N-dimensional mesh of logical ranks, row-major (last dim innermost)."""

    def __init__(self, dims: Sequence[tuple[str, int]], timeout_s: float = DEFAULT_TIMEOUT_S):
        self.dims = tuple((str(name), int(size)) for name, size in dims)
        if not self.dims or any(size < 1 for _, size in self.dims):
            raise MeshMismatch(f"mesh dims must be non-empty with positive sizes, got {self.dims}")
        if len({name for name, _ in self.dims}) != len(self.dims):
            raise MeshMismatch(f"mesh dim names must be unique, got {self.names}")
        self.timeout_s = timeout_s
        self._cond = threading.Condition()
        self._reset()

    @classmethod
    def line(cls, m: int, name: str = "fsdp", timeout_s: float = DEFAULT_TIMEOUT_S) -> "SimMesh":
        return cls([(name, m)], timeout_s)

    def __repr__(self) -> str:
        return "SimMesh(" + ", ".join(f"{n}={s}" for n, s in self.dims) + ")"

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(name for name, _ in self.dims)

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(size for _, size in self.dims)

    @property
    def ndim(self) -> int:
        return len(self.dims)

    @property
    def size(self) -> int:
        return int(np.prod(self.shape))

    def dim_index(self, dim: MeshDim) -> int:
        if isinstance(dim, str):
            if dim not in self.names:
                raise MeshMismatch(f"unknown mesh dim {dim!r}; mesh has {self.names}")
            return self.names.index(dim)
        if not 0 <= dim < self.ndim:
            raise MeshMismatch(f"mesh dim {dim} out of range for {self.ndim}-D mesh")
        return dim

    def coords(self, rank: int) -> tuple[int, ...]:
        return tuple(int(c) for c in np.unravel_index(rank, self.shape))

    def rank_of(self, coords: Sequence[int]) -> int:
        return int(np.ravel_multi_index(tuple(coords), self.shape))

    def group(self, rank: int, dim: MeshDim) -> tuple[int, ...]:
        """Ranks sharing every coordinate with ``rank`` except along ``dim``, in coordinate order."""
        i = self.dim_index(dim)
        coords = list(self.coords(rank))
        members = []
        for c in range(self.shape[i]):
            coords[i] = c
            members.append(self.rank_of(coords))
        return tuple(members)

    # ------------------------------------------------------------------
    # Execution
    # ------------------------------------------------------------------

    def _reset(self) -> None:
        self._slots: dict[tuple, _Slot] = {}
        self._calls: dict[tuple, int] = {}
        self._finished: set[int] = set()
        self._aborted: Optional[int] = None

    def run(self, fn: Callable[["RankContext"], Any], launch_order: Optional[Sequence[int]] = None) -> list:
        """Run ``fn(ctx)`` on every rank concurrently; returns per-rank results.

        ``launch_order`` permutes thread start order (results must not depend
        on it). If any rank raises, waiting ranks are released and the
        lowest-ranked original exception is re-raised.
        """
        order = list(range(self.size)) if launch_order is None else [int(r) for r in launch_order]
        if sorted(order) != list(range(self.size)):
            raise MeshMismatch(f"launch order {order} is not a permutation of {self.size} ranks")
        with self._cond:
            self._reset()
        results: list = [None] * self.size
        errors: dict[int, BaseException] = {}

        def worker(rank: int) -> None:
            try:
                results[rank] = fn(RankContext(self, rank))
            except Exception as exc:
                errors[rank] = exc
                with self._cond:
                    if self._aborted is None:
                        self._aborted = rank
            finally:
                with self._cond:
                    self._finished.add(rank)
                    self._cond.notify_all()

        threads = [threading.Thread(target=worker, args=(r,), name=f"rank{r}", daemon=True) for r in order]
        for thread in threads:
            thread.start()
        for thread in threads:
            thread.join()

        if errors:
            primary = [exc for _, exc in sorted(errors.items()) if not isinstance(exc, _Aborted)]
            exc = primary[0] if primary else errors[min(errors)]
            logger.debug("%r run failed on %d ranks: %s", self, len(errors), exc)
            raise exc
        return results

    def _exchange(self, rank: int, group: tuple[int, ...], op: str, meta: tuple, payload: Any) -> dict[int, Any]:
        """Deposit ``payload`` and wait for every group member's payload."""
        with self._cond:
            call = self._calls.get((rank, group), 0)
            self._calls[(rank, group)] = call + 1
            slot = self._slots.setdefault((group, call), _Slot(len(group)))
            slot.meta[rank] = (op,) + tuple(meta)
            slot.payload[rank] = payload
            if len(slot.payload) == slot.expected:
                if len(set(slot.meta.values())) > 1:
                    slot.error = (
                        f"{op} on ranks {list(group)}: metadata differs across ranks "
                        f"{dict(sorted(slot.meta.items()))}"
                    )
                self._cond.notify_all()

            deadline = time.monotonic() + self.timeout_s
            while len(slot.payload) < slot.expected and slot.error is None:
                if self._aborted is not None:
                    raise _Aborted(f"rank {rank}: {op} abandoned, rank {self._aborted} failed")
                missing = [r for r in group if r not in slot.payload]
                gone = [r for r in missing if r in self._finished]
                if gone:
                    slot.error = f"{op} on ranks {list(group)}: ranks {gone} finished without entering"
                    self._cond.notify_all()
                    break
                remaining = deadline - time.monotonic()
                if remaining <= 0:
                    slot.error = f"{op} on ranks {list(group)}: timed out waiting for ranks {missing}"
                    self._cond.notify_all()
                    break
                self._cond.wait(remaining)

            if slot.error is not None:
                raise CollectiveMismatch(slot.error)
            slot.taken += 1
            if slot.taken == slot.expected:
                del self._slots[(group, call)]
            return dict(slot.payload)


def _ordered_sum(parts: Sequence[np.ndarray]) -> np.ndarray:
    acc = np.array(parts[0], copy=True)
    for part in parts[1:]:
        acc += part
    return acc


class RankContext:
    """One rank's handle on the mesh: coordinates and collectives."""

    def __init__(self, mesh: SimMesh, rank: int):
        self.mesh = mesh
        self.rank = rank
        self.coords = mesh.coords(rank)

    def __repr__(self) -> str:
        return f"RankContext(rank={self.rank}, coords={self.coords})"

    def coord(self, dim: MeshDim = 0) -> int:
        return self.coords[self.mesh.dim_index(dim)]

    def group(self, dim: MeshDim = 0) -> tuple[int, ...]:
        return self.mesh.group(self.rank, dim)

    def _gather(self, dim: MeshDim, op: str, meta: tuple, payload: Any) -> list:
        group = self.group(dim)
        received = self.mesh._exchange(self.rank, group, op, meta, payload)
        return [received[r] for r in group]

    def all_gather(self, x: np.ndarray, dim: MeshDim = 0) -> list[np.ndarray]:
        """Every member's array, in group order. Leading sizes may differ (ragged)."""
        x = np.asarray(x)
        parts = self._gather(dim, "all_gather", (x.dtype.str, x.shape[1:]), x)
        return [np.array(p, copy=True) for p in parts]

    def all_reduce(self, x: np.ndarray, dim: MeshDim = 0) -> np.ndarray:
        """Sum over the group in rank order."""
        x = np.asarray(x)
        return _ordered_sum(self._gather(dim, "all_reduce", (x.dtype.str, x.shape), x))

    def reduce_scatter(self, x: np.ndarray, sizes: Sequence[int], dim: MeshDim = 0) -> np.ndarray:
        """Rank-order sum of flat ``x``, keeping only this rank's ``sizes`` slice."""
        x = np.asarray(x).reshape(-1)
        sizes = tuple(int(s) for s in sizes)
        if sum(sizes) != x.size or len(sizes) != len(self.group(dim)):
            raise ShapeMismatch(f"reduce_scatter sizes {list(sizes)} do not split {x.size} elements")
        parts = self._gather(dim, "reduce_scatter", (x.dtype.str, x.shape, sizes), x)
        start, stop = ragged_offsets(sizes, 1)[self.coord(dim)]
        return _ordered_sum([p[start:stop] for p in parts])

    def all_to_all(self, chunks: Sequence[np.ndarray], dim: MeshDim = 0) -> list[np.ndarray]:
        """Send ``chunks[j]`` to group member j; returns what each member sent here."""
        group = self.group(dim)
        if len(chunks) != len(group):
            raise ShapeMismatch(f"all_to_all needs {len(group)} chunks, got {len(chunks)}")
        dtypes = {np.asarray(c).dtype.str for c in chunks}
        parts = self._gather(dim, "all_to_all", (tuple(sorted(dtypes)), len(chunks)), list(chunks))
        me = self.coord(dim)
        return [np.array(p[me], copy=True) for p in parts]

    def broadcast(self, x: Optional[np.ndarray], root: int = 0, dim: MeshDim = 0) -> np.ndarray:
        """Group member ``root``'s array on every member."""
        parts = self._gather(dim, "broadcast", (root,), x if self.coord(dim) == root else None)
        return np.array(parts[root], copy=True)

    def barrier(self, dim: MeshDim = 0) -> None:
        self._gather(dim, "barrier", (), None)


# ---------------------------------------------------------------------------
# Distributed tensors
# ---------------------------------------------------------------------------


@lru_cache(maxsize=512)
def _layout(spec: TensorSpec) -> BlockPermutation:
    return block_layout(spec)


def to_comm_order(spec: TensorSpec, full: np.ndarray) -> np.ndarray:
    """Flat communication-order copy of a row-major tensor."""
    return _layout(spec).to_comm(full)


def from_comm_order(spec: TensorSpec, flat: np.ndarray) -> np.ndarray:
    return _layout(spec).to_logical(flat)


def _sharded_dims(placements: Sequence[Placement]) -> list[int]:
    return [i for i, p in enumerate(placements) if isinstance(p, (RaggedShard, Shard))]


def _validate(mesh: SimMesh, spec: TensorSpec, placements: Sequence[Placement]) -> None:
    if len(placements) != mesh.ndim:
        raise MeshMismatch(f"{spec.name}: {len(placements)} placements for a {mesh.ndim}-D mesh")
    for i, p in enumerate(placements):
        if isinstance(p, StridedRaggedShard):
            raise UnsupportedConversion(
                f"{spec.name}: StridedRaggedShard is materialized through a DBuffer, not redistributed"
            )
        check_placement(spec, p)
        if isinstance(p, RaggedShard) and len(p.counts) != mesh.shape[i]:
            raise ShapeMismatch(
                f"{spec.name}: {len(p.counts)} counts for mesh dim {mesh.names[i]} of size {mesh.shape[i]}"
            )
        if isinstance(p, Shard) and spec.shape[p.dim] % mesh.shape[i]:
            raise ShapeMismatch(f"{spec.name}: dim {p.dim} not divisible by {mesh.shape[i]} ranks")
    if len(_sharded_dims(placements)) > 1:
        raise UnsupportedConversion(f"{spec.name}: at most one mesh dim may shard the tensor")


def local_shape(ctx: RankContext, spec: TensorSpec, placements: Sequence[Placement]) -> tuple[int, ...]:
    """Payload shape implied by the placements on this rank."""
    for i, p in enumerate(placements):
        if isinstance(p, RaggedShard):
            return (p.counts[ctx.coords[i]] * spec.block_size,)
        if isinstance(p, Shard):
            shape = list(spec.shape)
            shape[p.dim] //= ctx.mesh.shape[i]
            return tuple(shape)
    return spec.shape


@dataclass
class DistTensor:
    spec: TensorSpec
    placements: tuple[Placement, ...]
    local: np.ndarray

    @property
    def global_shape(self) -> tuple[int, ...]:
        return self.spec.shape

    def check(self, ctx: RankContext) -> None:
        _validate(ctx.mesh, self.spec, self.placements)
        expected = local_shape(ctx, self.spec, self.placements)
        if tuple(self.local.shape) != expected:
            raise ShapeMismatch(
                f"{self.spec.name}: rank {ctx.rank} holds {tuple(self.local.shape)}, "
                f"placements {[str(p) for p in self.placements]} imply {expected}"
            )


def _slice_local(ctx: RankContext, spec: TensorSpec, full: np.ndarray, dim: int, placement: Placement) -> np.ndarray:
    coord = ctx.coords[dim]
    if isinstance(placement, RaggedShard):
        start, stop = ragged_offsets(placement.counts, spec.block_size)[coord]
        return to_comm_order(spec, full)[start:stop].copy()
    if isinstance(placement, Shard):
        return np.split(full, ctx.mesh.shape[dim], axis=placement.dim)[coord].copy()
    return np.array(full, copy=True)


def distribute(
    ctx: RankContext, full: np.ndarray, spec: TensorSpec, placements: Sequence[Placement]
) -> DistTensor:
    """Place a global tensor (identical on every rank) onto the mesh.

    Partial dims put the whole value on coordinate 0 and zeros elsewhere.
    """
    placements = tuple(placements)
    _validate(ctx.mesh, spec, placements)
    full = np.asarray(full)
    if full.shape != spec.shape:
        raise ShapeMismatch(f"{spec.name}: global array {full.shape} does not match {spec.shape}")
    local = np.array(full, copy=True)
    for i, p in enumerate(placements):
        if isinstance(p, Partial) and ctx.coords[i] != 0:
            local = np.zeros_like(local)
    for i, p in enumerate(placements):
        if isinstance(p, (RaggedShard, Shard)):
            local = _slice_local(ctx, spec, local, i, p)
    return DistTensor(spec, placements, local)


def _convert(
    ctx: RankContext,
    spec: TensorSpec,
    dim: int,
    src: Placement,
    dst: Placement,
    local: np.ndarray,
    others_sharded: bool,
) -> np.ndarray:
    g = spec.block_size
    coord = ctx.coords[dim]

    if isinstance(src, Partial) and isinstance(dst, Replicate):
        return ctx.all_reduce(local, dim)

    if isinstance(src, RaggedShard) and isinstance(dst, RaggedShard):
        have = ragged_offsets(src.counts, g)[coord]
        chunks = []
        for lo, hi in ragged_offsets(dst.counts, g):
            a, b = max(lo, have[0]), min(hi, have[1])
            chunks.append(local[a - have[0]: b - have[0]] if a < b else local[:0])
        return np.concatenate(ctx.all_to_all(chunks, dim))

    if others_sharded:
        raise UnsupportedConversion(
            f"{spec.name}: {src} -> {dst} on mesh dim {dim} needs the other mesh dims unsharded"
        )

    if isinstance(src, RaggedShard) and isinstance(dst, Replicate):
        return from_comm_order(spec, np.concatenate(ctx.all_gather(local, dim)))

    if isinstance(src, Replicate) and isinstance(dst, RaggedShard):
        return _slice_local(ctx, spec, local, dim, dst)

    if isinstance(src, Partial) and isinstance(dst, RaggedShard):
        sizes = [c * g for c in dst.counts]
        return ctx.reduce_scatter(to_comm_order(spec, local), sizes, dim)

    raise UnsupportedConversion(f"{spec.name}: {src} -> {dst} is not supported")


def redistribute(ctx: RankContext, x: DistTensor, target: Sequence[Placement]) -> DistTensor:
    """Convert ``x`` to ``target`` placements, innermost mesh dim first.

    Supported per-dim conversions: RaggedShard -> Replicate, Replicate ->
    RaggedShard, RaggedShard(a) -> RaggedShard(b), Partial -> RaggedShard and
    Partial -> Replicate. Anything else raises UnsupportedConversion.
    """
    target = tuple(target)
    x.check(ctx)
    _validate(ctx.mesh, x.spec, target)
    current = list(x.placements)
    local = x.local
    for i in reversed(range(ctx.mesh.ndim)):
        src, dst = current[i], target[i]
        if src == dst:
            continue
        others = any(d != i for d in _sharded_dims(current))
        local = _convert(ctx, x.spec, i, src, dst, local, others)
        current[i] = dst
        logger.debug("%s: rank %d mesh dim %d %s -> %s", x.spec.name, ctx.rank, i, src, dst)
    return DistTensor(x.spec, target, local)


def full_tensor(ctx: RankContext, x: DistTensor) -> np.ndarray:
    """The global tensor on every rank (Partial dims are summed)."""
    return redistribute(ctx, x, (Replicate(),) * ctx.mesh.ndim).local


def reduce_partial_2d(ctx: RankContext, x: DistTensor, counts: Optional[Sequence[int]] = None) -> DistTensor:
    """(Partial, Partial) -> (Replicate, RaggedShard(counts)).

    The inner mesh dim is reduce-scattered first, then the outer dim is
    all-reduced on the shard, so element sums nest inner-in-outer in rank
    order. ``counts`` defaults to an even block split over the inner dim.
    """
    if ctx.mesh.ndim != 2:
        raise UnsupportedConversion(f"reduce_partial_2d needs a 2-D mesh, got {ctx.mesh!r}")
    if not all(isinstance(p, Partial) for p in x.placements):
        raise UnsupportedConversion(
            f"{x.spec.name}: expected (Partial, Partial), got {[str(p) for p in x.placements]}"
        )
    if counts is None:
        counts = even_counts(x.spec.num_blocks, ctx.mesh.shape[1])
    return redistribute(ctx, x, (Replicate(), RaggedShard(tuple(counts))))
