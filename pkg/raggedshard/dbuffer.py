"""Distributed buffer (DBuffer) over a planned layout.

Every rank owns one contiguous region of ``S`` elements. Tensors are views
into those regions at the offsets fixed by a LayoutPlan, so collectives can
read and write the regions directly and element-wise optimizer kernels can
run once per region instead of once per tensor.

On a 2-D mesh the plan's devices run along one mesh dim (the shard dim);
ranks that differ only in the other dim hold replicas of the same region.
"""

import logging
from dataclasses import dataclass
from typing import Optional, Union

import numpy as np

from raggedshard.core import (
    BlockPermutation,
    Partial,
    RaggedShard,
    TensorSpec,
    block_layout,
)
from raggedshard.errors import MeshMismatch, ShapeMismatch
from raggedshard.planner import LayoutPlan
from raggedshard.simmesh import (
    DistTensor,
    MeshDim,
    RankContext,
    SimMesh,
    reduce_partial_2d,
)

logger = logging.getLogger("raggedshard.dbuffer")


@dataclass(frozen=True)
class ViewSegment:
    device: int
    local_offset: int
    length: int


# ---------------------------------------------------------------------------
# Grouped operations
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Zero:
    pass


@dataclass(frozen=True)
class Scale:
    factor: float


@dataclass(frozen=True, eq=False)
class AddFrom:
    other: "DBufferMap"


GroupedOp = Union[Zero, Scale, AddFrom]


class DBufferMap:
    """Per-rank regions plus the persistent tensor -> segment mapping."""

    def __init__(
        self,
        plan: LayoutPlan,
        mesh_shape: tuple[int, ...],
        shard_dim: int,
        dtype=np.float64,
        layouts: Optional[dict[str, BlockPermutation]] = None,
    ):
        self.plan = plan
        self.mesh_shape = tuple(mesh_shape)
        self.shard_dim = shard_dim
        self.S = plan.S
        self.epoch = 0
        self.storage = [np.zeros(plan.S, dtype=dtype) for _ in range(int(np.prod(self.mesh_shape)))]
        self.views: dict[str, tuple[ViewSegment, ...]] = {
            t.name: tuple(ViewSegment(p.device, p.local_start, p.local_stop - p.local_start) for p in pieces)
            for t, pieces in zip(plan.tensors, plan.device_owners)
        }
        self.specs: dict[str, TensorSpec] = {t.name: t for t in plan.tensors}
        self.layouts: dict[str, BlockPermutation] = {}
        for t in plan.tensors:
            layout = (layouts or {}).get(t.name) or block_layout(t)
            if int(np.prod(layout.tensor_shape)) != t.numel:
                raise ShapeMismatch(
                    f"{t.name}: layout covers {list(layout.tensor_shape)}, tensor has {t.numel} elements"
                )
            self.layouts[t.name] = layout
        self._owned = [self._owned_indices(k) for k in range(plan.m)]

    def __repr__(self) -> str:
        return f"DBufferMap(m={self.plan.m}, S={self.S}, tensors={len(self.views)}, epoch={self.epoch})"

    @property
    def m(self) -> int:
        return self.plan.m

    @property
    def dtype(self):
        return self.storage[0].dtype if self.storage else np.dtype(np.float64)

    @property
    def replicas(self) -> int:
        return len(self.storage) // self.m

    def _owned_indices(self, device: int) -> np.ndarray:
        mask = np.zeros(self.S, dtype=bool)
        for segments in self.views.values():
            for seg in segments:
                if seg.device == device:
                    mask[seg.local_offset: seg.local_offset + seg.length] = True
        return np.flatnonzero(mask)

    def owned_mask(self, device: int) -> np.ndarray:
        mask = np.zeros(self.S, dtype=bool)
        mask[self._owned[device]] = True
        return mask

    def rank_of(self, device: int, replica: int = 0) -> int:
        """Mesh rank holding ``device``'s region in replica ``replica``."""
        others = [s for i, s in enumerate(self.mesh_shape) if i != self.shard_dim]
        coords = list(np.unravel_index(replica, others)) if others else []
        coords.insert(self.shard_dim, device)
        return int(np.ravel_multi_index(tuple(coords), self.mesh_shape))

    def device_of(self, rank: int) -> int:
        return int(np.unravel_index(rank, self.mesh_shape)[self.shard_dim])

    def region(self, rank: int) -> np.ndarray:
        return self.storage[rank]

    # ------------------------------------------------------------------
    # Tensor views
    # ------------------------------------------------------------------

    def view(self, name: str, replica: int = 0) -> list[np.ndarray]:
        """Writable views aliasing the regions, in device-then-offset order."""
        return [
            self.storage[self.rank_of(seg.device, replica)][seg.local_offset: seg.local_offset + seg.length]
            for seg in self.views[name]
        ]

    def local_view(self, name: str, rank: int) -> np.ndarray:
        """The part of ``name`` stored on ``rank`` (possibly empty), as a view."""
        device = self.device_of(rank)
        for seg in self.views[name]:
            if seg.device == device:
                return self.storage[rank][seg.local_offset: seg.local_offset + seg.length]
        return self.storage[rank][:0]

    def read(self, name: str, replica: int = 0) -> np.ndarray:
        """Flat communication-order copy of one tensor."""
        parts = self.view(name, replica)
        return np.concatenate(parts) if parts else np.zeros(0, dtype=self.dtype)

    def write(self, name: str, flat: np.ndarray) -> None:
        """Store a flat communication-order payload into every replica."""
        flat = np.asarray(flat).reshape(-1)
        if flat.size != self.specs[name].numel:
            raise ShapeMismatch(f"{name}: payload has {flat.size} elements, tensor has {self.specs[name].numel}")
        for replica in range(self.replicas):
            pos = 0
            for part in self.view(name, replica):
                part[:] = flat[pos: pos + part.size]
                pos += part.size

    def load(self, name: str, tensor: np.ndarray) -> None:
        """Write a row-major tensor through its communication layout."""
        self.write(name, self.layouts[name].to_comm(np.asarray(tensor)))

    def tensor(self, name: str, replica: int = 0) -> np.ndarray:
        return self.layouts[name].to_logical(self.read(name, replica))

    def placement(self, name: str) -> RaggedShard:
        """The RaggedShard block counts implied by the layout."""
        counts = [0] * self.m
        g = self.specs[name].block_size
        for seg in self.views[name]:
            counts[seg.device] += seg.length // g
        return RaggedShard(tuple(counts))

    def dist_tensor(self, ctx: RankContext, name: str) -> DistTensor:
        """This rank's share of ``name`` as a RaggedShard DistTensor (a copy)."""
        if ctx.mesh.ndim != 1:
            raise MeshMismatch("dist_tensor views need a 1-D mesh")
        local = np.array(self.local_view(name, ctx.rank), copy=True)
        return DistTensor(self.specs[name], (self.placement(name),), local)

    def step(self) -> int:
        self.epoch += 1
        return self.epoch


def build_dbuffer(
    plan: LayoutPlan,
    mesh: SimMesh,
    shard_dim: MeshDim = -1,
    dtype=np.float64,
    layouts: Optional[dict[str, BlockPermutation]] = None,
) -> DBufferMap:
    """Allocate one region per rank and map every tensor onto the regions."""
    dim = mesh.ndim - 1 if shard_dim == -1 else mesh.dim_index(shard_dim)
    if mesh.shape[dim] != plan.m:
        raise MeshMismatch(
            f"plan is for {plan.m} devices, mesh dim {mesh.names[dim]} has {mesh.shape[dim]}"
        )
    buf = DBufferMap(plan, mesh.shape, dim, dtype, layouts)
    logger.debug("%r on %r", buf, mesh)
    return buf


# ---------------------------------------------------------------------------
# Fused element-wise kernels
# ---------------------------------------------------------------------------


def _check_same_layout(buf: DBufferMap, other: DBufferMap) -> None:
    if (other.S, other.m, other.mesh_shape) != (buf.S, buf.m, buf.mesh_shape) or other.views != buf.views:
        raise ShapeMismatch(f"{other!r} does not share the layout of {buf!r}")


def grouped_apply(buf: DBufferMap, op: GroupedOp) -> None:
    """Apply ``op`` to every owned element in one pass per region; padding is untouched."""
    if isinstance(op, AddFrom):
        _check_same_layout(buf, op.other)
    for rank, region in enumerate(buf.storage):
        owned = buf._owned[buf.device_of(rank)]
        if isinstance(op, Zero):
            region[owned] = 0
        elif isinstance(op, Scale):
            region[owned] *= op.factor
        elif isinstance(op, AddFrom):
            region[owned] += op.other.storage[rank][owned]
        else:
            raise TypeError(f"unknown grouped op {op!r}")


def apply_sequential(buf: DBufferMap, op: GroupedOp) -> None:
    """Per-tensor reference for grouped_apply."""
    if isinstance(op, AddFrom):
        _check_same_layout(buf, op.other)
    for name in buf.views:
        for replica in range(buf.replicas):
            parts = buf.view(name, replica)
            others = op.other.view(name, replica) if isinstance(op, AddFrom) else [None] * len(parts)
            for part, other in zip(parts, others):
                if isinstance(op, Zero):
                    part[:] = 0
                elif isinstance(op, Scale):
                    part *= op.factor
                elif isinstance(op, AddFrom):
                    part += other
                else:
                    raise TypeError(f"unknown grouped op {op!r}")


# ---------------------------------------------------------------------------
# Collectives over regions
# ---------------------------------------------------------------------------


def stage_gather(buf: DBufferMap, ctx: RankContext) -> np.ndarray:
    """All-gather the regions along the shard dim into an m*S staging buffer.

    The collective input is the rank's region itself.
    """
    parts = ctx.all_gather(buf.region(ctx.rank), buf.shard_dim)
    return np.concatenate(parts)


def materialize(buf: DBufferMap, staging: np.ndarray, name: str) -> np.ndarray:
    """Row-major tensor ``name`` read from a gathered staging buffer."""
    start, stop = buf.plan.interval_of(name)
    return buf.layouts[name].to_logical(staging[start:stop])


def gather_tensors(buf: DBufferMap, ctx: RankContext) -> dict[str, np.ndarray]:
    staging = stage_gather(buf, ctx)
    return {name: materialize(buf, staging, name) for name in buf.views}


def reduce_scatter_grads(grads: DBufferMap, ctx: RankContext, partial: np.ndarray) -> None:
    """Reduce this rank's unreduced full-buffer gradient into its region.

    ``partial`` has m*S elements in buffer order. On a 2-D mesh the shard
    dim must be the inner dim: the inner dim is reduce-scattered first and
    the outer dim all-reduced on the shard.
    """
    partial = np.asarray(partial, dtype=grads.dtype).reshape(-1)
    if partial.size != grads.plan.capacity:
        raise ShapeMismatch(f"gradient has {partial.size} elements, buffer holds {grads.plan.capacity}")
    region = grads.region(ctx.rank)
    owned = grads._owned[grads.device_of(ctx.rank)]
    if ctx.mesh.ndim == 1:
        reduced = ctx.reduce_scatter(partial, [grads.S] * grads.m)
    elif ctx.mesh.ndim == 2 and grads.shard_dim == 1:
        spec = TensorSpec("dbuffer", (partial.size,), elem_bytes=grads.dtype.itemsize)
        x = DistTensor(spec, (Partial(), Partial()), partial)
        reduced = reduce_partial_2d(ctx, x, [grads.S] * grads.m).local
    else:
        raise MeshMismatch("gradient reduction needs a 1-D mesh or a 2-D mesh sharded on the inner dim")
    region[owned] = reduced[owned]
