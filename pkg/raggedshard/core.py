"""Tensor, granularity and placement types for RaggedShard.

A RaggedShard tensor is cut into equally sized sharding blocks (its
granularity, in elements) and each device holds an arbitrary, possibly
uneven, number of those blocks. This module defines:

- TensorSpec / GranularitySpec: one parameter and its non-splittable unit
- Placement variants: Replicate, Partial, Shard, RaggedShard, StridedRaggedShard
- BlockPermutation: the block-major <-> row-major bijection used when blocks
  are not contiguous in row-major order, or when an outer Shard(0) reorders them
- Composition rules with an outer even Shard placement

All types are immutable; every function here is pure.
"""

import logging
import math
from dataclasses import dataclass, replace
from enum import Enum
from typing import Sequence, Union

import numpy as np

from raggedshard.errors import NonDividingGranularity, ShapeMismatch

logger = logging.getLogger("raggedshard.core")


# ---------------------------------------------------------------------------
# Granularity
# ---------------------------------------------------------------------------


class GranularityKind(str, Enum):
    ELEMENT = "element"
    ROWS = "rows"
    BLOCK = "block"


@dataclass(frozen=True)
class GranularitySpec:
    """Declared sharding granularity of a tensor.

    ``n`` is the row count for ROWS; ``block_shape`` the tile for BLOCK.
    """

    kind: GranularityKind = GranularityKind.ELEMENT
    n: int = 1
    block_shape: tuple[int, ...] = ()

    @classmethod
    def element(cls) -> "GranularitySpec":
        return cls(GranularityKind.ELEMENT)

    @classmethod
    def rows(cls, n: int) -> "GranularitySpec":
        if n < 1:
            raise NonDividingGranularity(f"row granularity must be positive, got {n}")
        return cls(GranularityKind.ROWS, n=int(n))

    @classmethod
    def block(cls, block_shape: Sequence[int]) -> "GranularitySpec":
        shape = tuple(int(b) for b in block_shape)
        if not shape or any(b < 1 for b in shape):
            raise NonDividingGranularity(f"block shape must be non-empty and positive, got {shape}")
        return cls(GranularityKind.BLOCK, block_shape=shape)

    def to_dict(self) -> dict:
        if self.kind is GranularityKind.ROWS:
            return {"kind": "rows", "value": self.n}
        if self.kind is GranularityKind.BLOCK:
            return {"kind": "block", "value": list(self.block_shape)}
        return {"kind": "element"}

    @classmethod
    def from_dict(cls, data: dict) -> "GranularitySpec":
        kind = str(data.get("kind", "element")).lower()
        if kind == "element":
            return cls.element()
        if kind == "rows":
            return cls.rows(int(data["value"]))
        if kind == "block":
            return cls.block(data["value"])
        raise ValueError(f"Unknown granularity kind: {kind}")

    def __str__(self) -> str:
        if self.kind is GranularityKind.ROWS:
            return f"rows({self.n})"
        if self.kind is GranularityKind.BLOCK:
            return "block(" + "x".join(str(b) for b in self.block_shape) + ")"
        return "element"


# ---------------------------------------------------------------------------
# Tensors
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TensorSpec:
    """One parameter tensor: shape, element width and sharding granularity."""

    name: str
    shape: tuple[int, ...]
    elem_bytes: int = 2
    granularity: GranularitySpec = GranularitySpec()
    order_index: int = 0

    def __post_init__(self):
        shape = tuple(int(d) for d in self.shape)
        if not shape or any(d < 1 for d in shape):
            raise ShapeMismatch(f"{self.name}: shape must be non-empty and positive, got {shape}")
        if self.elem_bytes < 1:
            raise ValueError(f"{self.name}: elem_bytes must be positive, got {self.elem_bytes}")
        if self.order_index < 0:
            raise ValueError(f"{self.name}: order_index must be non-negative")
        object.__setattr__(self, "shape", shape)

    @property
    def rank(self) -> int:
        return len(self.shape)

    @property
    def numel(self) -> int:
        """e_t: total size in elements."""
        return math.prod(self.shape)

    @property
    def block_size(self) -> int:
        """g_t: resolved granularity in elements."""
        return resolve_granularity(self)

    @property
    def num_blocks(self) -> int:
        """u_t = e_t / g_t."""
        return self.numel // self.block_size

    def stride(self, dim: int) -> int:
        """Row-major stride of ``dim`` in elements."""
        return math.prod(self.shape[dim + 1:])


def resolve_granularity(t: TensorSpec) -> int:
    """Return g_t in elements for ``t``; raises NonDividingGranularity if it does not divide."""
    gran = t.granularity
    if gran.kind is GranularityKind.ELEMENT:
        return 1
    if gran.kind is GranularityKind.ROWS:
        if t.shape[0] % gran.n:
            raise NonDividingGranularity(
                f"{t.name}: rows({gran.n}) does not divide dim 0 of shape {list(t.shape)}"
            )
        return gran.n * t.stride(0)
    bshape = gran.block_shape
    if len(bshape) != t.rank:
        raise NonDividingGranularity(
            f"{t.name}: block {list(bshape)} has rank {len(bshape)}, tensor has rank {t.rank}"
        )
    for d, (b, s) in enumerate(zip(bshape, t.shape)):
        if s % b:
            raise NonDividingGranularity(
                f"{t.name}: block dim {d} ({b}) does not divide {s} in shape {list(t.shape)}"
            )
    return math.prod(bshape)


def tile_shape(t: TensorSpec) -> tuple[int, ...]:
    """The tensor-shaped tile covered by one sharding block."""
    gran = t.granularity
    if gran.kind is GranularityKind.ROWS:
        return (gran.n,) + t.shape[1:]
    if gran.kind is GranularityKind.BLOCK:
        return gran.block_shape
    return (1,) * t.rank


# ---------------------------------------------------------------------------
# Placements
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Replicate:
    def __str__(self) -> str:
        return "Replicate()"


@dataclass(frozen=True)
class Partial:
    def __str__(self) -> str:
        return "Partial()"


@dataclass(frozen=True)
class Shard:
    dim: int

    def __str__(self) -> str:
        return f"Shard({self.dim})"


@dataclass(frozen=True)
class RaggedShard:
    """Per-rank block counts along one mesh dimension."""

    counts: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "counts", tuple(int(c) for c in self.counts))
        if any(c < 0 for c in self.counts):
            raise ShapeMismatch(f"block counts must be non-negative, got {list(self.counts)}")

    def __str__(self) -> str:
        return f"RaggedShard({list(self.counts)})"


@dataclass(frozen=True)
class StridedRaggedShard:
    """RaggedShard under an outer Shard(0); ``reshuffle`` restores row-major order."""

    counts: tuple[int, ...]
    reshuffle: "BlockPermutation"

    def __post_init__(self):
        object.__setattr__(self, "counts", tuple(int(c) for c in self.counts))
        if any(c < 0 for c in self.counts):
            raise ShapeMismatch(f"block counts must be non-negative, got {list(self.counts)}")

    def __str__(self) -> str:
        return f"StridedRaggedShard({list(self.counts)})"


Placement = Union[Replicate, Partial, Shard, RaggedShard, StridedRaggedShard]


def check_placement(t: TensorSpec, placement: Placement) -> None:
    """Raise ShapeMismatch if ``placement`` is inconsistent with ``t``."""
    if isinstance(placement, Shard):
        if not 0 <= placement.dim < t.rank:
            raise ShapeMismatch(f"{t.name}: Shard({placement.dim}) out of range for rank {t.rank}")
    elif isinstance(placement, RaggedShard):
        if sum(placement.counts) != t.num_blocks:
            raise ShapeMismatch(
                f"{t.name}: counts sum to {sum(placement.counts)}, tensor has {t.num_blocks} blocks"
            )
    elif isinstance(placement, StridedRaggedShard):
        if placement.reshuffle.num_blocks != t.num_blocks:
            raise ShapeMismatch(f"{t.name}: reshuffle covers {placement.reshuffle.num_blocks} blocks")


def even_counts(num_blocks: int, m: int) -> tuple[int, ...]:
    """Split ``num_blocks`` over ``m`` ranks as evenly as possible, extras first."""
    base, extra = divmod(num_blocks, m)
    return tuple(base + (1 if k < extra else 0) for k in range(m))


def root_counts(num_blocks: int, m: int, root: int) -> tuple[int, ...]:
    """All blocks on ``root``, none elsewhere."""
    return tuple(num_blocks if k == root else 0 for k in range(m))


# ---------------------------------------------------------------------------
# Block permutations
# ---------------------------------------------------------------------------


def _tiles_contiguous(block_shape: Sequence[int], tensor_shape: Sequence[int]) -> bool:
    dims = list(zip(block_shape, tensor_shape))
    k = next((d for d, (b, _) in enumerate(dims) if b != 1), len(dims))
    return all(b == s for b, s in dims[k + 1:])


@dataclass(frozen=True, eq=False)
class BlockPermutation:
    """Bijection from communication (block-major) order to row-major tile order.

    ``perm[c]`` is the row-major grid index of the tile stored at
    communication position ``c``. Within a tile, elements are stored in
    row-major order of the tile itself.
    """

    perm: tuple[int, ...]
    block_shape: tuple[int, ...]
    tensor_shape: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "perm", tuple(int(p) for p in self.perm))
        object.__setattr__(self, "block_shape", tuple(int(b) for b in self.block_shape))
        object.__setattr__(self, "tensor_shape", tuple(int(s) for s in self.tensor_shape))
        if len(self.block_shape) != len(self.tensor_shape):
            raise ShapeMismatch("block shape and tensor shape differ in rank")
        if any(s % b for b, s in zip(self.block_shape, self.tensor_shape)):
            raise NonDividingGranularity(
                f"block {list(self.block_shape)} does not tile {list(self.tensor_shape)}"
            )
        if sorted(self.perm) != list(range(self.num_blocks)):
            raise ShapeMismatch(f"perm is not a bijection on {self.num_blocks} blocks")

    @classmethod
    def identity(cls, block_shape: Sequence[int], tensor_shape: Sequence[int]) -> "BlockPermutation":
        count = math.prod(s // b for b, s in zip(block_shape, tensor_shape))
        return cls(tuple(range(count)), tuple(block_shape), tuple(tensor_shape))

    @property
    def grid_shape(self) -> tuple[int, ...]:
        return tuple(s // b for b, s in zip(self.block_shape, self.tensor_shape))

    @property
    def num_blocks(self) -> int:
        return math.prod(self.grid_shape)

    @property
    def block_numel(self) -> int:
        return math.prod(self.block_shape)

    @property
    def is_identity(self) -> bool:
        """True when communication order already equals row-major element order."""
        return self.perm == tuple(range(self.num_blocks)) and _tiles_contiguous(
            self.block_shape, self.tensor_shape
        )

    def inverse(self) -> np.ndarray:
        """Row-major tile index -> communication position."""
        inv = np.empty(self.num_blocks, dtype=np.int64)
        inv[np.asarray(self.perm, dtype=np.int64)] = np.arange(self.num_blocks, dtype=np.int64)
        return inv

    def element_order(self) -> np.ndarray:
        """Row-major flat element index for each communication-order element."""
        numel = math.prod(self.tensor_shape)
        if self.is_identity:
            return np.arange(numel, dtype=np.int64)
        interleaved: list[int] = []
        for g, b in zip(self.grid_shape, self.block_shape):
            interleaved += [g, b]
        ndim = len(self.tensor_shape)
        axes = list(range(0, 2 * ndim, 2)) + list(range(1, 2 * ndim, 2))
        tiles = (
            np.arange(numel, dtype=np.int64)
            .reshape(interleaved)
            .transpose(axes)
            .reshape(self.num_blocks, self.block_numel)
        )
        return tiles[np.asarray(self.perm, dtype=np.int64)].reshape(-1)

    def to_logical(self, comm: np.ndarray) -> np.ndarray:
        """Materialize the row-major tensor from a communication-order flat buffer."""
        flat = np.asarray(comm).reshape(-1)
        if self.is_identity:
            return flat.reshape(self.tensor_shape)
        out = np.empty_like(flat)
        out[self.element_order()] = flat
        return out.reshape(self.tensor_shape)

    def to_comm(self, tensor: np.ndarray) -> np.ndarray:
        """Flatten a row-major tensor into communication order."""
        flat = np.asarray(tensor).reshape(-1)
        if self.is_identity:
            return flat.copy()
        return flat[self.element_order()]

    def to_dict(self) -> dict:
        return {
            "perm": list(self.perm),
            "block_shape": list(self.block_shape),
            "tensor_shape": list(self.tensor_shape),
        }


def block_layout(t: TensorSpec) -> BlockPermutation:
    """Communication layout of ``t`` on its own: blocks stored in block-major order.

    For element and row granularity the blocks are contiguous and the
    layout is the identity.
    """
    return BlockPermutation.identity(tile_shape(t), t.shape)


# ---------------------------------------------------------------------------
# Composition with an outer even Shard
# ---------------------------------------------------------------------------


def local_spec(t: TensorSpec, outer: Shard, outer_size: int) -> TensorSpec:
    """The per-rank tensor left after an even ``outer`` Shard over ``outer_size`` ranks."""
    if not 0 <= outer.dim < t.rank:
        raise ShapeMismatch(f"{t.name}: Shard({outer.dim}) out of range for rank {t.rank}")
    if t.shape[outer.dim] % outer_size:
        raise ShapeMismatch(
            f"{t.name}: dim {outer.dim} ({t.shape[outer.dim]}) not divisible by {outer_size} ranks"
        )
    shape = list(t.shape)
    shape[outer.dim] //= outer_size
    return replace(t, shape=tuple(shape))


def compose_with_shard(t: TensorSpec, outer: Shard, g_user: int) -> int:
    """Effective granularity for RaggedShard under ``Shard(dim > 0)``.

    ``t`` is the post-Shard local tensor. The result is LCM(stride(dim), g_user)
    so that no block boundary falls inside an index of ``dim``.
    """
    if outer.dim == 0:
        raise ValueError("Shard(0) composes through make_strided, not an adjusted granularity")
    if not 0 < outer.dim < t.rank:
        raise ShapeMismatch(f"{t.name}: Shard({outer.dim}) out of range for rank {t.rank}")
    if g_user < 1:
        raise NonDividingGranularity(f"{t.name}: granularity must be positive, got {g_user}")
    g_eff = math.lcm(t.stride(outer.dim), g_user)
    if t.numel % g_eff:
        raise NonDividingGranularity(
            f"{t.name}: effective granularity {g_eff} does not divide {t.numel} elements"
        )
    return g_eff


def make_strided(
    t: TensorSpec,
    outer: Shard,
    counts: Sequence[int],
    outer_size: int,
) -> StridedRaggedShard:
    """Build the StridedRaggedShard for RaggedShard nested under an outer Shard(0).

    ``t`` is the global tensor, split evenly along dim 0 over ``outer_size``
    ranks; ``counts`` is the ragged split of each local tensor's blocks.
    Communication order visits local block ``j`` of every outer rank before
    block ``j + 1`` (position ``j * outer_size + o``); the returned
    permutation maps that order back to the global row-major tiling.
    """
    if outer.dim != 0:
        raise ValueError(f"make_strided handles Shard(0) only, got {outer}")
    local = local_spec(t, outer, outer_size)
    tile = tile_shape(local)
    resolve_granularity(local)
    local_grid = tuple(s // b for b, s in zip(tile, local.shape))
    u_local = math.prod(local_grid)
    if sum(counts) != u_local:
        raise ShapeMismatch(
            f"{t.name}: counts sum to {sum(counts)}, local tensor has {u_local} blocks"
        )

    global_grid = (local_grid[0] * outer_size,) + local_grid[1:]
    perm = [0] * (u_local * outer_size)
    for j in range(u_local):
        coords = np.unravel_index(j, local_grid)
        for o in range(outer_size):
            shifted = (int(coords[0]) + o * local_grid[0],) + tuple(int(c) for c in coords[1:])
            perm[j * outer_size + o] = int(np.ravel_multi_index(shifted, global_grid))

    reshuffle = BlockPermutation(tuple(perm), tile, t.shape)
    logger.debug("%s: strided layout over %d outer ranks, %d blocks", t.name, outer_size, len(perm))
    return StridedRaggedShard(tuple(counts), reshuffle)


def ragged_offsets(counts: Sequence[int], block_size: int) -> list[tuple[int, int]]:
    """Element range [start, stop) held by each rank under RaggedShard(counts)."""
    spans: list[tuple[int, int]] = []
    start = 0
    for c in counts:
        stop = start + c * block_size
        spans.append((start, stop))
        start = stop
    return spans
