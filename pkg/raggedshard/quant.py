"""Block-wise 8-bit absmax quantization and shard containment.

Tensors are quantized on their matrix view ``[prod(shape[:-1]), shape[-1]]``
in fixed tiles (32x32 by default), one scale per tile. A shard can be
quantized on its own, with no metadata from other ranks, exactly when no
tile crosses a device boundary of the layout.
"""

import logging
import math
from dataclasses import dataclass
from typing import Mapping, Optional, Union

import numpy as np

from raggedshard.core import BlockPermutation, block_layout
from raggedshard.errors import MisalignedShard, ShapeMismatch
from raggedshard.planner import LayoutPlan

logger = logging.getLogger("raggedshard.quant")

QMAX = 127


@dataclass(frozen=True)
class QuantBlockSpec:
    rows: int = 32
    cols: int = 32

    def __post_init__(self):
        if self.rows < 1 or self.cols < 1:
            raise ValueError(f"quantization block must be positive, got {self.rows}x{self.cols}")


@dataclass
class QuantizedTiles:
    """int8 codes for a whole matrix view plus one scale per tile."""

    codes: np.ndarray  # int8, [rows, cols]
    scales: np.ndarray  # float, [tile_rows, tile_cols]
    block: QuantBlockSpec


def matrix_view(shape: tuple[int, ...]) -> tuple[int, int]:
    if len(shape) == 1:
        return 1, shape[0]
    return math.prod(shape[:-1]), shape[-1]


def _tiled(x: np.ndarray, block: QuantBlockSpec) -> tuple[np.ndarray, int, int]:
    rows, cols = x.shape
    tr, tc = -(-rows // block.rows), -(-cols // block.cols)
    padded = np.zeros((tr * block.rows, tc * block.cols), dtype=x.dtype)
    padded[:rows, :cols] = x
    return padded.reshape(tr, block.rows, tc, block.cols), tr, tc


def blockwise_quantize(x: np.ndarray, block: QuantBlockSpec = QuantBlockSpec()) -> QuantizedTiles:
    """Absmax per tile: scale = max|x| / 127, codes = round(x / scale) in [-127, 127].

    All-zero tiles get scale 0 and zero codes.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise ShapeMismatch(f"quantization works on 2-D views, got shape {x.shape}")
    rows, cols = x.shape
    tiles, _, _ = _tiled(x, block)
    scales = np.abs(tiles).max(axis=(1, 3)) / QMAX
    safe = np.where(scales == 0, 1.0, scales)[:, None, :, None]
    codes = np.clip(np.rint(tiles / safe), -QMAX, QMAX)
    codes = np.where(scales[:, None, :, None] == 0, 0, codes).astype(np.int8)
    codes = codes.reshape(tiles.shape[0] * block.rows, tiles.shape[2] * block.cols)[:rows, :cols]
    return QuantizedTiles(codes, scales, block)


def blockwise_dequantize(q: QuantizedTiles) -> np.ndarray:
    rows, cols = q.codes.shape
    tiles, _, _ = _tiled(q.codes.astype(np.float64), q.block)
    out = tiles * q.scales[:, None, :, None]
    return out.reshape(tiles.shape[0] * q.block.rows, tiles.shape[2] * q.block.cols)[:rows, :cols]


@dataclass
class QuantizedShard:
    """int8 codes for one shard in its own storage order, one scale per tile it holds."""

    codes: np.ndarray  # int8, flat, shard order
    tile_index: np.ndarray  # per element, index into ``tiles`` / ``scales``
    tiles: tuple[tuple[int, int], ...]
    scales: np.ndarray  # float, one per tile
    block: QuantBlockSpec

    def dequantize(self) -> np.ndarray:
        """Flat reals in the shard's own order."""
        return self.codes.astype(np.float64) * self.scales[self.tile_index]


def quantize_shard(
    flat: np.ndarray,
    shape: tuple[int, ...],
    start: int,
    block: QuantBlockSpec = QuantBlockSpec(),
    layout: Optional[BlockPermutation] = None,
) -> QuantizedShard:
    """Quantize elements ``[start, start + len(flat))`` of a tensor's storage order on their own.

    ``layout`` maps storage order to row-major order (row-major when
    omitted). Every tile the shard touches must lie wholly inside it;
    otherwise the tile would need values held by another rank. Codes and
    scales equal those of ``blockwise_quantize`` on the full tensor.
    """
    rows, cols = matrix_view(tuple(shape))
    flat = np.asarray(flat, dtype=np.float64).reshape(-1)
    stop = start + flat.size
    if start < 0 or stop > rows * cols:
        raise ShapeMismatch(f"shard [{start}, {stop}) outside a {rows}x{cols} view")
    if layout is None or layout.is_identity:
        order = np.arange(start, stop, dtype=np.int64)
    else:
        order = layout.element_order()[start:stop]

    r, c = np.divmod(order, cols)
    tile_cols = -(-cols // block.cols)
    ids = (r // block.rows) * tile_cols + c // block.cols
    tile_ids, inverse, counts = np.unique(ids, return_inverse=True, return_counts=True)
    inverse = inverse.reshape(-1)
    tr, tc = np.divmod(tile_ids, tile_cols)
    full = np.minimum(block.rows, rows - tr * block.rows) * np.minimum(block.cols, cols - tc * block.cols)
    partial = np.flatnonzero(counts != full)
    if partial.size:
        i = partial[0]
        raise MisalignedShard(
            f"shard [{start}, {stop}) of a {rows}x{cols} view holds {counts[i]} of {full[i]} "
            f"elements of tile ({tr[i]}, {tc[i]})"
        )

    absmax = np.zeros(tile_ids.size)
    np.maximum.at(absmax, inverse, np.abs(flat))
    scales = absmax / QMAX
    safe = np.where(scales == 0, 1.0, scales)[inverse]
    codes = np.clip(np.rint(flat / safe), -QMAX, QMAX)
    codes = np.where(scales[inverse] == 0, 0, codes).astype(np.int8)
    tiles = tuple((int(a), int(b)) for a, b in zip(tr, tc))
    return QuantizedShard(codes, inverse, tiles, scales, block)


# ---------------------------------------------------------------------------
# Containment
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Crossing:
    """A quantization tile split by device boundary ``k * S``."""

    tensor: str
    boundary: int
    tile: tuple[int, int]

    def to_dict(self) -> dict:
        return {"tensor": self.tensor, "boundary": self.boundary, "tile": list(self.tile)}


def _crossings_rowmajor(rows: int, cols: int, block: QuantBlockSpec, o: int) -> list[tuple[int, int]]:
    """Tiles with elements on both sides of local offset ``o`` in row-major order."""
    i = ((o - 1) // cols) // block.rows
    last_row = min((i + 1) * block.rows, rows) - 1
    hits = []
    for j in range(-(-cols // block.cols)):
        first = i * block.rows * cols + j * block.cols
        last = last_row * cols + min((j + 1) * block.cols, cols) - 1
        if first < o <= last:
            hits.append((i, j))
    return hits


def _crossings_permuted(order: np.ndarray, rows: int, cols: int, block: QuantBlockSpec, o: int) -> list[tuple[int, int]]:
    tile_cols = -(-cols // block.cols)
    tile_of = (order // cols // block.rows) * tile_cols + (order % cols) // block.cols
    shared = np.intersect1d(tile_of[:o], tile_of[o:])
    return [(int(t) // tile_cols, int(t) % tile_cols) for t in shared]


def containment_check(
    plan: LayoutPlan, blocks: Union[QuantBlockSpec, Mapping[str, QuantBlockSpec]]
) -> tuple[bool, list[Crossing]]:
    """True when every quantization tile lies inside one device's interval.

    ``blocks`` is one spec for every tensor, or a per-tensor mapping
    (tensors missing from it are not quantized and not checked).
    """
    crossings: list[Crossing] = []
    S = plan.S
    for t, (start, stop) in zip(plan.tensors, plan.intervals):
        block = blocks if isinstance(blocks, QuantBlockSpec) else blocks.get(t.name)
        if block is None or not S:
            continue
        rows, cols = matrix_view(t.shape)
        layout = block_layout(t)
        for k in range(start // S + 1, (stop - 1) // S + 1):
            o = k * S - start
            if layout.is_identity:
                tiles = _crossings_rowmajor(rows, cols, block, o)
            else:
                tiles = _crossings_permuted(layout.element_order(), rows, cols, block, o)
            crossings.extend(Crossing(t.name, k, tile) for tile in tiles)
    if crossings:
        logger.info("%d quantization tiles cross device boundaries", len(crossings))
    return not crossings, crossings
