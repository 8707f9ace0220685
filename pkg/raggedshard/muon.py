"""Distributed Muon over RaggedShard parameters.

Each 2-D parameter's momentum is moved whole onto one root rank (chosen by
least cumulative load), orthogonalized there with Newton-Schulz, and moved
back to the parameter's placement. Other ranks hold zero blocks of the
tensor in between, so their Newton-Schulz call is a no-op.
"""

import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from raggedshard.core import RaggedShard, root_counts
from raggedshard.errors import NotMatrix, PlacementMismatch, ZeroMatrix
from raggedshard.simmesh import (
    DistTensor,
    RankContext,
    from_comm_order,
    redistribute,
    to_comm_order,
)

logger = logging.getLogger("raggedshard.muon")


@dataclass(frozen=True)
class MuonConfig:
    lr: float = 0.02
    beta: float = 0.95
    nesterov: bool = False
    ns_steps: int = 10


@dataclass
class MuonState:
    """Per-rank optimizer state. ``ledger`` is identical on every rank."""

    config: MuonConfig
    ledger: list[int]
    momentum: dict[str, DistTensor] = field(default_factory=dict)

    @classmethod
    def fresh(cls, ranks: int, config: Optional[MuonConfig] = None) -> "MuonState":
        return cls(config or MuonConfig(), [0] * ranks)


def momentum_update(name: str, g: DistTensor, state: MuonState) -> DistTensor:
    """Heavy-ball momentum m <- beta*m + g; returns the update direction u.

    u = m, or g + beta*m with Nesterov enabled.
    """
    beta = state.config.beta
    buf = state.momentum.get(name)
    if buf is None:
        buf = DistTensor(g.spec, g.placements, np.zeros_like(g.local))
    elif buf.placements != g.placements:
        raise PlacementMismatch(
            f"{name}: momentum placed {[str(p) for p in buf.placements]}, "
            f"gradient {[str(p) for p in g.placements]}"
        )
    new = DistTensor(g.spec, g.placements, beta * buf.local + g.local)
    state.momentum[name] = new
    if state.config.nesterov:
        return DistTensor(g.spec, g.placements, g.local + beta * new.local)
    return DistTensor(g.spec, g.placements, new.local.copy())


def select_root(ledger: list[int], param_size: int) -> int:
    """Least-loaded rank (ties go to the lowest); charges it ``param_size``."""
    root = min(range(len(ledger)), key=lambda r: (ledger[r], r))
    ledger[root] += param_size
    return root


def newton_schulz(M: np.ndarray, steps: int = 10) -> np.ndarray:
    """Approximate the orthogonal polar factor U V^T of ``M``.

    Cubic iteration X <- 1.5 X - 0.5 X X^T X on M / ||M||_F. Wide
    orientation is used internally so X X^T is the smaller Gram matrix.
    """
    M = np.asarray(M)
    if M.ndim != 2:
        raise NotMatrix(f"Newton-Schulz needs a 2-D matrix, got shape {M.shape}")
    norm = np.linalg.norm(M)
    if norm == 0:
        raise ZeroMatrix("cannot orthogonalize an all-zero matrix")
    tall = M.shape[0] > M.shape[1]
    X = (M.T if tall else M) / norm
    for _ in range(steps):
        X = 1.5 * X - 0.5 * (X @ X.T) @ X
    return X.T if tall else X


def muon_step(ctx: RankContext, name: str, w: DistTensor, g: DistTensor, state: MuonState) -> DistTensor:
    """One distributed Muon update of a RaggedShard 2-D parameter."""
    if len(w.global_shape) != 2:
        raise NotMatrix(f"{name}: Muon handles 2-D parameters, got shape {w.global_shape}")
    if w.placements != g.placements:
        raise PlacementMismatch(f"{name}: weight and gradient placements differ")
    if ctx.mesh.ndim != 1 or not isinstance(w.placements[0], RaggedShard):
        raise PlacementMismatch(f"{name}: expected a single RaggedShard placement on a 1-D mesh")

    u = momentum_update(name, g, state)
    placement = u.placements
    root = select_root(state.ledger, w.spec.numel)
    target = RaggedShard(root_counts(w.spec.num_blocks, ctx.mesh.size, root))
    o = redistribute(ctx, u, (target,))
    if ctx.coord() == root:
        full = from_comm_order(w.spec, o.local)
        o = DistTensor(o.spec, o.placements, to_comm_order(w.spec, newton_schulz(full, state.config.ns_steps)))
    o = redistribute(ctx, o, placement)
    logger.debug("%s: rank %d root %d", name, ctx.rank, root)
    return DistTensor(w.spec, w.placements, w.local - state.config.lr * o.local)


def sgd_momentum_step(name: str, w: DistTensor, g: DistTensor, state: MuonState) -> DistTensor:
    """Plain momentum SGD for parameters Muon does not handle (non-2-D)."""
    u = momentum_update(name, g, state)
    return DistTensor(w.spec, w.placements, w.local - state.config.lr * u.local)


# ---------------------------------------------------------------------------
# Single-rank reference
# ---------------------------------------------------------------------------


@dataclass
class LocalMuon:
    """Muon on full tensors in one process; the reference for muon_step."""

    config: MuonConfig
    ranks: int
    momentum: dict[str, np.ndarray] = field(default_factory=dict)
    ledger: list[int] = field(default_factory=list)

    def __post_init__(self):
        if not self.ledger:
            self.ledger = [0] * self.ranks

    def _update(self, name: str, g: np.ndarray) -> np.ndarray:
        beta = self.config.beta
        buf = self.momentum.get(name)
        buf = g.copy() if buf is None else beta * buf + g
        self.momentum[name] = buf
        return g + beta * buf if self.config.nesterov else buf.copy()

    def step(self, name: str, w: np.ndarray, g: np.ndarray) -> np.ndarray:
        u = self._update(name, g)
        if w.ndim != 2:
            return w - self.config.lr * u
        select_root(self.ledger, w.size)
        return w - self.config.lr * newton_schulz(u, self.config.ns_steps)
