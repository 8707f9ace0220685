import numpy as np
import pytest

from raggedshard.core import GranularitySpec, RaggedShard, Replicate, TensorSpec, even_counts, root_counts
from raggedshard.dbuffer import build_dbuffer
from raggedshard.errors import NotMatrix, PlacementMismatch, ZeroMatrix
from raggedshard.muon import (
    LocalMuon,
    MuonConfig,
    MuonState,
    momentum_update,
    muon_step,
    newton_schulz,
    select_root,
    sgd_momentum_step,
)
from raggedshard.planner import PlanProblem, plan_layout
from raggedshard.simmesh import DistTensor, SimMesh, distribute, redistribute


def vector(values, placements=(Replicate(),)):
    values = np.asarray(values, dtype=np.float64)
    return DistTensor(TensorSpec("v", values.shape), placements, values)


# ------------------------------------------------------------------
# Momentum
# ------------------------------------------------------------------


def test_heavy_ball_momentum():
    state = MuonState.fresh(1, MuonConfig(beta=0.9))
    first = momentum_update("v", vector([1.0, 2.0]), state)
    assert first.local.tolist() == [1.0, 2.0]
    second = momentum_update("v", vector([1.0, 2.0]), state)
    assert second.local.tolist() == pytest.approx([1.9, 3.8])


def test_nesterov_momentum():
    state = MuonState.fresh(1, MuonConfig(beta=0.5, nesterov=True))
    u = momentum_update("v", vector([2.0]), state)
    assert u.local.tolist() == [3.0]
    assert state.momentum["v"].local.tolist() == [2.0]


def test_momentum_placement_must_not_change():
    state = MuonState.fresh(1)
    momentum_update("v", vector([1.0]), state)
    with pytest.raises(PlacementMismatch):
        momentum_update("v", vector([1.0], (RaggedShard((1,)),)), state)


# ------------------------------------------------------------------
# Root selection
# ------------------------------------------------------------------


def test_select_root_picks_least_loaded():
    ledger = [0, 0, 0]
    assert [select_root(ledger, size) for size in (5, 3, 4, 1, 2)] == [0, 1, 2, 1, 1]
    assert ledger == [5, 6, 4]


def test_equal_parameters_spread_evenly():
    ledger = [0] * 4
    roots = [select_root(ledger, 64) for _ in range(12)]
    assert [roots.count(r) for r in range(4)] == [3, 3, 3, 3]
    assert ledger == [192] * 4


def test_ledger_spread_stays_below_largest_parameter():
    rng = np.random.default_rng(40)
    for _ in range(200):
        ledger = [0] * int(rng.integers(1, 9))
        largest = 0
        for size in rng.integers(1, 1000, size=int(rng.integers(1, 40))):
            size = int(size)
            lightest = min(ledger)
            root = select_root(ledger, size)
            largest = max(largest, size)
            assert ledger[root] == lightest + size
            assert max(ledger) - min(ledger) <= largest


def test_root_gather_puts_whole_matrix_on_root():
    rng = np.random.default_rng(41)
    for _ in range(50):
        m = int(rng.integers(1, 5))
        rows, cols = int(rng.integers(1, 9)), int(rng.integers(1, 9))
        spec = TensorSpec("w", (rows, cols), granularity=GranularitySpec.rows(1))
        full = rng.standard_normal(spec.shape)
        root = int(rng.integers(0, m))

        def fn(ctx):
            x = distribute(ctx, full, spec, (RaggedShard(even_counts(rows, m)),))
            return redistribute(ctx, x, (RaggedShard(root_counts(rows, m, root)),)).local

        mesh = SimMesh.line(m, timeout_s=5.0)
        for rank, local in enumerate(mesh.run(fn)):
            if rank == root:
                np.testing.assert_array_equal(local, full.reshape(-1))
            else:
                assert local.size == 0


# ------------------------------------------------------------------
# Newton-Schulz
# ------------------------------------------------------------------


def test_newton_schulz_fixes_identity():
    np.testing.assert_allclose(newton_schulz(np.eye(4)), np.eye(4), atol=1e-6)


def test_newton_schulz_flattens_diagonal():
    np.testing.assert_allclose(newton_schulz(np.diag([3.0, 1.0])), np.eye(2), atol=1e-6)


def test_newton_schulz_approximates_polar_factor():
    rng = np.random.default_rng(40)
    for _ in range(100):
        rows, cols = (int(v) for v in rng.integers(2, 9, size=2))
        k = min(rows, cols)
        U, _ = np.linalg.qr(rng.standard_normal((rows, k)))
        V, _ = np.linalg.qr(rng.standard_normal((cols, k)))
        s = rng.uniform(0.5, 1.0, size=k)
        M = (U * s) @ V.T
        O = newton_schulz(M, steps=10)
        assert O.shape == (rows, cols)
        np.testing.assert_allclose(O, U @ V.T, atol=1e-6)


def test_newton_schulz_rejects_zero_and_vectors():
    with pytest.raises(ZeroMatrix):
        newton_schulz(np.zeros((3, 2)))
    with pytest.raises(NotMatrix):
        newton_schulz(np.ones(3))


# ------------------------------------------------------------------
# Distributed steps
# ------------------------------------------------------------------


def build(shapes, m, seed):
    tensors = []
    for i, (name, shape, rows) in enumerate(shapes):
        granularity = GranularitySpec.rows(rows) if rows else GranularitySpec.element()
        tensors.append(TensorSpec(name, shape, elem_bytes=4, granularity=granularity, order_index=i))
    plan = plan_layout(PlanProblem(tuple(tensors), m, g_coll=4))
    mesh = SimMesh.line(m, timeout_s=10.0)
    buf = build_dbuffer(plan, mesh)
    rng = np.random.default_rng(seed)
    weights = {t.name: rng.standard_normal(t.shape) for t in tensors}
    for name, value in weights.items():
        buf.load(name, value)
    return tensors, mesh, buf, weights, rng


def distributed_step(mesh, buf, tensors, grads, states):
    def fn(ctx):
        state = states[ctx.rank]
        for t in tensors:
            w = buf.dist_tensor(ctx, t.name)
            g = distribute(ctx, grads[t.name], t, w.placements)
            if t.rank == 2:
                new = muon_step(ctx, t.name, w, g, state)
            else:
                new = sgd_momentum_step(t.name, w, g, state)
            buf.local_view(t.name, ctx.rank)[:] = new.local

    mesh.run(fn)


SHAPES = [
    ("embed", (64, 48), 1),
    ("proj", (64, 64), 8),
    ("bias", (64,), 0),
    ("head", (17, 64), 1),
    ("tall", (40, 8), 4),
]


@pytest.mark.parametrize("nesterov", [False, True])
def test_distributed_matches_local_reference(nesterov):
    config = MuonConfig(lr=0.02, beta=0.95, nesterov=nesterov)
    tensors, mesh, buf, weights, rng = build(SHAPES, 4, seed=41)
    states = [MuonState.fresh(4, config) for _ in range(4)]
    reference = LocalMuon(config, 4)
    for _ in range(50):
        grads = {t.name: rng.standard_normal(t.shape) for t in tensors}
        distributed_step(mesh, buf, tensors, grads, states)
        for t in tensors:
            weights[t.name] = reference.step(t.name, weights[t.name], grads[t.name])
            np.testing.assert_allclose(buf.tensor(t.name), weights[t.name], rtol=1e-12, atol=1e-14)
    assert all(state.ledger == reference.ledger for state in states)


def test_single_rank_mesh():
    config = MuonConfig()
    tensors, mesh, buf, weights, rng = build(SHAPES[:3], 1, seed=42)
    states = [MuonState.fresh(1, config)]
    reference = LocalMuon(config, 1)
    for _ in range(5):
        grads = {t.name: rng.standard_normal(t.shape) for t in tensors}
        distributed_step(mesh, buf, tensors, grads, states)
        for t in tensors:
            weights[t.name] = reference.step(t.name, weights[t.name], grads[t.name])
            np.testing.assert_allclose(buf.tensor(t.name), weights[t.name], rtol=1e-12, atol=1e-14)


def test_zero_learning_rate_keeps_weights():
    config = MuonConfig(lr=0.0)
    tensors, mesh, buf, weights, rng = build(SHAPES, 4, seed=43)
    states = [MuonState.fresh(4, config) for _ in range(4)]
    for _ in range(3):
        grads = {t.name: rng.standard_normal(t.shape) for t in tensors}
        distributed_step(mesh, buf, tensors, grads, states)
    for t in tensors:
        np.testing.assert_array_equal(buf.tensor(t.name), weights[t.name])


def test_result_does_not_depend_on_root():
    config = MuonConfig()
    results = []
    for ledger in ([0, 0, 0, 100], [100, 100, 0, 100], [0, 100, 100, 100]):
        tensors, mesh, buf, _, rng = build(SHAPES[:2], 4, seed=44)
        states = [MuonState(config, list(ledger)) for _ in range(4)]
        grads = {t.name: rng.standard_normal(t.shape) for t in tensors}
        distributed_step(mesh, buf, tensors, grads, states)
        results.append({t.name: buf.tensor(t.name) for t in tensors})
    for other in results[1:]:
        for name, value in results[0].items():
            np.testing.assert_allclose(other[name], value, rtol=1e-12, atol=1e-14)


def test_muon_step_rejects_vectors():
    spec = TensorSpec("bias", (4,))
    mesh = SimMesh.line(2, timeout_s=5.0)

    def fn(ctx):
        w = distribute(ctx, np.zeros(4), spec, (RaggedShard((2, 2)),))
        return muon_step(ctx, "bias", w, w, MuonState.fresh(2))

    with pytest.raises(NotMatrix):
        mesh.run(fn)


def test_muon_step_needs_one_dim_mesh():
    spec = TensorSpec("w", (2, 2), granularity=GranularitySpec.rows(1))
    mesh = SimMesh([("dp", 2), ("fsdp", 2)], timeout_s=5.0)

    def fn(ctx):
        w = distribute(ctx, np.ones((2, 2)), spec, (Replicate(), RaggedShard((1, 1))))
        return muon_step(ctx, "w", w, w, MuonState.fresh(4))

    with pytest.raises(PlacementMismatch):
        mesh.run(fn)
