import numpy as np
import pytest

from raggedshard.core import GranularitySpec, RaggedShard, Shard, TensorSpec, make_strided
from raggedshard.dbuffer import (
    AddFrom,
    Scale,
    ViewSegment,
    Zero,
    apply_sequential,
    build_dbuffer,
    gather_tensors,
    grouped_apply,
    materialize,
    reduce_scatter_grads,
    stage_gather,
)
from raggedshard.errors import MeshMismatch, ShapeMismatch
from raggedshard.planner import PlanProblem, plan_layout
from raggedshard.simmesh import SimMesh

from tests.test_planner import problem, random_problem


def line(m):
    return SimMesh.line(m, timeout_s=5.0)


def grid():
    return SimMesh([("dp", 2), ("fsdp", 2)], timeout_s=5.0)


def fill(buf, rng):
    for region in buf.storage:
        region[:] = rng.standard_normal(region.size)


# ------------------------------------------------------------------
# Mapping
# ------------------------------------------------------------------


def test_views_follow_the_plan():
    plan = plan_layout(problem([(6, 3), (4, 2)], 2))
    buf = build_dbuffer(plan, line(2))
    assert buf.S == 6
    assert buf.views["t1"] == (ViewSegment(0, 0, 6),)
    assert buf.views["t2"] == (ViewSegment(1, 0, 4),)
    assert buf.owned_mask(1).tolist() == [True] * 4 + [False] * 2
    assert buf.placement("t1") == RaggedShard((2, 0))
    assert buf.placement("t2") == RaggedShard((0, 2))


def test_tensor_spanning_devices():
    prob = problem([(10, 5)], 3)
    plan = plan_layout(prob)
    assert plan.S == 5
    buf = build_dbuffer(plan, line(3))
    assert buf.views["t1"] == (ViewSegment(0, 0, 5), ViewSegment(1, 0, 5))
    assert buf.placement("t1") == RaggedShard((1, 1, 0))
    assert buf.local_view("t1", 2).size == 0
    assert not buf.owned_mask(2).any()


def test_views_alias_regions():
    plan = plan_layout(problem([(6, 3), (4, 2)], 2))
    buf = build_dbuffer(plan, line(2))
    buf.view("t2")[0][:] = 7.0
    assert buf.region(1)[:4].tolist() == [7.0] * 4
    buf.region(0)[2] = -1.0
    assert buf.read("t1")[2] == -1.0
    buf.local_view("t1", 0)[0] = 3.0
    assert buf.tensor("t1")[0, 0] == 3.0


def test_views_cover_intervals_on_random_plans():
    rng = np.random.default_rng(31)
    for _ in range(200):
        plan = plan_layout(random_problem(rng))
        buf = build_dbuffer(plan, line(plan.m))
        for i, t in enumerate(plan.tensors):
            for seg, view in zip(buf.views[t.name], buf.view(t.name)):
                assert view.size == seg.length
                if view.size:
                    assert np.shares_memory(view, buf.region(seg.device))
                view[:] = i + 1
        flat = np.concatenate(buf.storage)
        for i, (start, stop) in enumerate(plan.intervals):
            assert (flat[start:stop] == i + 1).all()
        for start, stop in plan.padding:
            assert not flat[start:stop].any()


def test_load_and_read_back():
    rng = np.random.default_rng(30)
    for _ in range(50):
        prob = random_problem(rng)
        plan = plan_layout(prob)
        buf = build_dbuffer(plan, line(prob.m))
        values = {t.name: rng.standard_normal(t.shape) for t in plan.tensors}
        for name, value in values.items():
            buf.load(name, value)
        for name, value in values.items():
            np.testing.assert_array_equal(buf.tensor(name), value)
        for device in range(plan.m):
            padding = ~buf.owned_mask(device)
            assert not buf.region(device)[padding].any()


def test_write_checks_size():
    plan = plan_layout(problem([(6, 3)], 2))
    buf = build_dbuffer(plan, line(2))
    with pytest.raises(ShapeMismatch):
        buf.write("t1", np.zeros(5))


def test_plan_and_mesh_must_agree():
    plan = plan_layout(problem([(6, 3)], 2))
    with pytest.raises(MeshMismatch):
        build_dbuffer(plan, line(3))


def test_epoch_counter():
    buf = build_dbuffer(plan_layout(problem([(4, 1)], 2)), line(2))
    assert buf.epoch == 0
    assert buf.step() == 1
    assert buf.step() == 2


# ------------------------------------------------------------------
# Communication layouts
# ------------------------------------------------------------------


def test_block_granularity_stores_tiles():
    t = TensorSpec("w", (4, 4), elem_bytes=2, granularity=GranularitySpec.block([2, 2]))
    plan = plan_layout(PlanProblem((t,), 2))
    buf = build_dbuffer(plan, line(2))
    full = np.arange(16.0).reshape(4, 4)
    buf.load("w", full)
    assert buf.read("w")[:4].tolist() == [0.0, 1.0, 4.0, 5.0]
    np.testing.assert_array_equal(buf.tensor("w"), full)


def test_strided_layout_round_trip():
    t = TensorSpec("w", (4, 2), elem_bytes=2, granularity=GranularitySpec.rows(1))
    reshuffle = make_strided(t, Shard(0), (1, 1), outer_size=2).reshuffle
    plan = plan_layout(PlanProblem((t,), 2))
    buf = build_dbuffer(plan, line(2), layouts={"w": reshuffle})
    full = np.arange(8.0).reshape(4, 2)
    buf.load("w", full)
    # Local row j of both outer halves lands next to each other.
    assert buf.read("w").tolist() == [0.0, 1.0, 4.0, 5.0, 2.0, 3.0, 6.0, 7.0]
    np.testing.assert_array_equal(buf.tensor("w"), full)

    def fn(ctx):
        return gather_tensors(buf, ctx)["w"]

    for gathered in line(2).run(fn):
        np.testing.assert_array_equal(gathered, full)


def test_layout_must_cover_tensor():
    t = TensorSpec("w", (4, 2), granularity=GranularitySpec.rows(1))
    other = TensorSpec("v", (2, 2), granularity=GranularitySpec.rows(1))
    wrong = make_strided(other, Shard(0), (1, 1), outer_size=1).reshuffle
    plan = plan_layout(PlanProblem((t,), 2))
    with pytest.raises(ShapeMismatch):
        build_dbuffer(plan, line(2), layouts={"w": wrong})


# ------------------------------------------------------------------
# Grouped operations
# ------------------------------------------------------------------


@pytest.mark.parametrize("make_op", [lambda other: Zero(), lambda other: Scale(0.5), AddFrom])
def test_grouped_ops_match_sequential(make_op):
    rng = np.random.default_rng(31)
    for _ in range(200):
        prob = random_problem(rng, max_tensors=8, max_block=8, max_units=6, max_devices=6)
        plan = plan_layout(prob)
        mesh = line(prob.m)
        fused, reference, other = (build_dbuffer(plan, mesh) for _ in range(3))
        fill(fused, rng)
        fill(other, rng)
        for src, dst in zip(fused.storage, reference.storage):
            dst[:] = src
        before = [region.copy() for region in fused.storage]

        grouped_apply(fused, make_op(other))
        apply_sequential(reference, make_op(other))

        for device, (got, want, old) in enumerate(zip(fused.storage, reference.storage, before)):
            np.testing.assert_array_equal(got, want)
            padding = ~fused.owned_mask(device)
            np.testing.assert_array_equal(got[padding], old[padding])


def test_add_from_needs_same_layout():
    a = build_dbuffer(plan_layout(problem([(6, 3), (4, 2)], 2)), line(2))
    b = build_dbuffer(plan_layout(problem([(4, 1), (4, 1)], 2)), line(2))
    with pytest.raises(ShapeMismatch):
        grouped_apply(a, AddFrom(b))


def test_grouped_ops_touch_every_replica():
    plan = plan_layout(problem([(6, 3), (4, 2)], 2))
    buf = build_dbuffer(plan, grid())
    for region in buf.storage:
        region[:] = 1.0
    grouped_apply(buf, Scale(3.0))
    for rank, region in enumerate(buf.storage):
        owned = buf.owned_mask(buf.device_of(rank))
        assert (region[owned] == 3.0).all()
        assert (region[~owned] == 1.0).all()


# ------------------------------------------------------------------
# Collectives
# ------------------------------------------------------------------


def test_stage_gather_concatenates_regions():
    plan = plan_layout(problem([(6, 3), (4, 2)], 2))
    buf = build_dbuffer(plan, line(2))
    buf.load("t1", np.arange(6.0).reshape(2, 3))
    buf.load("t2", np.arange(10.0, 14.0).reshape(2, 2))

    def fn(ctx):
        staging = stage_gather(buf, ctx)
        return staging, materialize(buf, staging, "t2")

    for staging, t2 in line(2).run(fn):
        assert staging.tolist() == [0, 1, 2, 3, 4, 5, 10, 11, 12, 13, 0, 0]
        assert t2.tolist() == [[10.0, 11.0], [12.0, 13.0]]


def test_gather_tensors_on_random_plans():
    rng = np.random.default_rng(32)
    for _ in range(30):
        prob = random_problem(rng)
        plan = plan_layout(prob)
        mesh = line(prob.m)
        buf = build_dbuffer(plan, mesh)
        values = {t.name: rng.standard_normal(t.shape) for t in plan.tensors}
        for name, value in values.items():
            buf.load(name, value)
        for gathered in mesh.run(lambda ctx: gather_tensors(buf, ctx)):
            assert set(gathered) == set(values)
            for name, value in values.items():
                np.testing.assert_array_equal(gathered[name], value)


def test_dist_tensor_matches_placement():
    plan = plan_layout(problem([(10, 5)], 3))
    buf = build_dbuffer(plan, line(3))
    buf.load("t1", np.arange(10.0).reshape(2, 5))

    def fn(ctx):
        x = buf.dist_tensor(ctx, "t1")
        x.check(ctx)
        return x.local

    results = line(3).run(fn)
    assert [r.tolist() for r in results] == [[0, 1, 2, 3, 4], [5, 6, 7, 8, 9], []]


def test_dist_tensor_needs_one_dim_mesh():
    plan = plan_layout(problem([(4, 1)], 2))
    buf = build_dbuffer(plan, grid())
    with pytest.raises(MeshMismatch):
        grid().run(lambda ctx: buf.dist_tensor(ctx, "t1"))


def test_reduce_scatter_grads_one_dim():
    rng = np.random.default_rng(33)
    plan = plan_layout(problem([(6, 3), (4, 2)], 2))
    mesh = line(2)
    grads = build_dbuffer(plan, mesh)
    partials = [rng.standard_normal(plan.capacity) for _ in range(2)]
    mesh.run(lambda ctx: reduce_scatter_grads(grads, ctx, partials[ctx.rank]))

    total = partials[0] + partials[1]
    for device in range(2):
        owned = grads.owned_mask(device)
        region = grads.region(device)
        np.testing.assert_array_equal(region[owned], total[device * 6:(device + 1) * 6][owned])
        assert not region[~owned].any()


def test_reduce_scatter_grads_two_dim():
    rng = np.random.default_rng(34)
    plan = plan_layout(problem([(6, 3), (4, 2)], 2))
    mesh = grid()
    grads = build_dbuffer(plan, mesh)
    partials = [rng.standard_normal(plan.capacity) for _ in range(4)]
    mesh.run(lambda ctx: reduce_scatter_grads(grads, ctx, partials[ctx.rank]))

    total = (partials[0] + partials[1]) + (partials[2] + partials[3])
    for rank in range(4):
        device = grads.device_of(rank)
        owned = grads.owned_mask(device)
        np.testing.assert_array_equal(grads.region(rank)[owned], total[device * 6:(device + 1) * 6][owned])


def test_reduce_scatter_grads_needs_inner_shard_dim():
    plan = plan_layout(problem([(4, 1)], 2))
    mesh = grid()
    grads = build_dbuffer(plan, mesh, shard_dim="dp")
    with pytest.raises(MeshMismatch):
        mesh.run(lambda ctx: reduce_scatter_grads(grads, ctx, np.zeros(plan.capacity)))


def test_two_dim_buffer_replicates_regions():
    plan = plan_layout(problem([(6, 3), (4, 2)], 2))
    buf = build_dbuffer(plan, grid())
    assert buf.replicas == 2
    assert buf.rank_of(1, replica=1) == 3
    assert buf.device_of(2) == 0
    buf.load("t2", np.ones((2, 2)))
    assert buf.region(1)[:4].tolist() == [1.0] * 4
    assert buf.region(3)[:4].tolist() == [1.0] * 4
