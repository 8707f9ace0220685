"""The simulate command -- runs the Muon or quantization demo on a SimMesh.

muon:  trains the config's parameters on a seeded quadratic objective
       0.5 * ||W - W_target||^2 with distributed Muon (2-D weights) and
       momentum SGD (everything else) held in a DBuffer, and compares every
       step with the single-process LocalMuon reference. CSV columns:
       step,loss,update_norm,max_rel_error

quant: plans the config, checks that no quantization tile crosses a device
       boundary, then quantizes each rank's shard on its own and compares
       the gathered result with quantizing the full tensor. CSV columns:
       group,tensor,contained,crossings,max_error,error_bound,shard_local_exact

Exit code 2 when any property fails.
"""

import csv
import logging
from typing import Optional

import numpy as np

from cli.base import EXIT_OK, EXIT_VALIDATION
from cli.plan import PlanCommand, single_int
from configs.loader import TensorGroup, with_row_granularity
from raggedshard.dbuffer import DBufferMap, build_dbuffer, gather_tensors
from raggedshard.errors import NotMatrix
from raggedshard.muon import (
    LocalMuon,
    MuonConfig,
    MuonState,
    muon_step,
    sgd_momentum_step,
)
from raggedshard.planner import LayoutPlan
from raggedshard.quant import (
    QuantBlockSpec,
    blockwise_dequantize,
    blockwise_quantize,
    containment_check,
    matrix_view,
    quantize_shard,
)
from raggedshard.simmesh import DistTensor, RankContext, SimMesh, distribute

logger = logging.getLogger("raggedshard.cli.simulate")

MUON_FIELDS = ["step", "loss", "update_norm", "max_rel_error"]
QUANT_FIELDS = ["group", "tensor", "contained", "crossings", "max_error", "error_bound", "shard_local_exact"]


def relative_error(actual: np.ndarray, expected: np.ndarray) -> float:
    scale = np.linalg.norm(expected)
    diff = np.linalg.norm(actual - expected)
    return float(diff / scale) if scale else float(diff)


class SimulateCommand(PlanCommand):
    def __init__(self, args):
        super().__init__(args, "simulate")

    def _mesh(self, m: int) -> SimMesh:
        return SimMesh.line(m, timeout_s=float(self.config["mesh"]["rendezvous_timeout_s"]))

    def _planned(self, group: TensorGroup, m: int) -> Optional[LayoutPlan]:
        plan, _, violations, _ = self.plan_group(group, m)
        if violations:
            logger.error(f"group {group.name}: plan has {len(violations)} violation(s)")
            return None
        return plan

    def run(self) -> int:
        config = self.load_model()
        if getattr(self.args, "granularity", None) is not None:
            config = with_row_granularity(config, single_int(self.args.granularity, "--granularity"))
        sim = self.config["simulate"]
        m = single_int(self.args.devices or sim["devices"], "--devices")
        demo = getattr(self.args, "demo", None) or "muon"
        if demo == "muon":
            return self._run_muon(self.groups_of(config), m)
        return self._run_quant(self.groups_of(config), m)

    # ------------------------------------------------------------------
    # Muon demo
    # ------------------------------------------------------------------

    def _run_muon(self, groups: list[TensorGroup], m: int) -> int:
        sim = self.config["simulate"]
        steps = int(getattr(self.args, "steps", None) or sim["steps"])
        seed = int(sim["seed"] if getattr(self.args, "seed", None) is None else self.args.seed)
        tolerance = float(sim["max_rel_error"])
        muon_cfg = MuonConfig(**{k: self.config["muon"][k] for k in ("lr", "beta", "nesterov", "ns_steps")})

        tensors = [t for group in groups for t in group.tensors]
        if not any(t.rank == 2 for t in tensors):
            raise NotMatrix("the muon demo needs at least one 2-D parameter")
        buffers: list[tuple[TensorGroup, DBufferMap]] = []
        mesh = self._mesh(m)
        for group in groups:
            plan = self._planned(group, m)
            if plan is None:
                return EXIT_VALIDATION
            buffers.append((group, build_dbuffer(plan, mesh)))

        rng = np.random.default_rng(seed)
        weights, targets = {}, {}
        for group, buf in buffers:
            for t in group.tensors:
                weights[t.name] = rng.standard_normal(t.shape)
                targets[t.name] = rng.standard_normal(t.shape)
                buf.load(t.name, weights[t.name])

        reference = LocalMuon(muon_cfg, m)
        states = [MuonState.fresh(m, muon_cfg) for _ in range(m)]

        def train_step(ctx: RankContext) -> tuple[float, float]:
            state = states[ctx.rank]
            loss = update_sq = 0.0
            for group, buf in buffers:
                for t in group.tensors:
                    w = buf.dist_tensor(ctx, t.name)
                    target = distribute(ctx, targets[t.name], t, w.placements)
                    residual = w.local - target.local
                    g = DistTensor(t, w.placements, residual)
                    loss += 0.5 * float(np.dot(residual, residual))
                    if t.rank == 2:
                        new = muon_step(ctx, t.name, w, g, state)
                    else:
                        new = sgd_momentum_step(t.name, w, g, state)
                    delta = new.local - w.local
                    update_sq += float(np.dot(delta, delta))
                    buf.local_view(t.name, ctx.rank)[:] = new.local
            totals = ctx.all_reduce(np.array([loss, update_sq]))
            return float(totals[0]), float(np.sqrt(totals[1]))

        failed = False
        with self.output() as out:
            writer = csv.writer(out, lineterminator="\n")
            writer.writerow(MUON_FIELDS)
            for step in range(1, steps + 1):
                loss, update_norm = mesh.run(train_step)[0]
                worst = 0.0
                for group, buf in buffers:
                    for t in group.tensors:
                        grad = weights[t.name] - targets[t.name]
                        weights[t.name] = reference.step(t.name, weights[t.name], grad)
                        worst = max(worst, relative_error(buf.tensor(t.name), weights[t.name]))
                writer.writerow([step, f"{loss:.9e}", f"{update_norm:.9e}", f"{worst:.3e}"])
                if worst >= tolerance:
                    failed = True
                    logger.error(f"step {step}: distributed update differs from reference by {worst:.3e}")
        self.summary(f"  muon on {m} ranks, {steps} steps: {'FAILED' if failed else 'matches reference'}")
        return EXIT_VALIDATION if failed else EXIT_OK

    # ------------------------------------------------------------------
    # Quantization demo
    # ------------------------------------------------------------------

    def _blocks(self, group: TensorGroup) -> dict[str, QuantBlockSpec]:
        default = self.config["quant"]["block"]
        return {
            name: QuantBlockSpec(*group.quant_blocks.get(name, default))
            for name in sorted(group.quantized | set(group.quant_blocks))
        }

    def _shard_local(self, mesh: SimMesh, buf: DBufferMap, blocks: dict[str, QuantBlockSpec]) -> dict[str, np.ndarray]:
        """Quantize and dequantize every rank's shard in place, then gather the tensors."""
        plan = buf.plan

        def quantize_local(ctx: RankContext) -> dict[str, np.ndarray]:
            device = buf.device_of(ctx.rank)
            for name, block in blocks.items():
                local = buf.local_view(name, ctx.rank)
                if not local.size:
                    continue
                piece = next(p for p in plan.device_owners[plan.index_of(name)] if p.device == device)
                start = device * plan.S + piece.local_start - plan.interval_of(name)[0]
                spec = buf.specs[name]
                q = quantize_shard(local, spec.shape, start, block, buf.layouts[name])
                local[:] = q.dequantize()
            return gather_tensors(buf, ctx)

        return mesh.run(quantize_local)[0]

    def _run_quant(self, groups: list[TensorGroup], m: int) -> int:
        rng = np.random.default_rng(int(self.config["simulate"]["seed"]))
        mesh = self._mesh(m)
        rows, failed = [], False
        for group in groups:
            blocks = self._blocks(group)
            if not blocks:
                continue
            plan = self._planned(group, m)
            if plan is None:
                return EXIT_VALIDATION
            contained, crossings = containment_check(plan, blocks)
            buf = build_dbuffer(plan, mesh)
            originals = {}
            for t in group.tensors:
                originals[t.name] = rng.standard_normal(t.shape)
                buf.load(t.name, originals[t.name])

            gathered = self._shard_local(mesh, buf, blocks) if contained else {}
            for name, block in blocks.items():
                x = originals[name].reshape(matrix_view(originals[name].shape))
                q = blockwise_quantize(x, block)
                full = blockwise_dequantize(q)
                max_error = float(np.max(np.abs(x - full)))
                bound = float(np.max(q.scales)) / 2
                hits = sum(1 for c in crossings if c.tensor == name)
                exact = name in gathered and np.array_equal(gathered[name].reshape(full.shape), full)
                rows.append([group.name, name, str(hits == 0).lower(), hits,
                             f"{max_error:.6e}", f"{bound:.6e}", str(bool(exact)).lower()])
                if hits or not exact or max_error > bound:
                    failed = True
            if crossings:
                logger.warning(f"group {group.name}: {len(crossings)} tile(s) cross device boundaries")

        with self.output() as out:
            writer = csv.writer(out, lineterminator="\n")
            writer.writerow(QUANT_FIELDS)
            writer.writerows(rows)
        self.summary(f"  quantization on {m} ranks: {'FAILED' if failed else 'contained and exact'}")
        return EXIT_VALIDATION if failed else EXIT_OK
