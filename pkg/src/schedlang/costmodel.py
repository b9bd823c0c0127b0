"""Analytical step-time and memory estimates.

Per-op forward flop formulas (n = output elements unless noted):

    matmul              2 * M * N * K (batched: 2 * out elements * K)
    add, mul, scale,
    relu, gelu, dropout n
    softmax             5 * n
    layernorm           8 * n
    reduce_sum          input elements
    transpose, reshape,
    split, concat,
    all_reduce,
    all_gather          0

Builtin modules are costed as the op sequence they run; every call_op and
every builtin call is one kernel launch, and a fused module is one launch in
total. Activation bytes follow the executor's ledger rule exactly.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

from .config import CostConstants, WorldConfig
from .ir.module import ModuleDef, join_path
from .ir.shapes import builtin_shape, model_input_specs, op_shape
from .ir.tensor import TensorSpec
from .schedule import transforms as tf
from .schedule.pipeline import PipelineStagePlan

ELEMENTWISE = {"add", "mul", "scale", "relu", "gelu", "dropout"}
LAYOUT = {"transpose", "reshape", "split", "concat", "all_reduce", "all_gather"}


@dataclass
class Tally:
    flops: int = 0
    launches: int = 0
    activation_bytes: int = 0
    recompute_flops: int = 0
    recompute_launches: int = 0
    # bytes moved per collective kind
    all_reduce_bytes: int = 0
    all_gather_bytes: int = 0
    activations: dict[str, int] = field(default_factory=dict)

    def book(self, key: str, nbytes: int) -> None:
        self.activation_bytes += nbytes
        self.activations[key] = self.activations.get(key, 0) + nbytes


@dataclass(frozen=True)
class CostReport:
    step_time_s: float
    flops: int  # whole training step: forward, backward and recompute
    forward_flops: int
    recompute_flops: int
    launches: int  # forward kernel launches
    collective_bytes: int
    param_bytes: int
    activation_bytes: int
    peak_memory_bytes: int
    oom: bool
    throughput_samples_per_s: float
    stages: int = 1
    micro_batches: int = 1

    def lines(self) -> list[str]:
        return [f"{k}: {v}" for k, v in self.__dict__.items()]


def op_flops(op: str, args: Sequence[TensorSpec], out: TensorSpec | tuple) -> int:
    if op == "matmul":
        k = args[0].shape[-1]
        return 2 * out.element_count * k
    if op in ELEMENTWISE:
        return out.element_count
    if op == "softmax":
        return 5 * out.element_count
    if op == "layernorm":
        return 8 * out.element_count
    if op == "reduce_sum":
        return args[0].element_count
    return 0


class _Walker:
    def __init__(self, tally: Tally, ledger: bool = True) -> None:
        self.t = tally
        self.ledger = ledger

    def _book(self, key: str, specs: Sequence[TensorSpec]) -> None:
        if self.ledger:
            self.t.book(key, sum(s.byte_size for s in specs))

    def module(self, mod: ModuleDef, path: str, ins: list[TensorSpec]) -> list[TensorSpec]:
        if mod.attrs.get("checkpoint"):
            sub = Tally()
            outs = _Walker(sub, ledger=False).plain(mod, path, ins)
            self.t.flops += sub.flops
            self.t.launches += sub.launches
            self.t.all_reduce_bytes += sub.all_reduce_bytes
            self.t.all_gather_bytes += sub.all_gather_bytes
            self.t.recompute_flops += sub.flops + sub.recompute_flops
            self.t.recompute_launches += sub.launches + sub.recompute_launches
            self._book(path, ins)
            return outs
        return self.plain(mod, path, ins)

    def plain(self, mod: ModuleDef, path: str, ins: list[TensorSpec]) -> list[TensorSpec]:
        if mod.is_builtin:
            outs = builtin_shape(mod, ins, path or mod.name)
            self.t.flops += builtin_flops(mod, ins, outs)
            self.t.launches += 1
            self._book(path, outs)
            return outs
        before = self.t.launches
        outs = self.graph(mod, path, ins)
        if mod.attrs.get("fused"):
            self.t.launches = before + 1
        return outs

    def graph(self, mod: ModuleDef, path: str, ins: list[TensorSpec]) -> list[TensorSpec]:
        graph = mod.forward
        env: dict[int, object] = dict(zip(graph.input_ids, ins))
        for node in graph:
            if node.kind == "input":
                continue
            args = [env[a] for a in node.args]
            if node.kind == "output":
                return list(args)
            if node.kind == "param_ref":
                env[node.id] = mod.resolve_param(node.target).spec
            elif node.kind == "get_item":
                env[node.id] = args[0][int(node.attrs["index"])]
            elif node.kind == "call_op":
                out = op_shape(node.op, args, node.attrs, f"{path}:{node.id}")
                self.t.flops += op_flops(node.op, args, out)
                self.t.launches += 1
                if node.op == "all_reduce":
                    self.t.all_reduce_bytes += args[0].byte_size
                elif node.op == "all_gather":
                    self.t.all_gather_bytes += out.byte_size
                self._book(f"{path}:{node.id}", list(out) if isinstance(out, tuple) else [out])
                env[node.id] = out
            elif node.kind == "call_module":
                outs = self.module(mod.get(node.target), join_path(path, node.target), args)
                env[node.id] = outs[0] if len(outs) == 1 else tuple(outs)
        raise ValueError(f"{path}: graph has no output node")


def builtin_flops(mod: ModuleDef, ins: Sequence[TensorSpec], outs: Sequence[TensorSpec]) -> int:
    kind = mod.kind
    if kind in ("Linear", "FusedQKV"):
        x = ins[0]
        w = mod.param("weight").spec
        rows = x.element_count // x.shape[-1]
        flops = 2 * rows * w.shape[0] * w.shape[1]
        if mod.attrs.get("bias", True) and mod.has_param("bias"):
            flops += rows * w.shape[0]
        return flops
    if kind == "LayerNorm":
        return 8 * outs[0].element_count
    if kind == "Dropout":
        return outs[0].element_count
    if kind == "EfficientAttention":
        q = ins[0]
        hd = int(mod.attrs["head_dim"])
        b, s, h = q.shape
        heads = h // hd
        scores = b * heads * s * s
        # QK^T, scale, softmax, dropout, PV
        return 2 * scores * hd + scores + 5 * scores + scores + 2 * scores * hd
    return 0


def tally(model: ModuleDef, batch: int | None = None, in_specs: Sequence[TensorSpec] | None = None) -> Tally:
    t = Tally()
    specs = list(in_specs) if in_specs is not None else model_input_specs(model, batch)
    _Walker(t).module(model, "", specs)
    return t


def param_bytes(model: ModuleDef) -> int:
    return sum(p.spec.byte_size for _, p in model.all_params() if not p.tied_to)


def _collective_time(t: Tally, world: int, c: CostConstants) -> float:
    if world <= 1:
        return 0.0
    ring = 2 * (world - 1) / world * t.all_reduce_bytes
    gather = (world - 1) / world * t.all_gather_bytes
    return (ring + gather) / c.link_bytes_per_s


def _step_time(t: Tally, world: int, c: CostConstants) -> float:
    flops = t.flops * (1 + c.backward_flops_multiplier) + t.recompute_flops
    launches = t.launches * 2 + t.recompute_launches
    return flops / c.device_flops_per_s + launches * c.kernel_launch_overhead_s + _collective_time(t, world, c)


def _memory(params: int, activations: int, c: CostConstants) -> int:
    # weights + optimizer state + gradients + retained activations
    return int(params + c.optimizer_state_multiplier * params + params + activations)


def estimate(model: ModuleDef, batch: int | None = None, micro_batches: int = 1,
             world: WorldConfig | None = None, stages: PipelineStagePlan | None = None,
             checkpoint_ratio: float | None = None, layers: str | None = None) -> CostReport:
    """Cost of one training step over ``batch`` samples.

    With ``stages`` the step is a GPipe pipeline over ``micro_batches``;
    without, micro-batches run back to back (gradient accumulation).
    ``checkpoint_ratio`` with ``layers`` (the path of a module whose children
    are the layers) checkpoints the first floor(ratio * L) layers first.
    """
    world = world or WorldConfig()
    c = world.cost
    if checkpoint_ratio is not None:
        if layers is None:
            raise ValueError("checkpoint_ratio needs the layers container path")
        model = apply_checkpoint_ratio(model, layers, checkpoint_ratio)
    full = model_input_specs(model, batch)
    b = full[0].shape[0]
    if micro_batches < 1 or b % micro_batches:
        raise ValueError(f"batch {b} is not divisible into {micro_batches} micro-batches")
    mb_specs = [s.with_shape((s.shape[0] // micro_batches,) + s.shape[1:]) for s in full]
    m = micro_batches
    if stages is None:
        mb = tally(model, in_specs=mb_specs)
        t_step = m * _step_time(mb, world.world_size, c)
        params = param_bytes(model)
        acts = m * mb.activation_bytes
        fwd, rec, launches = m * mb.flops, m * mb.recompute_flops, mb.launches
        coll = m * (mb.all_reduce_bytes + mb.all_gather_bytes)
        peak = _memory(params, acts, c)
        n_stages = 1
    else:
        per_stage = _stage_tallies(stages, model, mb_specs)
        stage_times = [_step_time(t, 1, c) for t in per_stage]
        t_step = (m + len(per_stage) - 1) * max(stage_times)
        params = sum(param_bytes(s.module) for s in stages.stages)
        acts = sum(m * t.activation_bytes for t in per_stage)
        peak = max(_memory(param_bytes(s.module), m * t.activation_bytes, c) for s, t in zip(stages.stages, per_stage))
        fwd = m * sum(t.flops for t in per_stage)
        rec = m * sum(t.recompute_flops for t in per_stage)
        launches = sum(t.launches for t in per_stage)
        coll = m * sum(t.all_reduce_bytes + t.all_gather_bytes for t in per_stage)
        n_stages = len(per_stage)
    oom = peak > world.device_memory_bytes
    total_flops = int(fwd * (1 + c.backward_flops_multiplier) + rec)
    throughput = 0.0 if oom or t_step <= 0 else b / t_step
    return CostReport(t_step, total_flops, fwd, rec, launches, coll, params, acts, peak, oom, throughput,
                      n_stages, m)


def _stage_tallies(plan: PipelineStagePlan, model: ModuleDef, in_specs: list[TensorSpec]) -> list[Tally]:
    env: dict[str, TensorSpec] = dict(zip(plan.inputs, in_specs))
    out = []
    for stage in plan.stages:
        t = Tally()
        outs = _Walker(t).module(stage.module, "", [env[n] for n in stage.io.consumes])
        env.update(zip(stage.io.produces, outs))
        out.append(t)
    return out


def layer_paths(model: ModuleDef, container: str) -> list[str]:
    """Children of ``container`` in declaration (execution) order."""
    return [join_path(container, k) for k in model.get(container).submodules]


def checkpointed_layers(n_layers: int, ratio: float) -> int:
    if not 0.0 <= ratio <= 1.0:
        raise ValueError(f"checkpoint ratio {ratio} outside [0, 1]")
    return math.floor(ratio * n_layers + 1e-9)


def apply_checkpoint_ratio(model: ModuleDef, container: str, ratio: float) -> ModuleDef:
    paths = layer_paths(model, container)
    for p in paths[:checkpointed_layers(len(paths), ratio)]:
        model = tf.set_checkpoint(model, p)
    return model
