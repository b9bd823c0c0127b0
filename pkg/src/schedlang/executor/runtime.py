"""Public entry points of the reference runtime."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from ..ir.module import ModuleDef
from .engine import ActivationLedger, ExecutionError, Interpreter, _fold_sum


@dataclass
class ForwardResult:
    outputs: list[np.ndarray]
    ledger: ActivationLedger


@dataclass
class GradientMap:
    params: dict[str, np.ndarray] = field(default_factory=dict)
    inputs: list[np.ndarray | None] = field(default_factory=list)


@dataclass
class ShardedResult:
    outputs: list[list[np.ndarray]]  # [rank][output index]
    grads: list[GradientMap] | None = None
    ledger: ActivationLedger | None = None

    @property
    def rank0(self) -> list[np.ndarray]:
        return self.outputs[0]


def _check_inputs(model: ModuleDef, inputs: Sequence[np.ndarray]) -> None:
    n = len(model.forward.input_ids) if model.forward is not None else 1
    if len(inputs) != n:
        raise ExecutionError(f"{model.name}: expected {n} inputs, got {len(inputs)}")


def _run(model: ModuleDef, per_rank_inputs: list[list[np.ndarray]], world: int, mode: str, seed: int,
         grads: bool) -> tuple[Interpreter, list[int], list[int]]:
    interp = Interpreter(model, world, mode, seed, record=grads)
    in_slots = interp.feed(per_rank_inputs)
    outs = interp.call(model, "", in_slots)
    return interp, in_slots, outs


def forward(model: ModuleDef, inputs: Sequence[np.ndarray], mode: str = "verify", seed: int = 0) -> ForwardResult:
    _check_inputs(model, inputs)
    interp, _, outs = _run(model, [[np.asarray(x)] for x in inputs], 1, mode, seed, False)
    return ForwardResult([interp.values[s][0] for s in outs], interp.ledger)


def _gradient_maps(interp: Interpreter, in_slots: list[int], grads: dict, world: int) -> list[GradientMap]:
    maps = []
    for r in range(world):
        gm = GradientMap()
        for path, g in sorted(interp.param_grads.items()):
            gm.params[path] = g[r]
        for path, _ in interp.model.all_params():
            if path not in gm.params and not interp._param_defs[path].tied_to:
                gm.params[path] = np.zeros_like(interp.param_value(path)[r])
        gm.params = dict(sorted(gm.params.items()))
        gm.inputs = [grads[s][r] if s in grads else None for s in in_slots]
        maps.append(gm)
    return maps


def backward(model: ModuleDef, inputs: Sequence[np.ndarray], mode: str = "verify", seed: int = 0) -> GradientMap:
    """Gradients of sum(outputs) for every parameter and input."""
    _check_inputs(model, inputs)
    interp, in_slots, outs = _run(model, [[np.asarray(x)] for x in inputs], 1, mode, seed, True)
    grads = interp.backward(outs)
    return _gradient_maps(interp, in_slots, grads, 1)[0]


def run_sharded(model: ModuleDef, inputs: Sequence[np.ndarray], world_size: int, mode: str = "verify",
                seed: int = 0, grads: bool = False, data_parallel: bool = False) -> ShardedResult:
    """Run every rank of a tensor-parallel model in lockstep.

    With ``data_parallel`` the inputs are scattered along the batch axis and
    parameter gradients are summed over ranks afterwards.
    """
    if world_size < 1:
        raise ExecutionError("world_size must be positive")
    _check_inputs(model, inputs)
    if data_parallel:
        per_rank = []
        for x in inputs:
            x = np.asarray(x)
            if x.shape[0] % world_size:
                raise ExecutionError(f"batch {x.shape[0]} not divisible by world size {world_size}")
            per_rank.append(np.split(x, world_size, axis=0))
    else:
        per_rank = [[np.asarray(x)] * world_size for x in inputs]
    interp, in_slots, outs = _run(model, per_rank, world_size, mode, seed, grads)
    outputs = [[interp.values[s][r] for s in outs] for r in range(world_size)]
    result = ShardedResult(outputs, ledger=interp.ledger)
    if grads:
        g = interp.backward(outs)
        result.grads = _gradient_maps(interp, in_slots, g, world_size)
    return result


def all_reduce_param_grads(maps: list[GradientMap]) -> list[GradientMap]:
    """Sum parameter gradients across ranks (rank-ascending left fold)."""
    out = []
    keys = list(maps[0].params)
    reduced = {k: _fold_sum([m.params[k] for m in maps]) for k in keys}
    for m in maps:
        out.append(GradientMap({k: reduced[k].copy() for k in keys}, list(m.inputs)))
    return out
