"""Micro-batched execution of a pipeline stage plan (GPipe order, simulated)."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from ..schedule.pipeline import PipelineStagePlan
from .engine import ExecutionError, Interpreter


@dataclass
class PipelineResult:
    outputs: list[np.ndarray]
    # (clock, stage, micro-batch) in the order a GPipe forward would fire them
    events: list[tuple[int, int, int]] = field(default_factory=list)
    # value name -> number of times it crossed into the next stage
    transfers: dict[str, int] = field(default_factory=dict)


def gpipe_order(stages: int, micro_batches: int) -> list[tuple[int, int, int]]:
    events = []
    for clock in range(micro_batches + stages - 1):
        for s in range(stages):
            mb = clock - s
            if 0 <= mb < micro_batches:
                events.append((clock, s, mb))
    return events


def _run_stage(plan: PipelineStagePlan, s: int, env: dict[str, list[np.ndarray]], world: int, mode: str,
               seed: int) -> None:
    stage = plan.stages[s]
    interp = Interpreter(stage.module, world, mode, seed)
    try:
        slots = interp.feed([env[name] for name in stage.io.consumes])
    except KeyError as exc:
        raise ExecutionError(f"stage {s} consumes {exc.args[0]}, which no earlier stage produced") from None
    outs = interp.call(stage.module, "", slots)
    for name, slot in zip(stage.io.produces, outs):
        env[name] = interp.values[slot]


def run_stages(plan: PipelineStagePlan, inputs: Sequence[np.ndarray], world_size: int = 1,
               mode: str = "verify", seed: int = 0) -> list[np.ndarray]:
    """Run the stages back to back on the whole batch (rank 0 outputs)."""
    return run_pipeline(plan, inputs, 1, world_size, mode, seed).outputs


def run_pipeline(plan: PipelineStagePlan, inputs: Sequence[np.ndarray], micro_batches: int = 1,
                 world_size: int = 1, mode: str = "verify", seed: int = 0) -> PipelineResult:
    if micro_batches < 1:
        raise ExecutionError("micro_batches must be positive")
    if len(inputs) != len(plan.inputs):
        raise ExecutionError(f"pipeline expects {len(plan.inputs)} inputs, got {len(inputs)}")
    arrays = [np.asarray(x) for x in inputs]
    for x in arrays:
        if x.ndim == 0 or x.shape[0] % micro_batches:
            raise ExecutionError(f"batch of shape {x.shape} is not divisible into {micro_batches} micro-batches")
    chunks = [np.split(x, micro_batches, axis=0) for x in arrays]
    envs = [{name: [chunks[i][mb]] * world_size for i, name in enumerate(plan.inputs)}
            for mb in range(micro_batches)]
    result = PipelineResult([])
    result.events = gpipe_order(len(plan.stages), micro_batches)
    for _, s, mb in result.events:
        if s > 0:
            for name in plan.stages[s].io.consumes:
                result.transfers[name] = result.transfers.get(name, 0) + 1
        _run_stage(plan, s, envs[mb], world_size, mode, seed)
    per_mb = [[env[name][0] for name in plan.outputs] for env in envs]
    result.outputs = [np.concatenate([mb[i] for mb in per_mb], axis=0) if micro_batches > 1 else per_mb[0][i]
                      for i in range(len(plan.outputs))]
    return result
