"""Two-phase schedule verification.

Phase one checks the recorded primitive log against the rules (without
touching the model). Phase two samples random inputs and compares outputs of
the original and scheduled models. Passing phase two is evidence, not proof:
reports always carry ``sampled_not_proven``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .config import WorldConfig
from .errors import RuleViolation, ScheduleError
from .executor.pipeline import run_pipeline
from .executor.runtime import backward, forward, run_sharded
from .ir.module import ModelError, ModuleDef, unshard
from .ir.shapes import model_input_specs
from .ir.tensor import NUMPY_DTYPE, TensorSpec
from .schedule.core import ApplyResult, PrimitiveRecord, ReplayState, Schedule, _replay_one

DEFAULT_TRIALS = 10
DEFAULT_ATOL = 1e-6
DEFAULT_RTOL = 1e-5

InputGen = Callable[[int, Sequence[TensorSpec]], list[np.ndarray]]


def _related(a: str, b: str) -> bool:
    """Same site, or one is an ancestor of the other."""
    return a == b or a == "" or b == "" or a.startswith(b + ".") or b.startswith(a + ".")


def _is_ancestor_or_self(anc: str, path: str) -> bool:
    return anc == path or anc == "" or path.startswith(anc + ".")


def _static_rules(records: Sequence[PrimitiveRecord], i: int, world: WorldConfig) -> list[RuleViolation]:
    rec = records[i]
    where = rec.site or "<root>"
    out = []
    if rec.primitive in ("shard", "sync", "pipeline_split") and world.world_size <= 1:
        out.append(RuleViolation("R2", f"{rec.primitive} {where} needs world_size > 1 (got {world.world_size})", i))
    if rec.primitive == "sync":
        if not any(r.primitive == "shard" and _related(r.site, rec.site) for r in records[:i]):
            out.append(RuleViolation("R1", f"sync {where} has no preceding shard on this module, an ancestor or a descendant", i))
    needs_trace = rec.primitive in ("fuse", "pipeline_split") or (
        rec.primitive in ("replace", "checkpoint") and rec.args.get("match") is not None)
    if needs_trace:
        if not any(r.primitive == "trace" and _is_ancestor_or_self(r.site, rec.site) for r in records[:i]):
            out.append(RuleViolation("R3", f"{rec.primitive} {where} needs a preceding trace", i))
    return out


def validate_rules(sch: Schedule) -> list[RuleViolation]:
    """Every rule violation in the log, in record order. Never mutates anything."""
    log = sch._log
    records = log.records
    violations: list[RuleViolation] = []
    skip = set()
    for i in range(len(records)):
        found = _static_rules(records, i, log.world)
        if found:
            violations.extend(found)
            skip.add(i)
    # shape-level rules (R4, R5) surface while replaying on a scratch copy
    state = ReplayState(log.model)
    for i, rec in enumerate(records):
        if i in skip:
            continue
        try:
            _replay_one(state, rec, log.world)
        except RuleViolation as exc:
            violations.append(RuleViolation(exc.rule, exc.message, i))
        except (ScheduleError, ModelError, ValueError):
            # not a rule problem; apply() reports it with the record index
            continue
    return sorted(violations, key=lambda v: (v.index, v.rule))


@dataclass
class EquivalenceReport:
    trials: int
    max_abs_diff: float
    max_rel_diff: float
    atol: float
    rtol: float
    passed: bool
    seeds: list[int] = field(default_factory=list)
    vacuous: bool = False
    sampled_not_proven: bool = True
    notes: list[str] = field(default_factory=list)

    def summary(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        lines = [
            f"status: {status}",
            f"trials: {self.trials}" + (" (vacuous)" if self.vacuous else ""),
            f"max_abs_diff: {self.max_abs_diff:.6e}",
            f"max_rel_diff: {self.max_rel_diff:.6e}",
            f"tolerance: atol={self.atol:g} rtol={self.rtol:g}",
            "note: sampled, not proven",
        ]
        lines += [f"note: {n}" for n in self.notes]
        return "\n".join(lines)


def standard_normal_inputs(seed: int, specs: Sequence[TensorSpec]) -> list[np.ndarray]:
    rng = np.random.default_rng(seed)
    return [rng.standard_normal(s.shape).astype(NUMPY_DTYPE[s.dtype]) for s in specs]


def _diffs(got: Sequence[np.ndarray], want: Sequence[np.ndarray]) -> tuple[float, float]:
    """Max absolute difference, and that difference relative to the largest reference magnitude."""
    if len(got) != len(want):
        return float("inf"), float("inf")
    abs_d = scale = 0.0
    for g, w in zip(got, want):
        g, w = np.asarray(g), np.asarray(w)
        if g.shape != w.shape:
            return float("inf"), float("inf")
        if g.size == 0:
            continue
        abs_d = max(abs_d, float(np.max(np.abs(g - w))))
        scale = max(scale, float(np.max(np.abs(w))))
    if scale > 0:
        return abs_d, abs_d / scale
    return abs_d, 0.0 if abs_d == 0 else float("inf")


def _report(trials: int, seeds: list[int], diffs: list[tuple[float, float]], atol: float, rtol: float,
            notes: list[str] | None = None, extra_fail: bool = False) -> EquivalenceReport:
    max_abs = max((d[0] for d in diffs), default=0.0)
    max_rel = max((d[1] for d in diffs), default=0.0)
    passed = all(a <= atol and r <= rtol for a, r in diffs) and not extra_fail
    return EquivalenceReport(trials, max_abs, max_rel, atol, rtol, passed, seeds, vacuous=trials == 0,
                             notes=list(notes or []))


def verify_module(original: ModuleDef, replacement: ModuleDef, n: int = DEFAULT_TRIALS,
                  gen: InputGen | None = None, atol: float = DEFAULT_ATOL, rtol: float = DEFAULT_RTOL,
                  in_specs: Sequence[TensorSpec] | None = None, seed: int = 0) -> EquivalenceReport:
    """Compare two modules on ``n`` seeded random inputs (verify mode).

    Input specs default to the shapes declared on ``original``'s input nodes.
    """
    from .ir.shapes import ShapeError, infer_module

    specs = list(in_specs) if in_specs is not None else model_input_specs(original)
    try:
        want = infer_module(original, specs)
        got = infer_module(replacement, specs)
    except (ShapeError, ModelError) as exc:
        raise RuleViolation("R4", f"replacement rejects the original's inputs: {exc}") from None
    if list(want) != list(got):
        raise RuleViolation("R4", f"replacement outputs {[str(s) for s in got]}, expected {[str(s) for s in want]}")
    gen = gen or standard_normal_inputs
    seeds = [seed + t for t in range(n)]
    diffs = []
    for s in seeds:
        xs = gen(s, specs)
        if [TensorSpec.of(x) for x in xs] != specs:
            raise ValueError(f"input generator produced {[x.shape for x in xs]}, expected {[s.shape for s in specs]}")
        a = forward(original, xs).outputs
        b = forward(replacement, xs).outputs
        diffs.append(_diffs(b, a))
    return _report(n, seeds, diffs, atol, rtol)


def _uses_collectives(model: ModuleDef) -> bool:
    for _, mod in model.walk():
        if any(p.shard is not None for p in mod.params):
            return True
        if mod.forward is not None and any(n.op in ("all_reduce", "all_gather") for n in mod.forward):
            return True
    return False


def _shape_problems(original: ModuleDef, scheduled: ModuleDef) -> list[str]:
    orig = dict(original.all_params())
    problems = []
    for path, p in scheduled.all_params():
        if path in orig and p.full_spec != orig[path].spec:
            problems.append(f"{path}: sharded spec {p.spec} reassembles to {p.full_spec}, original is {orig[path].spec}")
    return problems


def run_scheduled(result: ApplyResult, inputs: Sequence[np.ndarray], world: WorldConfig,
                  micro_batches: int = 1, mode: str = "verify", seed: int = 0) -> list[np.ndarray]:
    """Rank-0 outputs of a scheduled model on the execution path its schedule implies."""
    ranks = world.world_size if _uses_collectives(result.model) else 1
    if result.stages is not None:
        return run_pipeline(result.stages, inputs, micro_batches, ranks, mode, seed).outputs
    if ranks > 1:
        return run_sharded(result.model, inputs, ranks, mode, seed).rank0
    return forward(result.model, inputs, mode, seed).outputs


def verify_end_to_end(original: ModuleDef, result: ApplyResult, world: WorldConfig,
                      n: int = DEFAULT_TRIALS, atol: float = DEFAULT_ATOL, rtol: float = DEFAULT_RTOL,
                      gen: InputGen | None = None, seed: int = 0, micro_batches: int = 1,
                      grads: bool = False) -> EquivalenceReport:
    """Scheduled vs original outputs (and optionally parameter gradients) on random inputs."""
    notes = _shape_problems(original, result.model)
    specs = model_input_specs(original)
    gen = gen or standard_normal_inputs
    seeds = [seed + t for t in range(n)]
    diffs = []
    for s in seeds:
        xs = gen(s, specs)
        want = forward(original, xs).outputs
        got = run_scheduled(result, xs, world, micro_batches)
        diffs.append(_diffs(got, want))
        if grads:
            diffs.append(_grad_diffs(original, result.model, xs, world))
    return _report(n, seeds, diffs, atol, rtol, notes, extra_fail=bool(notes))


def _grad_diffs(original: ModuleDef, scheduled: ModuleDef, xs: Sequence[np.ndarray],
                world: WorldConfig) -> tuple[float, float]:
    ref = backward(original, xs).params
    ranks = world.world_size if _uses_collectives(scheduled) else 1
    res = run_sharded(scheduled, xs, ranks, grads=True)
    defs = dict(scheduled.all_params())
    got, want = [], []
    for path, g in ref.items():
        if path not in defs:
            continue
        info = defs[path].shard
        pieces = [m.params[path] for m in res.grads]
        got.append(unshard(pieces, info) if info is not None else pieces[0])
        want.append(g)
    return _diffs(got, want)
