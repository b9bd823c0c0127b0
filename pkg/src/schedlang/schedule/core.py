"""Schedule tree, primitive log and replay.

Primitives are only recorded when called. A preview model (the log replayed
so far, skipping records that fail) backs navigation and ``find``; the real
replay happens in :func:`apply` after the rule check passes.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Any, Iterator, Sequence

from ..config import WorldConfig
from ..errors import RuleViolation, ScheduleError
from ..ir.module import ModelError, ModuleDef, join_path, resolve_paths, split_path
from ..tracer import TraceError, TracedModule, TraceSpec, apply_trace, trace
from . import transforms as tf
from .library import lookup
from .matcher import Pattern, SubgraphMatch, find_in_graph, find_paths
from .pipeline import PipelineStagePlan, partition_model

logger = logging.getLogger(__name__)

PRIMITIVES = ("replace", "shard", "sync", "checkpoint", "trace", "find", "fuse", "pipeline_split")


@dataclass(frozen=True)
class PrimitiveRecord:
    primitive: str
    site: str
    args: dict[str, Any] = field(default_factory=dict)

    def describe(self) -> str:
        shown = ", ".join(f"{k}={_short(v)}" for k, v in self.args.items() if v is not None)
        return f"{self.primitive} {self.site or '<root>'}" + (f" ({shown})" if shown else "")


def _short(v: Any) -> str:
    if isinstance(v, ModuleDef):
        return f"<{v.kind} {v.name}>"
    if isinstance(v, SubgraphMatch):
        return f"match{list(v.nodes)}"
    if isinstance(v, Pattern):
        return f"pattern {v.name}"
    return repr(v)


@dataclass
class ReplayState:
    model: ModuleDef
    traces: dict[str, TracedModule] = field(default_factory=dict)
    failed: dict[int, ScheduleError] = field(default_factory=dict)


def _replay_one(state: ReplayState, rec: PrimitiveRecord, world: WorldConfig) -> None:
    m = state.model
    a = rec.args
    site = rec.site
    if rec.primitive == "trace":
        try:
            traced = trace(m, site, a["spec"])
        except (TraceError, ModelError) as exc:
            raise ScheduleError(str(exc)) from None
        state.model = apply_trace(m, site, traced)
        state.traces[site] = traced
    elif rec.primitive == "find":
        return
    elif rec.primitive == "replace":
        entry = lookup(a["library"]) if a.get("library") else None
        match = a.get("match")
        if match is None:
            if a.get("module") is not None:
                new = a["module"]
                build = lambda old: new  # noqa: E731
            elif entry is not None and entry.from_module is not None:
                build = lambda old: entry.from_module(old, old.name)  # noqa: E731
            else:
                raise ScheduleError(f"{a.get('library')} cannot replace a whole module")
            state.model = tf.replace_module(m, site, build)
        else:
            if a.get("module") is not None:
                new = a["module"]
                build_region = lambda callees: new  # noqa: E731
            elif entry is not None and entry.from_region is not None:
                build_region = lambda callees: entry.from_region(callees, a.get("name") or entry.name.lower())  # noqa: E731
            else:
                raise ScheduleError(f"{a.get('library')} cannot replace a subgraph")
            state.model = tf.replace_region(m, site, match.nodes, build_region, a.get("name"))
    elif rec.primitive == "shard":
        state.model = tf.shard_params(m, site, a["params"], a["axis"], world.world_size)
    elif rec.primitive == "sync":
        state.model = tf.insert_sync(m, site, a["type"], world.world_size)
    elif rec.primitive == "checkpoint":
        match = a.get("match")
        if match is None:
            state.model = tf.set_checkpoint(m, site)
        else:
            state.model, _ = tf.checkpoint_region(m, site, match.nodes)
    elif rec.primitive == "fuse":
        match = a["match"]
        state.model, _ = tf.fuse_region(m, site, match.nodes, a["backend"], match.pattern)
    elif rec.primitive == "pipeline_split":
        state.model = tf.annotate_split(m, site, a["after"], world.world_size)
    else:
        raise ScheduleError(f"unknown primitive {rec.primitive!r}")


def replay(model: ModuleDef, records: Sequence[PrimitiveRecord], world: WorldConfig,
           strict: bool = True, skip: set[int] | None = None, start: ReplayState | None = None,
           offset: int = 0) -> ReplayState:
    state = start or ReplayState(model)
    for i, rec in enumerate(records, offset):
        if skip and i in skip:
            continue
        try:
            _replay_one(state, rec, world)
        except ScheduleError as exc:
            exc.index = i
            if strict:
                if isinstance(exc, RuleViolation):
                    raise
                raise ScheduleError(f"record {i} ({rec.describe()}): {exc}", exc.rule, i) from None
            state.failed[i] = exc
        except (ModelError, ValueError) as exc:
            if strict:
                raise ScheduleError(f"record {i} ({rec.describe()}): {exc}", None, i) from None
            state.failed[i] = ScheduleError(str(exc), None, i)
    return state


class _Log:
    """State shared by every node of one schedule tree."""

    def __init__(self, model: ModuleDef, world: WorldConfig) -> None:
        self.model = model
        self.world = world
        self.records: list[PrimitiveRecord] = []
        self.patterns: dict[str, Pattern] = {}
        self._preview: ReplayState | None = None
        self._preview_len = 0

    def record(self, rec: PrimitiveRecord) -> int:
        if rec.primitive not in PRIMITIVES:
            raise ScheduleError(f"unknown primitive {rec.primitive!r}")
        self.records.append(rec)
        return len(self.records) - 1

    def preview(self) -> ReplayState:
        if self._preview is None:
            self._preview = ReplayState(self.model)
            self._preview_len = 0
        n = len(self.records)
        if self._preview_len < n:
            replay(self.model, self.records[self._preview_len:], self.world, strict=False,
                   start=self._preview, offset=self._preview_len)
            self._preview_len = n
        return self._preview


class Schedule:
    """Handle on one node of the schedule tree (the module at ``path``)."""

    def __init__(self, log: _Log, path: str = "") -> None:
        self._log = log
        self.path = path

    # -- navigation ----------------------------------------------------
    @property
    def world(self) -> WorldConfig:
        return self._log.world

    @property
    def module(self) -> ModuleDef:
        return self._log.preview().model.get(self.path)

    @property
    def original(self) -> ModuleDef:
        return self._log.model

    @property
    def children(self) -> dict[str, "Schedule"]:
        return {name: Schedule(self._log, join_path(self.path, name)) for name in self.module.submodules}

    @property
    def parent(self) -> "Schedule | None":
        if not self.path:
            return None
        return Schedule(self._log, ".".join(split_path(self.path)[:-1]))

    @property
    def records(self) -> list[PrimitiveRecord]:
        return list(self._log.records)

    @property
    def log(self) -> list[PrimitiveRecord]:
        return [r for r in self._log.records if r.site == self.path]

    @property
    def trace_state(self) -> TracedModule | None:
        return self._log.preview().traces.get(self.path)

    @property
    def patterns(self) -> dict[str, Pattern]:
        return self._log.patterns

    def __getitem__(self, rel: str) -> "Schedule":
        path = join_path(self.path, rel)
        if not self._log.preview().model.has(path):
            raise KeyError(f"no module at {path!r}")
        return Schedule(self._log, path)

    def select(self, pattern: str) -> list["Schedule"]:
        """Schedules for every module under this one matching a glob (sorted)."""
        base = self.module
        return [Schedule(self._log, join_path(self.path, p)) for p in resolve_paths(base, pattern)]

    def walk(self) -> Iterator["Schedule"]:
        yield self
        for child in self.children.values():
            yield from child.walk()

    def __repr__(self) -> str:
        return f"Schedule({self.path or '<root>'})"

    def _record(self, primitive: str, **args: Any) -> int:
        return self._log.record(PrimitiveRecord(primitive, self.path, args))

    # -- primitives ----------------------------------------------------
    def replace(self, new_module: ModuleDef | str, subgraph: SubgraphMatch | None = None,
                name: str | None = None) -> None:
        """Swap this module (or a matched region of its graph) for ``new_module``.

        ``new_module`` may be a ModuleDef or the name of a library module.
        """
        self._check_match(subgraph)
        if isinstance(new_module, str):
            lookup(new_module)
            self._record("replace", library=new_module, module=None, match=subgraph, name=name)
        else:
            self._record("replace", library=None, module=new_module, match=subgraph, name=name)

    def shard(self, params: str | Sequence[str], axis: int) -> None:
        names = (params,) if isinstance(params, str) else tuple(params)
        self._record("shard", params=names, axis=int(axis))

    def sync(self, type: str = "forward") -> None:  # noqa: A002 - mirrors the primitive's keyword
        if type not in ("forward", "backward", "both"):
            raise ScheduleError(f"unknown sync type {type!r}")
        self._record("sync", type=type)

    def checkpoint(self, subgraph: SubgraphMatch | None = None) -> None:
        self._check_match(subgraph)
        self._record("checkpoint", match=subgraph)

    def trace(self, leaves: Sequence[str] = (), flatten: bool = False) -> TracedModule:
        spec = TraceSpec(tuple(leaves), bool(flatten))
        try:
            traced = trace(self._log.preview().model, self.path, spec)
        except (TraceError, ModelError) as exc:
            raise ScheduleError(str(exc)) from None
        self._record("trace", spec=spec)
        return traced

    def find(self, pattern: str | Pattern) -> list[SubgraphMatch]:
        """Name glob (or ``re:`` regex) over submodule paths, or a graph pattern over this graph."""
        model = self._log.preview().model
        if isinstance(pattern, str):
            self._record("find", pattern=pattern)
            return find_paths(model, self.path, pattern)
        mod = model.get(self.path)
        if mod.forward is None:
            raise ScheduleError(f"{self.path}: builtin modules have no graph to search")
        if self.path not in self._log.preview().traces and not self._traced_by_ancestor():
            logger.warning("find on %s: module has not been traced", self.path or "<root>")
        self._record("find", pattern=pattern.name)
        self._log.patterns.setdefault(pattern.name, pattern)
        return find_in_graph(pattern, mod.forward, mod, self.path)

    def fuse(self, match: SubgraphMatch, backend: str = "composed") -> None:
        if backend not in tf.FUSE_BACKENDS:
            raise ScheduleError(f"unknown fusion backend {backend!r}")
        self._check_match(match)
        self._record("fuse", match=match, backend=backend)

    def pipeline_split(self, after: str | int) -> None:
        self._record("pipeline_split", after=after)

    # -- helpers -------------------------------------------------------
    def _check_match(self, match: SubgraphMatch | None) -> None:
        if match is not None and match.site != self.path:
            raise ScheduleError(f"match belongs to {match.site or '<root>'}, not {self.path or '<root>'}")
        if match is not None and not match.nodes:
            raise ScheduleError("a name match cannot be used as a subgraph")

    def _traced_by_ancestor(self) -> bool:
        traces = self._log.preview().traces
        return any(p != self.path and _is_ancestor(p, self.path) for p in traces)


def _is_ancestor(anc: str, path: str) -> bool:
    return anc == "" or path.startswith(anc + ".")


def create_schedule(model: ModuleDef, world: WorldConfig | None = None) -> Schedule:
    model.validate()
    return Schedule(_Log(model, world or WorldConfig()))


@dataclass(frozen=True)
class ApplyResult:
    model: ModuleDef
    stages: PipelineStagePlan | None = None


def apply(sch: Schedule) -> ApplyResult:
    """Check the rules, replay the whole log on the original model, then partition pipelines."""
    from ..verifier import validate_rules

    violations = validate_rules(sch)
    if violations:
        raise violations[0]
    log = sch._log
    state = replay(log.model, log.records, log.world, strict=True)
    model = state.model
    try:
        model.validate()
    except ModelError as exc:
        raise ScheduleError(f"scheduled model is invalid: {exc}") from None
    _, stages = partition_model(model)
    return ApplyResult(model, stages)
