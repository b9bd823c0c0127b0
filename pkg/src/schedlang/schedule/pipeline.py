"""Pipeline partitioning driven by ``pipeline_splits`` annotations.

Each annotated module is cut into pieces at its marked call boundaries; the
pieces replace the module inside its parent, which inherits the boundaries.
This repeats upward until the root is cut into the final stage sequence.
Values that later pieces still need are threaded through every piece in
between (liveness over the module graph), so each piece only talks to its
neighbours.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable

from ..errors import ScheduleError
from ..ir.graph import GraphNode, StaticGraph
from ..ir.module import ModuleDef, join_path, parent_path, split_path

SPLITS = "pipeline_splits"


@dataclass(frozen=True)
class StageIO:
    consumes: tuple[str, ...]
    produces: tuple[str, ...]


@dataclass(frozen=True)
class Stage:
    module: ModuleDef
    io: StageIO


@dataclass(frozen=True)
class PipelineStagePlan:
    stages: tuple[Stage, ...]

    def __len__(self) -> int:
        return len(self.stages)

    @property
    def inputs(self) -> tuple[str, ...]:
        return self.stages[0].io.consumes

    @property
    def outputs(self) -> tuple[str, ...]:
        return self.stages[-1].io.produces


@dataclass(frozen=True)
class _Piece:
    module: ModuleDef
    consumes: tuple[int, ...]
    produces: tuple[int, ...]


def value_name(nid: int) -> str:
    return f"%{nid}"


def _marker_node(graph: StaticGraph, marker: str | int, where: str) -> GraphNode:
    if isinstance(marker, int):
        return graph.node(marker)
    calls = [n for n in graph if n.kind == "call_module" and n.target == marker]
    if len(calls) != 1:
        raise ScheduleError(f"{where}: split boundary {marker!r} must name exactly one call, found {len(calls)}")
    return calls[0]


def split_module(mod: ModuleDef, path: str) -> list[_Piece]:
    """Cut ``mod`` at its annotated boundaries into consecutive pieces."""
    where = path or "<root>"
    graph = mod.forward
    if graph is None:
        raise ScheduleError(f"{where}: cannot partition a builtin module")
    body = [n for n in graph if n.kind not in ("input", "output", "param_ref")]
    params = {n.id: n for n in graph if n.kind == "param_ref"}
    index = {n.id: i for i, n in enumerate(body)}
    cuts = set()
    for marker in mod.attrs.get(SPLITS, []):
        node = _marker_node(graph, marker, where)
        i = index[node.id]
        while i + 1 < len(body) and body[i + 1].kind == "get_item" and body[i + 1].args == (node.id,):
            i += 1
        cuts.add(i)
    ranges: list[list[GraphNode]] = []
    start = 0
    for c in sorted(cuts) + [len(body) - 1]:
        ranges.append(body[start:c + 1])
        start = c + 1
    if any(not r for r in ranges):
        raise ScheduleError(f"{where}: a split boundary leaves an empty stage")
    for n in body:
        if n.kind == "call_module" and "." in n.target:
            raise ScheduleError(f"{where}: cannot partition a flattened graph calling {n.target!r}")

    tuple_valued = {n.args[0] for n in body if n.kind == "get_item"}
    outputs = graph.output_node.args
    owner: dict[int, int] = {}
    for i, rng in enumerate(ranges):
        for n in rng:
            for a in n.args:
                if a in params:
                    if owner.setdefault(a, i) != i:
                        raise ScheduleError(f"{where}: parameter {params[a].target!r} is used on both sides of a split")

    pieces = []
    carried = tuple(graph.input_ids)
    for i, rng in enumerate(ranges):
        defined = [n.id for n in rng]
        if i == len(ranges) - 1:
            produces = tuple(outputs)
        else:
            later = {a for r in ranges[i + 1:] for n in r for a in n.args} | set(outputs)
            produces = tuple(v for v in (*carried, *defined) if v in later)
        for v in produces:
            if v in tuple_valued:
                raise ScheduleError(f"{where}: multi-output value {v} would cross a split boundary")
        pieces.append(_Piece(_piece_module(mod, path, i, rng, carried, produces, params, graph), carried, produces))
        carried = produces
    return pieces


def _piece_module(mod: ModuleDef, path: str, i: int, rng: list[GraphNode], consumes: tuple[int, ...],
                  produces: tuple[int, ...], params: dict[int, GraphNode], graph: StaticGraph) -> ModuleDef:
    used_params = sorted({a for n in rng for a in n.args if a in params}, key=graph.position)
    originals = set(graph.input_ids)
    nodes = [GraphNode(v, "input", attrs=graph.node(v).attrs if v in originals else {}) for v in consumes]
    nodes += [params[p] for p in used_params]
    nodes += rng
    nodes.append(GraphNode(graph.output_node.id, "output", args=produces))
    subs = {n.target: mod.submodules[n.target] for n in rng if n.kind == "call_module"}
    pnames = {params[p].target for p in used_params}
    attrs = {k: v for k, v in mod.attrs.items() if k not in (SPLITS, "origin")}
    attrs["origin"] = mod.attrs.get("origin", path)
    attrs["pipeline_piece"] = i
    return ModuleDef(f"{mod.name}_pp{i}", params=tuple(p for p in mod.params if p.name in pnames),
                     submodules=subs, forward=StaticGraph(tuple(nodes)), attrs=attrs)


def inline_pieces(parent: ModuleDef, child: str, pieces: list[_Piece]) -> ModuleDef:
    """Replace the parent's call to ``child`` by a chain of calls to the pieces."""
    graph = parent.forward
    calls = [n for n in graph if n.kind == "call_module" and n.target == child]
    if len(calls) != 1:
        raise ScheduleError(f"{parent.name}: partitioned child {child!r} must be called exactly once")
    call = calls[0]
    names = [f"{child}_pp{i}" for i in range(len(pieces))]
    clash = set(names) & (set(parent.submodules) | {p.name for p in parent.params})
    if clash:
        raise ScheduleError(f"{parent.name}: name clash {sorted(clash)} while inlining pipeline pieces")
    next_id = graph.next_id()
    chain: list[GraphNode] = []
    args: tuple[int, ...] = call.args
    outs: tuple[int, ...] = ()
    for name, piece in zip(names, pieces):
        cid = next_id
        next_id += 1
        chain.append(GraphNode(cid, "call_module", target=name, args=args))
        if len(piece.produces) == 1:
            outs = (cid,)
        else:
            outs = tuple(range(next_id, next_id + len(piece.produces)))
            chain += [GraphNode(o, "get_item", args=(cid,), attrs={"index": k}) for k, o in enumerate(outs)]
            next_id += len(piece.produces)
        args = outs

    alias: dict[int, int] = {}
    if len(outs) == 1:
        alias[call.id] = outs[0]
    nodes: list[GraphNode] = []
    for n in graph:
        if n.id == call.id:
            nodes.extend(chain)
            continue
        if n.kind == "get_item" and n.args == (call.id,):
            alias[n.id] = outs[int(n.attrs["index"])]
            continue
        if any(a in alias for a in n.args):
            n = n.with_args(alias.get(a, a) for a in n.args)
        nodes.append(n)
    subs = {}
    for k, v in parent.submodules.items():
        if k == child:
            subs.update({name: p.module.update(name=name) for name, p in zip(names, pieces)})
        else:
            subs[k] = v
    splits = list(parent.attrs.get(SPLITS, [])) + names[:-1]
    return parent.update(forward=StaticGraph(tuple(nodes)), submodules=subs,
                         attrs={**parent.attrs, SPLITS: splits})


def annotated_paths(root: ModuleDef) -> list[str]:
    """Paths of modules carrying split annotations, deepest first."""
    found = [p for p, m in root.walk() if m.attrs.get(SPLITS)]
    return sorted(found, key=lambda p: (-len(split_path(p)), p))


def find_common_parent(paths: Iterable[str]) -> str:
    parents = [split_path(parent_path(p)) if p else [] for p in paths]
    if not parents:
        raise ScheduleError("no annotated modules")
    common = parents[0]
    for segs in parents[1:]:
        k = 0
        while k < min(len(common), len(segs)) and common[k] == segs[k]:
            k += 1
        common = common[:k]
    return ".".join(common)


def _under(path: str, anc: str) -> bool:
    return anc == "" or path == anc or path.startswith(anc + ".")


def _partition_up(model: ModuleDef, path: str, stop: str | None, pending: set[str]) -> ModuleDef:
    """Partition ``path`` and carry the boundaries upward until ``stop`` (or the root)."""
    while path:
        pieces = split_module(model.get(path), path)
        parent = parent_path(path)
        child = split_path(path)[-1]
        model = model.replace_at(parent, inline_pieces(model.get(parent), child, pieces))
        if parent == stop or not parent or any(_under(p, parent) for p in pending):
            break
        path = parent
    return model


def partition_model(model: ModuleDef) -> tuple[ModuleDef, PipelineStagePlan | None]:
    """Propagate every annotation up to the root and cut the root into stages."""
    subs = annotated_paths(model)
    if not subs:
        return model, None
    common = find_common_parent(subs)
    pending = set(subs)
    for sub in subs:
        pending.discard(sub)
        if sub == common:
            continue
        model = _partition_up(model, sub, common, pending)
    if common:
        model = _partition_up(model, common, None, set())
    pieces = split_module(model, "")
    stages = []
    for i, piece in enumerate(pieces):
        io = StageIO(tuple(value_name(v) for v in piece.consumes), tuple(value_name(v) for v in piece.produces))
        stages.append(Stage(piece.module.update(name=f"stage{i}"), io))
    return model, PipelineStagePlan(tuple(stages))


def origin_leaves(stage: ModuleDef) -> list[str]:
    """Original paths of the builtin leaves inside a stage module."""
    out: list[str] = []

    def walk(mod: ModuleDef, orig: str) -> None:
        if mod.is_builtin:
            out.append(orig)
            return
        for name, sub in mod.submodules.items():
            walk(sub, sub.attrs["origin"] if "origin" in sub.attrs else join_path(orig, name))

    walk(stage, stage.attrs.get("origin", ""))
    return out
