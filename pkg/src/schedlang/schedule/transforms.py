"""Pure model rewrites behind each primitive. Every function returns a new tree."""
from __future__ import annotations

import heapq
import logging
from dataclasses import dataclass, replace
from typing import Any, Callable, Sequence

from ..errors import RuleViolation, ScheduleError
from ..ir.graph import GraphError, GraphNode, StaticGraph
from ..ir.module import ModelError, ModuleDef, ShardInfo, join_path, split_path
from ..ir.shapes import ShapeError, infer_module, trace_shapes
from ..ir.tensor import TensorSpec

logger = logging.getLogger(__name__)

FUSE_BACKENDS = {"composed"}


def _module(root: ModuleDef, path: str) -> ModuleDef:
    try:
        return root.get(path)
    except ModelError as exc:
        raise ScheduleError(str(exc)) from None


def _composite(root: ModuleDef, path: str) -> ModuleDef:
    mod = _module(root, path)
    if mod.is_builtin:
        raise ScheduleError(f"{path or '<root>'} is a builtin {mod.kind} and has no graph")
    return mod


def _fmt(specs: Sequence[TensorSpec]) -> str:
    return "(" + ", ".join(str(s) for s in specs) + ")"


def _check_interface(new: ModuleDef, ins: Sequence[TensorSpec], outs: Sequence[TensorSpec], where: str) -> None:
    try:
        got = infer_module(new, ins, new.name)
    except (ShapeError, ModelError) as exc:
        raise RuleViolation("R4", f"{where}: replacement rejects inputs {_fmt(ins)}: {exc}") from None
    if list(got) != list(outs):
        raise RuleViolation("R4", f"{where}: replacement produces {_fmt(got)}, expected {_fmt(outs)}")


def _stable_toposort(nodes: list[GraphNode], priority: dict[int, tuple]) -> list[GraphNode]:
    by_id = {n.id: n for n in nodes}
    pending = {n.id: sum(1 for a in set(n.args)) for n in nodes}
    users: dict[int, list[int]] = {n.id: [] for n in nodes}
    for n in nodes:
        for a in set(n.args):
            users[a].append(n.id)
    heap = [(priority[i], i) for i, c in pending.items() if c == 0]
    heapq.heapify(heap)
    out = []
    while heap:
        _, nid = heapq.heappop(heap)
        out.append(by_id[nid])
        for u in users[nid]:
            pending[u] -= 1
            if pending[u] == 0:
                heapq.heappush(heap, (priority[u], u))
    if len(out) != len(nodes):
        raise ScheduleError("rewrite produced a cyclic graph")
    return out


# -- regions ---------------------------------------------------------------

@dataclass(frozen=True)
class Region:
    nodes: tuple[int, ...]  # in graph order
    inputs: tuple[int, ...]  # external values, first-use order
    outputs: tuple[int, ...]  # escaping values, graph order


def region_of(graph: StaticGraph, node_ids: Sequence[int], keep_params: bool = False) -> Region:
    """Boundary of a node set. ``param_ref`` nodes stay outside unless ``keep_params``."""
    wanted = set(node_ids)
    for nid in wanted:
        if nid not in graph:
            raise ScheduleError(f"match refers to node {nid}, which is not in the graph")
        if graph.node(nid).kind in ("input", "output"):
            raise ScheduleError(f"match may not contain {graph.node(nid).kind} node {nid}")
    if not keep_params:
        wanted = {n for n in wanted if graph.node(n).kind != "param_ref"}
    if not wanted:
        raise ScheduleError("match contains no operator nodes")
    members = [n for n in graph if n.id in wanted]
    inputs: list[int] = []
    for n in members:
        for a in n.args:
            if a not in wanted and a not in inputs:
                inputs.append(a)
    escaping = []
    for n in members:
        if any(n.id in u.args for u in graph if u.id not in wanted):
            escaping.append(n.id)
    # convexity: no path may leave the region and come back
    tainted: set[int] = set()
    for n in graph:
        if n.id in wanted:
            continue
        if any(a in wanted or a in tainted for a in n.args):
            tainted.add(n.id)
    for n in members:
        if any(a in tainted for a in n.args):
            raise ScheduleError("matched region is not convex (a value leaves and re-enters it)")
    return Region(tuple(n.id for n in members), tuple(inputs), tuple(escaping))


def _tuple_valued(graph: StaticGraph, nid: int) -> bool:
    return any(u.kind == "get_item" and u.args == (nid,) for u in graph)


def collapse(graph: StaticGraph, region: Region, target: str, n_outputs: int) -> StaticGraph:
    """Replace the region by one call to ``target`` whose outputs stand in for the escaping values."""
    if len(region.outputs) != n_outputs:
        raise ScheduleError(f"region has {len(region.outputs)} escaping values, replacement returns {n_outputs}")
    for o in region.outputs:
        if _tuple_valued(graph, o) and not all(u.id in region.nodes for u in graph if o in u.args):
            raise ScheduleError(f"multi-output value {o} escapes the region; include its get_item nodes")
    nid = graph.next_id()
    last = max(graph.position(n) for n in region.nodes)
    call = GraphNode(nid, "call_module", target=target, args=region.inputs)
    new_nodes = [call]
    prio: dict[int, tuple] = {nid: (last, 0)}
    alias: dict[int, int] = {}
    if n_outputs == 1:
        alias[region.outputs[0]] = nid
    else:
        for i, o in enumerate(region.outputs):
            item = GraphNode(nid + 1 + i, "get_item", args=(nid,), attrs={"index": i})
            new_nodes.append(item)
            prio[item.id] = (last, 1 + i)
            alias[o] = item.id
    members = set(region.nodes)
    kept = []
    for n in graph:
        if n.id in members:
            continue
        if any(a in alias for a in n.args):
            n = n.with_args(alias.get(a, a) for a in n.args)
        kept.append(n)
        prio[n.id] = (graph.position(n.id), 0)
    ordered = _stable_toposort(kept + new_nodes, prio)
    out = StaticGraph(tuple(ordered))
    try:
        out.validate()
    except GraphError as exc:
        raise ScheduleError(f"rewrite produced an invalid graph: {exc}") from None
    return out


def _prune(mod: ModuleDef, graph: StaticGraph, touched: set[str]) -> ModuleDef:
    """Drop dead param_refs, then any of the ``touched`` params/submodules nothing references any more."""
    while True:
        users = graph.users()
        dead = {n.id for n in graph if n.kind == "param_ref" and not users.get(n.id)}
        if not dead:
            break
        graph = StaticGraph(tuple(n for n in graph if n.id not in dead))
    used = {split_path(n.target)[0] for n in graph if n.kind in ("call_module", "param_ref")}
    gone = touched - used
    subs = {k: v for k, v in mod.submodules.items() if k not in gone}
    params = tuple(p for p in mod.params if p.name not in gone)
    return mod.update(forward=graph, submodules=subs, params=params)


def _touched(graph: StaticGraph, region: Region) -> set[str]:
    return {split_path(graph.node(n).target)[0] for n in region.nodes
            if graph.node(n).kind in ("call_module", "param_ref")}


def _fresh_name(mod: ModuleDef, stem: str) -> str:
    taken = set(mod.submodules) | {p.name for p in mod.params}
    if stem not in taken:
        return stem
    i = 0
    while f"{stem}_{i}" in taken:
        i += 1
    return f"{stem}_{i}"


def extract_module(mod: ModuleDef, graph: StaticGraph, region: Region, name: str,
                   attrs: dict[str, Any]) -> ModuleDef:
    """Synthesize a composite module computing ``region`` (external values become inputs)."""
    nodes: list[GraphNode] = []
    remap: dict[int, int] = {}
    for i, v in enumerate(region.inputs):
        nodes.append(GraphNode(i, "input"))
        remap[v] = i
    subs: dict[str, ModuleDef] = {}
    for nid in region.nodes:
        n = graph.node(nid)
        if n.kind == "call_module":
            if "." in n.target:
                raise ScheduleError(
                    f"region calls nested module {n.target!r}; trace hierarchically (flatten=false) to schedule it"
                )
            subs[n.target] = mod.get(n.target)
        if n.kind == "param_ref":
            raise ScheduleError("internal: param_ref inside an extracted region")
        new_id = len(nodes)
        nodes.append(replace(n, id=new_id, args=tuple(remap[a] for a in n.args)))
        remap[nid] = new_id
    nodes.append(GraphNode(len(nodes), "output", args=tuple(remap[o] for o in region.outputs)))
    return ModuleDef(name, submodules=subs, forward=StaticGraph(tuple(nodes)), attrs=attrs)


def wrap_region(root: ModuleDef, site: str, node_ids: Sequence[int], stem: str, attrs: dict[str, Any],
                single_output: bool = False) -> tuple[ModuleDef, str]:
    mod = _composite(root, site)
    graph = mod.forward
    region = region_of(graph, node_ids)
    if single_output and len(region.outputs) != 1:
        raise ScheduleError(f"match has {len(region.outputs)} escaping values; fusion needs exactly one")
    name = _fresh_name(mod, stem)
    new_sub = extract_module(mod, graph, region, name, attrs)
    new_graph = collapse(graph, region, name, len(region.outputs))
    new_mod = _prune(mod.update(submodules={**mod.submodules, name: new_sub}), new_graph, _touched(graph, region))
    return root.replace_at(site, new_mod), join_path(site, name)


# -- primitives ------------------------------------------------------------

def replace_module(root: ModuleDef, path: str, build: Callable[[ModuleDef], ModuleDef]) -> ModuleDef:
    if not path:
        raise ScheduleError("cannot replace the root module")
    old = _module(root, path)
    new = build(old)
    new = new.update(name=split_path(path)[-1])
    sig = trace_shapes(root).signatures.get(path)
    if sig is None:
        raise ScheduleError(f"{path} is never called, so its interface is unknown")
    _check_interface(new, sig[0], sig[1], path)
    try:
        new.validate()
    except ModelError as exc:
        raise ScheduleError(f"replacement for {path} is invalid: {exc}") from None
    return root.replace_at(path, new)


def replace_region(root: ModuleDef, site: str, node_ids: Sequence[int],
                   build: Callable[[list[ModuleDef]], ModuleDef], name: str | None = None) -> ModuleDef:
    """Swap a matched region for one call to a new submodule of ``site``."""
    mod = _composite(root, site)
    graph = mod.forward
    region = region_of(graph, node_ids, keep_params=True)
    callees = [mod.get(graph.node(n).target) for n in region.nodes if graph.node(n).kind == "call_module"]
    new = build(callees)
    name = _fresh_name(mod, name or new.name or "replaced")
    new = new.update(name=name)
    node_specs = trace_shapes(root).node_specs.get(site)
    if node_specs is None:
        raise ScheduleError(f"{site or '<root>'} is never called, so the region's shapes are unknown")
    ins = [node_specs[i] for i in region.inputs]
    outs = [node_specs[o] for o in region.outputs]
    if any(isinstance(s, tuple) for s in ins + outs):
        raise ScheduleError("region boundary carries a multi-output value")
    _check_interface(new, ins, outs, f"{site or '<root>'} region {list(region.nodes)}")
    new_graph = collapse(graph, region, name, len(region.outputs))
    new_mod = _prune(mod.update(submodules={**mod.submodules, name: new}), new_graph, _touched(graph, region))
    return root.replace_at(site, new_mod)


def shard_params(root: ModuleDef, path: str, names: Sequence[str], axis: int, world_size: int) -> ModuleDef:
    if world_size <= 1:
        raise RuleViolation("R2", f"shard {path}: world_size is {world_size}")
    mod = _module(root, path)
    params = list(mod.params)
    for pname in names:
        try:
            pdef = mod.param(pname)
        except ModelError as exc:
            raise ScheduleError(f"shard {path}: {exc}") from None
        if pdef.shard is not None:
            raise ScheduleError(f"shard {path}: {pname} is already sharded")
        shape = pdef.spec.shape
        if axis not in (0, 1) or axis >= len(shape):
            raise ScheduleError(f"shard {path}: axis {axis} is invalid for {pname} of shape {shape}")
        if mod.kind in ("Linear", "FusedQKV") and pname == "bias" and axis != 0:
            raise ScheduleError(f"shard {path}: a Linear bias can only be sharded along axis 0")
        chunks = 3 if mod.kind == "FusedQKV" and axis == 0 else 1
        if shape[axis] % (world_size * chunks):
            raise RuleViolation(
                "R5", f"shard {path}.{pname}: dimension {axis} of {shape} is not divisible by {world_size * chunks}"
            )
        local = list(shape)
        local[axis] //= world_size
        info = ShardInfo(axis, world_size, chunks)
        params[params.index(pdef)] = replace(pdef, spec=pdef.spec.with_shape(local), shard=info)
    return root.replace_at(path, mod.update(params=tuple(params)))


def _call_sites(root: ModuleDef, path: str) -> tuple[str, list[int]]:
    """Nearest ancestor whose graph calls ``path`` directly, with those call nodes."""
    segs = split_path(path)
    for cut in range(len(segs) - 1, -1, -1):
        owner = ".".join(segs[:cut])
        rel = ".".join(segs[cut:])
        mod = root.get(owner)
        if mod.forward is None:
            continue
        calls = [n.id for n in mod.forward if n.kind == "call_module" and n.target == rel]
        if calls:
            return owner, calls
    raise ScheduleError(f"no graph calls {path}")


def _insert_after(graph: StaticGraph, nid: int, make: Callable[[int, int], GraphNode]) -> StaticGraph:
    new_id = graph.next_id()
    nodes: list[GraphNode] = []
    for n in graph:
        if n.id != nid and nid in n.args:
            n = n.with_args(new_id if a == nid else a for a in n.args)
        nodes.append(n)
        if n.id == nid:
            nodes.append(make(new_id, nid))
    return StaticGraph(tuple(nodes))


def _all_reduce(direction: str) -> Callable[[int, int], GraphNode]:
    return lambda new_id, src: GraphNode(new_id, "call_op", op="all_reduce", args=(src,),
                                         attrs={"direction": direction})


def insert_sync(root: ModuleDef, path: str, kind: str, world_size: int) -> ModuleDef:
    if world_size <= 1:
        raise RuleViolation("R2", f"sync {path}: world_size is {world_size}")
    if kind not in ("forward", "backward", "both"):
        raise ScheduleError(f"unknown sync type {kind!r}")
    directions = ("forward", "backward") if kind == "both" else (kind,)
    for direction in directions:
        if not path:
            graph = _composite(root, "").forward
            targets = list(graph.output_ids) if direction == "forward" else [graph.input_ids[0]]
            for t in dict.fromkeys(targets):
                graph = _insert_after(graph, t, _all_reduce(direction))
            root = root.update(forward=graph)
            continue
        owner, calls = _call_sites(root, path)
        graph = root.get(owner).forward
        for cid in calls:
            call = graph.node(cid)
            if direction == "forward":
                items = [u.id for u in graph if u.kind == "get_item" and u.args == (cid,)]
                for t in items or [cid]:
                    graph = _insert_after(graph, t, _all_reduce(direction))
            else:
                if len(call.args) > 1:
                    logger.warning("sync backward on %s: only the gradient of input 0 is reduced", path)
                graph = _reduce_input(graph, cid)
        root = root.replace_at(owner, root.get(owner).update(forward=graph))
    return root


def _reduce_input(graph: StaticGraph, cid: int) -> StaticGraph:
    new_id = graph.next_id()
    nodes = []
    for n in graph:
        if n.id == cid:
            nodes.append(GraphNode(new_id, "call_op", op="all_reduce", args=(n.args[0],),
                                   attrs={"direction": "backward"}))
            n = n.with_args((new_id,) + n.args[1:])
        nodes.append(n)
    return StaticGraph(tuple(nodes))


def _checkpointed_relative(root: ModuleDef, path: str) -> str | None:
    segs = split_path(path)
    for cut in range(len(segs) + 1):
        p = ".".join(segs[:cut])
        if root.get(p).attrs.get("checkpoint"):
            return p
    for p, m in root.get(path).walk(path):
        if m.attrs.get("checkpoint"):
            return p
    return None


def set_checkpoint(root: ModuleDef, path: str) -> ModuleDef:
    mod = _module(root, path)
    clash = _checkpointed_relative(root, path)
    if clash is not None:
        raise ScheduleError(f"checkpoint {path or '<root>'}: nested inside checkpointed region {clash or '<root>'}")
    return root.replace_at(path, mod.update(attrs={**mod.attrs, "checkpoint": True}))


def checkpoint_region(root: ModuleDef, site: str, node_ids: Sequence[int]) -> tuple[ModuleDef, str]:
    if _checkpointed_relative(root, site) is not None:
        raise ScheduleError(f"checkpoint region in {site or '<root>'}: already inside a checkpointed module")
    return wrap_region(root, site, node_ids, "checkpoint", {"checkpoint": True})


def fuse_region(root: ModuleDef, site: str, node_ids: Sequence[int], backend: str,
                pattern: str = "") -> tuple[ModuleDef, str]:
    if backend not in FUSE_BACKENDS:
        raise ScheduleError(f"unknown fusion backend {backend!r} (known: {sorted(FUSE_BACKENDS)})")
    attrs = {"fused": True, "backend": backend}
    if pattern:
        attrs["pattern"] = pattern
    return wrap_region(root, site, node_ids, "fused", attrs, single_output=True)


def annotate_split(root: ModuleDef, path: str, after: str | int, world_size: int) -> ModuleDef:
    if world_size <= 1:
        raise RuleViolation("R2", f"pipeline_split {path}: world_size is {world_size}")
    mod = _composite(root, path)
    graph = mod.forward
    if isinstance(after, int):
        if after not in graph or graph.node(after).kind != "call_module":
            raise ScheduleError(f"pipeline_split {path}: node {after} is not a call_module node")
        marker: str | int = after
    else:
        calls = [n for n in graph if n.kind == "call_module" and n.target == after]
        if not calls:
            raise ScheduleError(f"pipeline_split {path}: no call to child {after!r}")
        if len(calls) > 1:
            raise ScheduleError(f"pipeline_split {path}: child {after!r} is called more than once")
        marker = after
    splits = list(mod.attrs.get("pipeline_splits", []))
    if marker in splits:
        raise ScheduleError(f"pipeline_split {path}: duplicate boundary after {after!r}")
    splits.append(marker)
    return root.replace_at(path, mod.update(attrs={**mod.attrs, "pipeline_splits": splits}))
