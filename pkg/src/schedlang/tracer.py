"""Static-graph tracing at a chosen granularity.

Models are authored as dataflow already, so tracing means choosing which
composite submodules stay opaque ``call_module`` nodes (the leaves) and
whether the rest are inlined into one flat graph or kept as a hierarchy of
per-module graphs.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

from .ir.graph import GraphError, GraphNode, StaticGraph
from .ir.module import ModelError, ModuleDef, join_path, path_matches, resolve_paths

logger = logging.getLogger(__name__)


class TraceError(ModelError):
    pass


@dataclass(frozen=True)
class TraceSpec:
    leaves: tuple[str, ...] = ()
    flatten: bool = False

    def __post_init__(self) -> None:
        object.__setattr__(self, "leaves", tuple(self.leaves))


@dataclass
class TracedModule:
    origin: str
    graph: StaticGraph
    spec: TraceSpec = field(default_factory=TraceSpec)
    child_traces: dict[str, "TracedModule"] = field(default_factory=dict)


def inline(graph: StaticGraph, call_node: int, callee: StaticGraph, prefix: str | None = None) -> StaticGraph:
    """Splice ``callee`` in place of ``call_node``.

    Callee nodes get fresh ids counting up from ``graph.next_id()``; their
    ``param_ref``/``call_module`` targets are re-qualified with ``prefix``
    (the call's target unless given). ``get_item`` nodes reading the call are
    folded onto the callee's outputs.
    """
    call = graph.node(call_node)
    if call.kind != "call_module":
        raise TraceError(f"node {call_node} is {call.kind}, not call_module")
    prefix = call.target if prefix is None else prefix
    cin = callee.input_ids
    if len(cin) != len(call.args):
        raise TraceError(f"arity mismatch inlining {call.target}: callee takes {len(cin)}, call passes {len(call.args)}")
    remap: dict[int, int] = dict(zip(cin, call.args))
    next_id = graph.next_id()
    spliced: list[GraphNode] = []
    outs: tuple[int, ...] = ()
    for n in callee:
        if n.kind == "input":
            continue
        if n.kind == "output":
            outs = tuple(remap[a] for a in n.args)
            continue
        target = join_path(prefix, n.target) if n.kind in ("param_ref", "call_module") else n.target
        spliced.append(replace(n, id=next_id, target=target, args=tuple(remap[a] for a in n.args)))
        remap[n.id] = next_id
        next_id += 1

    alias: dict[int, int] = {}
    if len(outs) == 1:
        alias[call_node] = outs[0]
    nodes: list[GraphNode] = []
    for n in graph:
        if n.id == call_node:
            nodes.extend(spliced)
            continue
        if n.kind == "get_item" and n.args[0] == call_node:
            alias[n.id] = outs[int(n.attrs["index"])]
            continue
        if any(a in alias for a in n.args):
            n = n.with_args(alias.get(a, a) for a in n.args)
        nodes.append(n)
    out = StaticGraph(tuple(nodes))
    try:
        out.validate()
    except GraphError as exc:
        raise TraceError(f"inlining {call.target} produced an invalid graph: {exc}") from None
    return out


def _is_leaf(rel_path: str, mod: ModuleDef, leaves: tuple[str, ...]) -> bool:
    return mod.is_builtin or any(path_matches(p, rel_path) for p in leaves)


def _check_aliasing(root: ModuleDef, owner: str, inlined: str) -> None:
    inside = {p for p, _ in root.get(owner).all_params(owner) if p.startswith(inlined + ".")}
    for path, pdef in root.all_params():
        if pdef.tied_to is None:
            continue
        a, b = path in inside, pdef.tied_to in inside
        if a != b:
            raise TraceError(
                f"cannot inline {inlined}: parameter {path} aliases {pdef.tied_to} across the boundary (aliasing unsupported)"
            )


def _flatten(root: ModuleDef, path: str, rel: str, leaves: tuple[str, ...], owner: str) -> StaticGraph:
    mod = root.get(path)
    graph = mod.forward
    for node in list(graph):
        if node.kind != "call_module":
            continue
        callee = mod.get(node.target)
        callee_rel = join_path(rel, node.target)
        if _is_leaf(callee_rel, callee, leaves):
            continue
        _check_aliasing(root, owner, join_path(path, node.target))
        sub = _flatten(root, join_path(path, node.target), callee_rel, leaves, owner)
        graph = inline(graph, node.id, sub)
    return graph


def _hierarchy(root: ModuleDef, path: str, rel: str, spec: TraceSpec) -> TracedModule:
    mod = root.get(path)
    children = {}
    for name, sub in mod.submodules.items():
        child_rel = join_path(rel, name)
        if not _is_leaf(child_rel, sub, spec.leaves):
            children[name] = _hierarchy(root, join_path(path, name), child_rel, spec)
    return TracedModule(path, mod.forward, spec, children)


def trace(root: ModuleDef, target: str, spec: TraceSpec = TraceSpec()) -> TracedModule:
    """Trace the composite module at ``target`` according to ``spec``."""
    mod = root.get(target)
    if mod.is_builtin:
        raise TraceError(f"{target or '<root>'} is a builtin {mod.kind}; only composite modules can be traced")
    for pat in spec.leaves:
        if not resolve_paths(mod, pat):
            logger.warning("leaf pattern %r matches nothing under %s", pat, target or "<root>")
    if not spec.flatten:
        return _hierarchy(root, target, "", spec)
    graph = _flatten(root, target, "", spec.leaves, target)
    return TracedModule(target, graph, spec, {})


def apply_trace(root: ModuleDef, target: str, traced: TracedModule) -> ModuleDef:
    """Model with the traced graph installed at ``target`` (hierarchical traces change nothing)."""
    if not traced.spec.flatten:
        return root
    mod = root.get(target)
    return root.replace_at(target, mod.update(forward=traced.graph))
