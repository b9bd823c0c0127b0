"""Subgraph matching over static graphs.

A pattern is a small graph in the model-file node syntax. Its ``input``
nodes are wildcards that bind (consistently) to any value produced outside
the match; every other node must map injectively onto a target node with the
same label and the same positional arguments.

Labels: ``call_op`` nodes compare ``op`` plus every attr the pattern lists
(``"*"`` accepts any value); ``call_module`` nodes compare the callee's kind
given as the pattern's ``op`` and/or a glob on the call target; ``param_ref``
and ``get_item`` compare an optional target glob and the index.
"""
from __future__ import annotations

import itertools
import json
import re
from dataclasses import dataclass, field
from typing import Any, Iterable, Sequence

from ..errors import ScheduleError
from ..ir.graph import GraphError, GraphNode, StaticGraph
from ..ir.module import ModelError, ModuleDef, path_matches

WILDCARD = "*"


@dataclass(frozen=True)
class SubgraphMatch:
    site: str
    nodes: tuple[int, ...]  # target node ids, aligned with the pattern's operator nodes
    binding: dict[int, int] = field(default_factory=dict, compare=False)  # pattern input id -> target id
    pattern: str = ""

    @property
    def anchor(self) -> int:
        return min(self.nodes) if self.nodes else -1


@dataclass(frozen=True)
class Pattern:
    name: str
    nodes: tuple[GraphNode, ...]

    @property
    def inputs(self) -> list[GraphNode]:
        return [n for n in self.nodes if n.kind == "input"]

    @property
    def ops(self) -> list[GraphNode]:
        return [n for n in self.nodes if n.kind not in ("input", "output")]

    def node(self, nid: int) -> GraphNode:
        for n in self.nodes:
            if n.id == nid:
                return n
        raise KeyError(nid)


class PatternError(ScheduleError):
    pass


def make_pattern(name: str, nodes: Iterable[GraphNode | dict[str, Any]]) -> Pattern:
    built = []
    for n in nodes:
        if isinstance(n, dict):
            try:
                n = GraphNode(int(n["id"]), n["kind"], n.get("op"), n.get("target"),
                              tuple(n.get("args", ())), n.get("attrs", {}))
            except (KeyError, TypeError, ValueError, GraphError) as exc:
                raise PatternError(f"pattern {name}: malformed node: {exc}") from None
        built.append(n)
    seen: set[int] = set()
    for n in built:
        if n.id in seen:
            raise PatternError(f"pattern {name}: duplicate node id {n.id}")
        if any(a not in seen for a in n.args):
            raise PatternError(f"pattern {name}: node {n.id} uses a value not defined before it")
        if n.kind == "get_item" and (len(n.args) != 1 or "index" not in n.attrs):
            raise PatternError(f"pattern {name}: get_item node {n.id} needs one arg and an index")
        seen.add(n.id)
    pat = Pattern(name, tuple(built))
    if not pat.ops:
        raise PatternError(f"pattern {name}: needs at least one operator node")
    if not _connected(pat):
        raise PatternError(f"pattern {name}: pattern graph is not connected")
    return pat


def parse_pattern(name: str, text: str) -> Pattern:
    """Parse the body of a ``pattern NAME { ... }`` block (a JSON node array)."""
    body = text.strip()
    if not body.startswith("["):
        body = f"[{body}]"
    try:
        nodes = json.loads(body)
    except json.JSONDecodeError as exc:
        raise PatternError(f"pattern {name}: parse error at column {exc.colno}: {exc.msg}") from None
    if not isinstance(nodes, list):
        raise PatternError(f"pattern {name}: expected a node array")
    return make_pattern(name, nodes)


def pattern_from_graph(name: str, graph: StaticGraph, mod: ModuleDef | None = None) -> Pattern:
    """A pattern that matches ``graph`` itself (call targets become exact globs)."""
    nodes = []
    for n in graph:
        if n.kind == "call_module" and mod is not None:
            n = GraphNode(n.id, n.kind, mod.get(n.target).kind, n.target, n.args, n.attrs)
        nodes.append(n)
    return make_pattern(name, nodes)


def _connected(pat: Pattern) -> bool:
    adj: dict[int, set[int]] = {n.id: set() for n in pat.nodes if n.kind != "output"}
    for n in pat.nodes:
        if n.kind == "output":
            continue
        for a in n.args:
            adj[n.id].add(a)
            adj[a].add(n.id)
    start = pat.ops[0].id
    todo, seen = [start], {start}
    while todo:
        for m in adj[todo.pop()]:
            if m not in seen:
                seen.add(m)
                todo.append(m)
    return seen == set(adj)


# -- labels ----------------------------------------------------------------

def _attrs_match(pattern: dict[str, Any], actual: dict[str, Any]) -> bool:
    for key, want in pattern.items():
        if want == WILDCARD:
            if key not in actual:
                return False
            continue
        if actual.get(key) != want:
            return False
    return True


def label_matches(p: GraphNode, t: GraphNode, mod: ModuleDef) -> bool:
    if p.kind != t.kind or len(p.args) != len(t.args):
        return False
    if p.kind == "call_op":
        return p.op == t.op and _attrs_match(p.attrs, t.attrs)
    if p.kind == "call_module":
        if p.target and not path_matches(p.target, t.target):
            return False
        if p.op:
            try:
                kind = mod.get(t.target).kind
            except ModelError:
                return False
            return p.op == kind
        return True
    if p.kind == "param_ref":
        return not p.target or path_matches(p.target, t.target)
    if p.kind == "get_item":
        return p.attrs.get("index") == t.attrs.get("index")
    return False


# -- search ----------------------------------------------------------------

def _reverse_topological(pat: Pattern) -> list[GraphNode]:
    return list(reversed(pat.ops))


def _input_binding(pat: Pattern, graph: StaticGraph, assign: dict[int, int]) -> dict[int, int] | None:
    """Bind pattern inputs from the mapped operators' args; None if inconsistent."""
    inputs = {n.id for n in pat.inputs}
    mapped = set(assign.values())
    binding: dict[int, int] = {}
    for p in pat.ops:
        t = graph.node(assign[p.id])
        for pa, ta in zip(p.args, t.args):
            if pa not in inputs:
                continue
            if ta in mapped or binding.setdefault(pa, ta) != ta:
                return None
    return binding


def enumerate_embeddings(pat: Pattern, graph: StaticGraph, mod: ModuleDef) -> list[tuple[tuple[int, ...], dict[int, int]]]:
    """Every label-preserving injective embedding of ``pat`` into ``graph``."""
    order = _reverse_topological(pat)
    op_ids = {n.id for n in pat.ops}
    consumers: dict[int, list[tuple[GraphNode, int]]] = {n.id: [] for n in pat.ops}
    for n in pat.ops:
        for i, a in enumerate(n.args):
            if a in op_ids:
                consumers[a].append((n, i))
    candidates = [t for t in graph if t.kind not in ("input", "output")]
    results: list[tuple[tuple[int, ...], dict[int, int]]] = []
    assign: dict[int, int] = {}
    used: set[int] = set()

    def options(p: GraphNode) -> Iterable[GraphNode]:
        fixed = None
        for c, i in consumers[p.id]:
            tid = graph.node(assign[c.id]).args[i]
            if fixed is None:
                fixed = tid
            elif fixed != tid:
                return ()
        if fixed is not None:
            return (graph.node(fixed),)
        return candidates

    def consistent(p: GraphNode, t: GraphNode) -> bool:
        for pa, ta in zip(p.args, t.args):
            if pa in assign and assign[pa] != ta:
                return False
        return True

    def search(k: int) -> None:
        if k == len(order):
            binding = _input_binding(pat, graph, assign)
            if binding is not None:
                results.append((tuple(assign[n.id] for n in pat.ops), binding))
            return
        p = order[k]
        for t in options(p):
            if t.id in used or t.kind in ("input", "output") or not label_matches(p, t, mod):
                continue
            if not consistent(p, t):
                continue
            assign[p.id] = t.id
            used.add(t.id)
            search(k + 1)
            del assign[p.id]
            used.discard(t.id)

    search(0)
    return results


def brute_force_embeddings(pat: Pattern, graph: StaticGraph, mod: ModuleDef) -> list[tuple[tuple[int, ...], dict[int, int]]]:
    """Reference enumeration over every injective assignment (small graphs only)."""
    ops = pat.ops
    op_ids = {n.id for n in ops}
    targets = [t for t in graph if t.kind not in ("input", "output")]
    out = []
    for combo in itertools.permutations(targets, len(ops)):
        assign = {p.id: t.id for p, t in zip(ops, combo)}
        ok = all(label_matches(p, t, mod) for p, t in zip(ops, combo))
        if ok:
            for p, t in zip(ops, combo):
                if any(pa in op_ids and assign[pa] != ta for pa, ta in zip(p.args, t.args)):
                    ok = False
                    break
        if not ok:
            continue
        binding = _input_binding(pat, graph, assign)
        if binding is not None:
            out.append((tuple(t.id for t in combo), binding))
    return out


def greedy_non_overlapping(embeddings: Sequence[tuple[tuple[int, ...], dict[int, int]]]) -> list[tuple[tuple[int, ...], dict[int, int]]]:
    """Keep embeddings in (anchor, node tuple) order, dropping any that overlap an accepted one."""
    taken: set[int] = set()
    kept = []
    for nodes, binding in sorted(embeddings, key=lambda e: (min(e[0]), e[0])):
        if taken.isdisjoint(nodes):
            kept.append((nodes, binding))
            taken.update(nodes)
    return kept


def find_in_graph(pat: Pattern, graph: StaticGraph, mod: ModuleDef, site: str = "") -> list[SubgraphMatch]:
    found = greedy_non_overlapping(enumerate_embeddings(pat, graph, mod))
    return [SubgraphMatch(site, nodes, binding, pat.name) for nodes, binding in found]


def find_paths(root: ModuleDef, site: str, pattern: str) -> list[SubgraphMatch]:
    """Name-based find: module paths under ``site`` matching a glob or ``re:<regex>``."""
    mod = root.get(site)
    if pattern.startswith("re:"):
        try:
            rx = re.compile(pattern[3:])
        except re.error as exc:
            raise PatternError(f"bad regex {pattern[3:]!r}: {exc}") from None
        rels = sorted(p for p, _ in mod.walk() if p and rx.fullmatch(p))
    else:
        rels = sorted(p for p, _ in mod.walk() if p and path_matches(pattern, p))
    prefix = f"{site}." if site else ""
    return [SubgraphMatch(prefix + r, ()) for r in rels]
