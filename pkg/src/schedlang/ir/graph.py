"""SSA dataflow graph with six node kinds."""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Any, Iterable, Iterator, Mapping

NODE_KINDS = ("input", "param_ref", "call_module", "call_op", "get_item", "output")

OPCODES = (
    "matmul",
    "add",
    "mul",
    "scale",
    "transpose",
    "reshape",
    "split",
    "concat",
    "relu",
    "gelu",
    "softmax",
    "layernorm",
    "dropout",
    "reduce_sum",
    "all_reduce",
    "all_gather",
)


class GraphError(ValueError):
    pass


def normalize_attrs(attrs: Mapping[str, Any]) -> dict[str, Any]:
    """Tuples become lists so attrs compare equal after a JSON round trip."""

    def norm(v: Any) -> Any:
        if isinstance(v, (list, tuple)):
            return [norm(x) for x in v]
        if isinstance(v, Mapping):
            return {k: norm(x) for k, x in v.items()}
        return v

    return {k: norm(v) for k, v in attrs.items()}


@dataclass(frozen=True)
class GraphNode:
    id: int
    kind: str
    op: str | None = None
    target: str | None = None
    args: tuple[int, ...] = ()
    attrs: Mapping[str, Any] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.kind not in NODE_KINDS:
            raise GraphError(f"unknown node kind {self.kind!r}")
        object.__setattr__(self, "args", tuple(int(a) for a in self.args))
        object.__setattr__(self, "attrs", normalize_attrs(self.attrs))

    @property
    def label(self) -> tuple[str, str | None]:
        return (self.kind, self.op)

    def with_args(self, args: Iterable[int]) -> "GraphNode":
        return replace(self, args=tuple(args))


@dataclass(frozen=True)
class StaticGraph:
    nodes: tuple[GraphNode, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "nodes", tuple(self.nodes))
        object.__setattr__(self, "_index", {n.id: n for n in self.nodes})

    def __iter__(self) -> Iterator[GraphNode]:
        return iter(self.nodes)

    def __len__(self) -> int:
        return len(self.nodes)

    def node(self, node_id: int) -> GraphNode:
        try:
            return self._index[node_id]  # type: ignore[attr-defined]
        except KeyError:
            raise GraphError(f"no node with id {node_id}") from None

    def __contains__(self, node_id: int) -> bool:
        return node_id in self._index  # type: ignore[attr-defined]

    @property
    def input_ids(self) -> tuple[int, ...]:
        return tuple(n.id for n in self.nodes if n.kind == "input")

    @property
    def output_node(self) -> GraphNode:
        outs = [n for n in self.nodes if n.kind == "output"]
        if len(outs) != 1:
            raise GraphError(f"graph must have exactly one output node, found {len(outs)}")
        return outs[0]

    @property
    def output_ids(self) -> tuple[int, ...]:
        return self.output_node.args

    def next_id(self) -> int:
        return max((n.id for n in self.nodes), default=-1) + 1

    def users(self) -> dict[int, list[int]]:
        out: dict[int, list[int]] = {n.id: [] for n in self.nodes}
        for n in self.nodes:
            for a in n.args:
                out[a].append(n.id)
        return out

    def position(self, node_id: int) -> int:
        for i, n in enumerate(self.nodes):
            if n.id == node_id:
                return i
        raise GraphError(f"no node with id {node_id}")

    def validate(self) -> None:
        seen: set[int] = set()
        n_out = 0
        for n in self.nodes:
            if n.id in seen:
                raise GraphError(f"duplicate node id {n.id}")
            for a in n.args:
                if a not in seen:
                    raise GraphError(
                        f"node {n.id} references {a}, which is not defined earlier in the graph"
                    )
            if n.kind == "call_op" and n.op not in OPCODES:
                raise GraphError(f"node {n.id}: unknown op {n.op!r}")
            if n.kind in ("call_module", "param_ref") and not n.target:
                raise GraphError(f"node {n.id}: {n.kind} requires a target")
            if n.kind == "get_item" and (len(n.args) != 1 or "index" not in n.attrs):
                raise GraphError(f"node {n.id}: get_item takes one arg and an index attr")
            if n.kind == "input" and n.args:
                raise GraphError(f"node {n.id}: input nodes take no args")
            if n.kind == "output":
                n_out += 1
            seen.add(n.id)
        if not self.input_ids:
            raise GraphError("graph has no input node")
        if n_out != 1:
            raise GraphError(f"graph must have exactly one output node, found {n_out}")
        if self.nodes[-1].kind != "output":
            raise GraphError("output node must be last")

    def renumbered(self, start: int = 0) -> "StaticGraph":
        """Copy with ids reassigned densely in graph order."""
        mapping = {n.id: start + i for i, n in enumerate(self.nodes)}
        return StaticGraph(
            tuple(replace(n, id=mapping[n.id], args=tuple(mapping[a] for a in n.args)) for n in self.nodes)
        )


class GraphBuilder:
    """Small helper for authoring graphs in code."""

    def __init__(self) -> None:
        self._nodes: list[GraphNode] = []

    def _add(self, kind: str, **kw: Any) -> int:
        nid = len(self._nodes)
        self._nodes.append(GraphNode(nid, kind, **kw))
        return nid

    def input(self, **attrs: Any) -> int:
        return self._add("input", attrs=attrs)

    def param(self, name: str) -> int:
        return self._add("param_ref", target=name)

    def call(self, target: str, *args: int, **attrs: Any) -> int:
        return self._add("call_module", target=target, args=args, attrs=attrs)

    def op(self, op: str, *args: int, **attrs: Any) -> int:
        return self._add("call_op", op=op, args=args, attrs=attrs)

    def item(self, src: int, index: int) -> int:
        return self._add("get_item", args=(src,), attrs={"index": index})

    def output(self, *args: int) -> StaticGraph:
        self._add("output", args=args)
        g = StaticGraph(tuple(self._nodes))
        g.validate()
        return g
