"""Static shape inference over module trees."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Sequence, Union

from .graph import GraphNode, StaticGraph
from .library import ARITY
from .module import ModelError, ModuleDef, join_path
from .tensor import TensorSpec

Value = Union[TensorSpec, tuple]


class ShapeError(ModelError):
    pass


def _norm_axis(axis: int, rank: int) -> int:
    if not -rank <= axis < max(rank, 1):
        raise ShapeError(f"axis {axis} out of range for rank {rank}")
    return axis % rank if rank else 0


def _same(where: str, *specs: TensorSpec) -> None:
    shapes = [s.shape for s in specs]
    if len(set(shapes)) != 1:
        raise ShapeError(f"{where}: shape mismatch {' vs '.join(map(str, shapes))}")


def reshape_target(in_shape: Sequence[int], spec: Sequence[int]) -> tuple[int, ...]:
    """Resolve a reshape request where 0 copies the input dim and -1 is inferred."""
    out = [in_shape[i] if d == 0 else d for i, d in enumerate(spec)]
    total = 1
    for d in in_shape:
        total *= d
    if out.count(-1) > 1:
        raise ShapeError(f"reshape {list(spec)}: more than one -1")
    if -1 in out:
        known = 1
        for d in out:
            if d != -1:
                known *= d
        if known == 0 or total % known:
            raise ShapeError(f"reshape {tuple(in_shape)} -> {list(spec)}: not divisible")
        out[out.index(-1)] = total // known
    prod = 1
    for d in out:
        prod *= d
    if prod != total:
        raise ShapeError(f"reshape {tuple(in_shape)} -> {tuple(out)}: element count differs")
    return tuple(out)


def op_shape(op: str, args: Sequence[TensorSpec], attrs: dict[str, Any], where: str = "") -> Value:
    where = where or op
    a = args[0] if args else None
    if op == "matmul":
        if len(args) != 2:
            raise ShapeError(f"{where}: matmul takes two operands")
        x, w = args
        wshape = w.shape
        if attrs.get("transpose_b"):
            if w.rank < 2:
                raise ShapeError(f"{where}: transpose_b needs rank >= 2, got {w.shape}")
            wshape = wshape[:-2] + (wshape[-1], wshape[-2])
        if x.rank < 2 or len(wshape) < 2:
            raise ShapeError(f"{where}: matmul operands must have rank >= 2, got {x.shape} and {w.shape}")
        if len(wshape) != 2 and wshape[:-2] != x.shape[:-2]:
            raise ShapeError(f"{where}: matmul batch dims differ: {x.shape} vs {w.shape}")
        if x.shape[-1] != wshape[-2]:
            raise ShapeError(f"{where}: matmul contraction mismatch {x.shape} vs {w.shape}")
        return x.with_shape(x.shape[:-1] + (wshape[-1],))
    if op in ("add", "mul"):
        if len(args) != 2:
            raise ShapeError(f"{where}: {op} takes two operands")
        x, y = args
        if x.shape == y.shape or y.rank == 0:
            return x
        if x.rank == 0:
            return y
        if op == "add" and y.rank == 1 and x.shape[-1:] == y.shape:
            return x
        raise ShapeError(f"{where}: shape mismatch {x.shape} vs {y.shape} (only scalar broadcast allowed)")
    if len(args) < 1:
        raise ShapeError(f"{where}: {op} needs an operand")
    if op in ("scale", "relu", "gelu", "dropout", "all_reduce"):
        return a
    if op == "softmax":
        _norm_axis(int(attrs.get("axis", -1)), a.rank)
        return a
    if op == "transpose":
        perm = attrs.get("perm")
        if perm is None:
            perm = list(range(a.rank - 2)) + [a.rank - 1, a.rank - 2]
        if sorted(perm) != list(range(a.rank)):
            raise ShapeError(f"{where}: bad permutation {perm} for shape {a.shape}")
        return a.with_shape(tuple(a.shape[p] for p in perm))
    if op == "reshape":
        return a.with_shape(reshape_target(a.shape, attrs["shape"]))
    if op == "split":
        axis = _norm_axis(int(attrs.get("axis", -1)), a.rank)
        sizes = list(attrs["sizes"])
        if sum(sizes) != a.shape[axis]:
            raise ShapeError(f"{where}: split sizes {sizes} do not sum to dim {a.shape[axis]} of {a.shape}")
        outs = []
        for s in sizes:
            shape = list(a.shape)
            shape[axis] = s
            outs.append(a.with_shape(shape))
        return tuple(outs)
    if op == "concat":
        axis = _norm_axis(int(attrs.get("axis", -1)), a.rank)
        total = 0
        for s in args:
            if s.rank != a.rank or any(s.shape[i] != a.shape[i] for i in range(a.rank) if i != axis):
                raise ShapeError(f"{where}: concat shape mismatch {a.shape} vs {s.shape}")
            total += s.shape[axis]
        shape = list(a.shape)
        shape[axis] = total
        return a.with_shape(shape)
    if op == "layernorm":
        if len(args) != 3:
            raise ShapeError(f"{where}: layernorm takes (x, weight, bias)")
        x, g, b = args
        if g.shape != x.shape[-1:] or b.shape != x.shape[-1:]:
            raise ShapeError(f"{where}: layernorm affine shape mismatch {x.shape} vs {g.shape}, {b.shape}")
        return x
    if op == "reduce_sum":
        axis = attrs.get("axis")
        keep = bool(attrs.get("keepdims", False))
        if axis is None:
            return a.with_shape((1,) * a.rank if keep else ())
        ax = _norm_axis(int(axis), a.rank)
        shape = list(a.shape)
        if keep:
            shape[ax] = 1
        else:
            del shape[ax]
        return a.with_shape(shape)
    if op == "all_gather":
        axis = _norm_axis(int(attrs.get("axis", -1)), a.rank)
        shape = list(a.shape)
        shape[axis] *= int(attrs["world_size"])
        return a.with_shape(shape)
    raise ShapeError(f"{where}: unknown op {op!r}")


def builtin_shape(mod: ModuleDef, args: Sequence[TensorSpec], where: str) -> list[TensorSpec]:
    n_in, _ = ARITY[mod.kind]
    if len(args) != n_in:
        raise ShapeError(f"{where}: {mod.kind} takes {n_in} inputs, got {len(args)}")
    x = args[0]
    if mod.kind in ("Linear", "FusedQKV"):
        w = mod.param("weight").spec
        if x.rank < 1 or x.shape[-1] != w.shape[1]:
            raise ShapeError(f"{where}: {mod.kind} input {x.shape} does not match weight {w.shape}")
        if mod.kind == "Linear":
            return [x.with_shape(x.shape[:-1] + (w.shape[0],))]
        return [x.with_shape(x.shape[:-1] + (w.shape[0] // 3,))] * 3
    if mod.kind == "LayerNorm":
        n = mod.param("weight").spec.shape
        if x.shape[-1:] != n:
            raise ShapeError(f"{where}: LayerNorm over {n} given {x.shape}")
        return [x]
    if mod.kind == "Dropout":
        return [x]
    if mod.kind == "Embedding":
        w = mod.param("weight").spec
        return [w.with_shape(x.shape + (w.shape[1],))]
    if mod.kind == "EfficientAttention":
        _same(where, *args)
        hd = int(mod.attrs["head_dim"])
        if x.rank != 3 or x.shape[-1] % hd:
            raise ShapeError(f"{where}: attention expects (batch, seq, heads*{hd}), got {x.shape}")
        return [x]
    raise ShapeError(f"{where}: unknown builtin {mod.kind}")


@dataclass
class ShapeTrace:
    """Per-module record of what shape inference saw."""

    node_specs: dict[str, dict[int, Value]] = field(default_factory=dict)
    signatures: dict[str, tuple[list[TensorSpec], list[TensorSpec]]] = field(default_factory=dict)


def infer_module(mod: ModuleDef, in_specs: Sequence[TensorSpec], path: str = "",
                 trace: ShapeTrace | None = None, root: ModuleDef | None = None) -> list[TensorSpec]:
    """Output specs of calling ``mod`` on ``in_specs``; records into ``trace``."""
    root = root or mod
    if mod.is_builtin:
        outs = builtin_shape(mod, in_specs, path or mod.name)
    else:
        specs = _infer_graph(mod, in_specs, path, trace, root)
        outs = [specs[i] for i in mod.forward.output_ids]
    if trace is not None:
        trace.signatures[path] = (list(in_specs), list(outs))
    return outs


def _infer_graph(mod: ModuleDef, in_specs: Sequence[TensorSpec], path: str,
                 trace: ShapeTrace | None, root: ModuleDef) -> dict[int, Value]:
    graph = mod.forward
    inputs = graph.input_ids
    if len(inputs) != len(in_specs):
        raise ShapeError(f"{path or mod.name}: expected {len(inputs)} inputs, got {len(in_specs)}")
    specs: dict[int, Value] = {}
    feed = dict(zip(inputs, in_specs))
    for node in graph:
        where = f"{path or mod.name}:node {node.id}"
        args = [specs[a] for a in node.args]
        for a, s in zip(node.args, args):
            if isinstance(s, tuple) and node.kind != "get_item":
                raise ShapeError(f"{where}: argument {a} is a tuple; use get_item")
        specs[node.id] = _node_spec(mod, node, args, feed, path, where, trace, root)
    if trace is not None:
        trace.node_specs[path] = specs
    return specs


def _node_spec(mod: ModuleDef, node: GraphNode, args: list, feed: dict, path: str, where: str,
               trace: ShapeTrace | None, root: ModuleDef) -> Value:
    if node.kind == "input":
        return feed[node.id]
    if node.kind == "param_ref":
        return mod.resolve_param(node.target).spec
    if node.kind == "call_op":
        return op_shape(node.op, args, node.attrs, where)
    if node.kind == "get_item":
        src = args[0]
        if not isinstance(src, tuple):
            raise ShapeError(f"{where}: get_item on a single tensor")
        idx = int(node.attrs["index"])
        if not 0 <= idx < len(src):
            raise ShapeError(f"{where}: index {idx} out of range for {len(src)} outputs")
        return src[idx]
    if node.kind == "call_module":
        callee = mod.get(node.target)
        outs = infer_module(callee, args, join_path(path, node.target), trace, root)
        return outs[0] if len(outs) == 1 else tuple(outs)
    if node.kind == "output":
        return tuple(args) if len(args) != 1 else args[0]
    raise ShapeError(f"{where}: unknown node kind {node.kind}")


def infer_shapes(graph: StaticGraph, inputs: Sequence[TensorSpec], ctx: ModuleDef) -> dict[int, Value]:
    """Spec of every node of ``graph`` evaluated in the scope of module ``ctx``.

    Multi-output nodes (split, FusedQKV calls) map to a tuple of specs.
    """
    owner = ctx if ctx.forward is graph else ctx.update(forward=graph)
    return _infer_graph(owner, list(inputs), "", None, owner)


def model_input_specs(model: ModuleDef, batch: int | None = None) -> list[TensorSpec]:
    """Sample input specs declared on the root graph's input nodes."""
    specs = []
    for nid in model.forward.input_ids:
        attrs = model.forward.node(nid).attrs
        if "shape" not in attrs:
            raise ModelError(f"root input node {nid} does not declare a shape")
        shape = list(attrs["shape"])
        if batch is not None:
            shape[0] = batch
        specs.append(TensorSpec(tuple(shape), attrs.get("dtype", "f64")))
    return specs


def trace_shapes(model: ModuleDef, batch: int | None = None,
                 in_specs: Sequence[TensorSpec] | None = None) -> ShapeTrace:
    tr = ShapeTrace()
    infer_module(model, in_specs if in_specs is not None else model_input_specs(model, batch), "", tr)
    return tr
