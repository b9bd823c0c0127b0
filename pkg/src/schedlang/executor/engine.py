"""Reference interpreter: SPMD forward, reverse-mode gradients, checkpoint recompute.

Every value is a list holding one array per simulated rank. Ops run rank by
rank in ascending order; collectives see all ranks at once, so the
simulation is exact and deterministic.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Any, Callable, Sequence

import numpy as np

from ..ir.graph import GraphNode
from ..ir.module import ModelError, ModuleDef, ParamDef, join_path, shard_slice
from . import kernels
from .kernels import KernelContext

logger = logging.getLogger(__name__)

Val = list  # one np.ndarray per rank


class ExecutionError(RuntimeError):
    pass


@dataclass
class Entry:
    inputs: tuple[int, ...]
    outputs: tuple[int, ...]
    vjp: Callable[[list], list] | None = None
    param: str | None = None
    # (module, path, input slots) of a checkpointed region to recompute
    recompute: tuple[ModuleDef, str, tuple[int, ...]] | None = None


@dataclass
class ActivationLedger:
    """Retained activation bytes per executed node (rank-local sizes)."""

    entries: dict[str, int] = field(default_factory=dict)

    def add(self, key: str, nbytes: int) -> None:
        self.entries[key] = self.entries.get(key, 0) + nbytes

    @property
    def total(self) -> int:
        return sum(self.entries.values())


def _fold_sum(vals: Sequence[np.ndarray]) -> np.ndarray:
    acc = vals[0]
    for v in vals[1:]:
        acc = acc + v
    return acc


def _acc(grads: dict[int, Val], slot: int, g: Val) -> None:
    prev = grads.get(slot)
    grads[slot] = list(g) if prev is None else [a + b for a, b in zip(prev, g)]


class Interpreter:
    """Executes one module tree for ``world_size`` simulated ranks."""

    def __init__(self, model: ModuleDef, world_size: int = 1, mode: str = "verify", seed: int = 0,
                 record: bool = False) -> None:
        self.model = model
        self.world = world_size
        self.kctx = KernelContext(mode, seed)
        self.record = record
        self.values: dict[int, Val] = {}
        self.entries: list[Entry] = []
        self.ledger = ActivationLedger()
        self._ledger_on = True
        self._next = 0
        self._param_cache: dict[str, Val] = {}
        self.param_grads: dict[str, Val] = {}
        self._param_defs = dict(model.all_params())

    # -- slots ---------------------------------------------------------
    def _new(self, val: Val) -> int:
        slot = self._next
        self._next += 1
        self.values[slot] = val
        return slot

    def feed(self, per_rank: Sequence[Sequence[np.ndarray]]) -> list[int]:
        """Register graph inputs; ``per_rank[i]`` is input i for every rank."""
        return [self._new([np.asarray(a) for a in vals]) for vals in per_rank]

    def _emit(self, entry: Entry) -> None:
        if self.record:
            self.entries.append(entry)

    def _book(self, key: str, slots: Sequence[int]) -> None:
        if self._ledger_on:
            self.ledger.add(key, sum(self.values[s][0].nbytes for s in slots))

    # -- params --------------------------------------------------------
    def _param_def(self, path: str) -> ParamDef:
        try:
            pdef = self._param_defs[path]
        except KeyError:
            raise ExecutionError(f"unknown parameter {path!r}") from None
        if pdef.tied_to:
            return self._param_def(pdef.tied_to)
        return pdef

    def param_value(self, path: str) -> Val:
        if path not in self._param_cache:
            pdef = self._param_def(path)
            full = pdef.full_value()
            if pdef.shard is None:
                self._param_cache[path] = [full] * self.world
            else:
                if pdef.shard.world_size != self.world:
                    raise ExecutionError(
                        f"{path} is sharded for world size {pdef.shard.world_size}, running {self.world}"
                    )
                self._param_cache[path] = [shard_slice(full, pdef.shard, r) for r in range(self.world)]
        return self._param_cache[path]

    def _param(self, path: str) -> int:
        slot = self._new(self.param_value(path))
        pdef = self._param_defs.get(path)
        self._emit(Entry((), (slot,), param=(pdef.tied_to if pdef and pdef.tied_to else path)))
        return slot

    # -- ops -----------------------------------------------------------
    def op(self, op: str, args: Sequence[int], attrs: dict[str, Any], key: str | None = None) -> int | tuple:
        xs = [self.values[a] for a in args]
        if op == "all_reduce":
            out, fn = self._all_reduce(xs[0], attrs.get("direction", "forward"))
        elif op == "all_gather":
            out, fn = self._all_gather(xs[0], attrs)
        else:
            out, fn = self._local(op, xs, attrs)
        if isinstance(out, tuple):
            slots: tuple[int, ...] = tuple(self._new(v) for v in out)
            result: int | tuple = slots
        else:
            slots = (self._new(out),)
            result = slots[0]
        self._emit(Entry(tuple(args), slots, fn))
        if key is not None:
            self._book(key, slots)
        return result

    def _local(self, op: str, xs: list[Val], attrs: dict[str, Any]) -> tuple[Any, Callable]:
        ctx = self.kctx
        try:
            per_rank = [kernels.forward(op, [x[r] for x in xs], attrs, ctx) for r in range(self.world)]
        except ValueError as exc:
            shapes = [tuple(np.shape(x[0])) for x in xs]
            raise ExecutionError(f"{op} on shapes {shapes}: {exc}") from None
        multi = isinstance(per_rank[0], tuple)
        out = tuple([pr[i] for pr in per_rank] for i in range(len(per_rank[0]))) if multi else per_rank

        def fn(gouts: list) -> list:
            res = [[] for _ in xs]
            for r in range(self.world):
                if multi:
                    g = tuple(None if go is None else go[r] for go in gouts)
                    o = per_rank[r]
                else:
                    g, o = gouts[0][r], per_rank[r]
                gins = kernels.vjp(op, [x[r] for x in xs], o, g, attrs, ctx)
                for i, gi in enumerate(gins):
                    res[i].append(gi)
            return [None if any(v is None for v in col) else col for col in res]

        return out, fn

    def _all_reduce(self, x: Val, direction: str) -> tuple[Val, Callable]:
        if direction == "backward":
            return list(x), lambda g: [self._reduce(g[0])]
        return self._reduce(x), lambda g: [list(g[0])]

    def _reduce(self, x: Val) -> Val:
        total = _fold_sum(x)
        return [total.copy() for _ in range(self.world)]

    def _all_gather(self, x: Val, attrs: dict[str, Any]) -> tuple[Val, Callable]:
        axis = int(attrs.get("axis", -1)) % x[0].ndim
        full = np.concatenate(x, axis=axis)
        width = x[0].shape[axis]

        def fn(g: list) -> list:
            return [[np.take(g[0][r], range(r * width, (r + 1) * width), axis=axis) for r in range(self.world)]]

        return [full.copy() for _ in range(self.world)], fn

    def _custom(self, args: Sequence[int], out: Val, fn: Callable) -> int:
        slot = self._new(out)
        self._emit(Entry(tuple(args), (slot,), fn))
        return slot

    # -- modules -------------------------------------------------------
    def call(self, mod: ModuleDef, path: str, args: Sequence[int]) -> list[int]:
        if mod.attrs.get("checkpoint"):
            return self._call_checkpointed(mod, path, args)
        return self._call_plain(mod, path, args)

    def _call_plain(self, mod: ModuleDef, path: str, args: Sequence[int]) -> list[int]:
        if mod.is_builtin:
            prev = self._ledger_on
            self._ledger_on = False
            try:
                outs = self._builtin(mod, path, list(args))
            finally:
                self._ledger_on = prev
            self._book(path, outs)
            return outs
        return self._graph(mod, path, args)

    def _call_checkpointed(self, mod: ModuleDef, path: str, args: Sequence[int]) -> list[int]:
        saved, prev_ledger = self.entries, self._ledger_on
        self.entries = []
        self._ledger_on = False
        try:
            outs = self._call_plain(mod, path, args)
        finally:
            self.entries = saved
            self._ledger_on = prev_ledger
        # only the boundary inputs stay alive; internals are recomputed in backward
        self._book(path, args)
        self._emit(Entry(tuple(args), tuple(outs), recompute=(mod, path, tuple(args))))
        return outs

    def _graph(self, mod: ModuleDef, path: str, args: Sequence[int]) -> list[int]:
        graph = mod.forward
        inputs = graph.input_ids
        if len(inputs) != len(args):
            raise ExecutionError(f"{path or mod.name}: expected {len(inputs)} inputs, got {len(args)}")
        env: dict[int, Any] = dict(zip(inputs, args))
        for node in graph:
            if node.kind == "input":
                continue
            if node.kind == "output":
                return [env[a] for a in node.args]
            env[node.id] = self._node(mod, path, node, env)
        raise ExecutionError(f"{path}: graph has no output node")

    def _node(self, mod: ModuleDef, path: str, node: GraphNode, env: dict[int, Any]) -> Any:
        if node.kind == "param_ref":
            return self._param(join_path(path, node.target))
        if node.kind == "get_item":
            return env[node.args[0]][int(node.attrs["index"])]
        args = [env[a] for a in node.args]
        if node.kind == "call_op":
            return self.op(node.op, args, node.attrs, key=f"{path}:{node.id}")
        if node.kind == "call_module":
            try:
                callee = mod.get(node.target)
            except ModelError as exc:
                raise ExecutionError(str(exc)) from None
            outs = self.call(callee, join_path(path, node.target), args)
            return outs[0] if len(outs) == 1 else tuple(outs)
        raise ExecutionError(f"cannot execute node kind {node.kind}")

    def _builtin(self, mod: ModuleDef, path: str, args: list[int]) -> list[int]:
        kind = mod.kind
        if kind in ("Linear", "FusedQKV"):
            w = self._param(join_path(path, "weight"))
            y = self.op("matmul", [args[0], w], {"transpose_b": 1})
            if mod.attrs.get("bias", True) and mod.has_param("bias"):
                b = self._param(join_path(path, "bias"))
                wdef = mod.param("weight")
                if wdef.shard is not None and wdef.shard.axis == 1:
                    # unsharded bias is added on rank 0 only so the sum counts it once
                    y = self._rank0_add(y, b)
                else:
                    y = self.op("add", [y, b], {})
            if kind == "Linear":
                return [y]
            width = self.values[y][0].shape[-1] // 3
            return list(self.op("split", [y], {"axis": -1, "sizes": [width] * 3}))
        if kind == "LayerNorm":
            w = self._param(join_path(path, "weight"))
            b = self._param(join_path(path, "bias"))
            return [self.op("layernorm", [args[0], w, b], {"eps": mod.attrs.get("eps", 1e-5)})]
        if kind == "Dropout":
            return [self.op("dropout", [args[0]], {"p": mod.attrs.get("p", 0.0), "seed": mod.attrs.get("seed", 0)})]
        if kind == "Embedding":
            return [self._embedding(join_path(path, "weight"), args[0])]
        if kind == "EfficientAttention":
            return [self._attention(mod, args)]
        raise ExecutionError(f"unknown builtin {kind}")

    def _rank0_add(self, y: int, b: int) -> int:
        yv, bv = self.values[y], self.values[b]
        out = [yv[0] + bv[0]] + [v.copy() for v in yv[1:]]

        def fn(g: list) -> list:
            gy = g[0]
            gb = [kernels._unbroadcast(gy[0], bv[0].shape)] + [np.zeros_like(v) for v in bv[1:]]
            return [list(gy), gb]

        return self._custom([y, b], out, fn)

    def _embedding(self, wpath: str, ids: int) -> int:
        w = self._param(wpath)
        wv, iv = self.values[w], self.values[ids]
        pdef = self._param_defs[wpath]
        shard = self._param_defs[pdef.tied_to].shard if pdef.tied_to else pdef.shard
        # vocab-parallel: rank r owns rows [r*n, (r+1)*n) and emits zeros for other ids
        rows = wv[0].shape[0]
        offsets = [r * rows if shard is not None and shard.axis == 0 else 0 for r in range(self.world)]
        out = [kernels.gather_rows(wv[r], iv[r], offsets[r]) for r in range(self.world)]

        def fn(g: list) -> list:
            return [[kernels.gather_rows_vjp(wv[r], iv[r], g[0][r], offsets[r]) for r in range(self.world)], None]

        return self._custom([w, ids], out, fn)

    def _attention(self, mod: ModuleDef, args: list[int]) -> int:
        hd = int(mod.attrs["head_dim"])
        q, k, v = args
        heads = [0, 0, -1, hd]
        qh = self.op("transpose", [self.op("reshape", [q], {"shape": heads})], {"perm": [0, 2, 1, 3]})
        kt = self.op("transpose", [self.op("reshape", [k], {"shape": heads})], {"perm": [0, 2, 3, 1]})
        vh = self.op("transpose", [self.op("reshape", [v], {"shape": heads})], {"perm": [0, 2, 1, 3]})
        scores = self.op("scale", [self.op("matmul", [qh, kt], {})], {"factor": 1.0 / np.sqrt(hd)})
        probs = self.op("softmax", [scores], {"axis": -1})
        probs = self.op("dropout", [probs], {"p": mod.attrs.get("p", 0.0), "seed": mod.attrs.get("seed", 0)})
        ctx = self.op("transpose", [self.op("matmul", [probs, vh], {})], {"perm": [0, 2, 1, 3]})
        return self.op("reshape", [ctx], {"shape": [0, 0, -1]})

    # -- reverse mode --------------------------------------------------
    def backward(self, out_slots: Sequence[int], seeds: Sequence[Val] | None = None) -> dict[int, Val]:
        """Propagate gradients of sum(outputs) (or explicit seeds) to every recorded slot."""
        if not self.record:
            raise ExecutionError("backward requires a recorded forward")
        grads: dict[int, Val] = {}
        for i, s in enumerate(out_slots):
            seed = seeds[i] if seeds is not None else [np.ones_like(v) for v in self.values[s]]
            _acc(grads, s, seed)
        self._reverse(self.entries, grads)
        return grads

    def _reverse(self, entries: list[Entry], grads: dict[int, Val]) -> None:
        for e in reversed(entries):
            if e.recompute is not None:
                self._replay(e, grads)
                continue
            gouts = [grads.pop(o, None) for o in e.outputs]
            if all(g is None for g in gouts):
                continue
            if e.param is not None:
                prev = self.param_grads.get(e.param)
                g = gouts[0]
                self.param_grads[e.param] = list(g) if prev is None else [a + b for a, b in zip(prev, g)]
                continue
            gins = e.vjp(gouts)
            for s, g in zip(e.inputs, gins):
                if g is not None:
                    _acc(grads, s, g)

    def _replay(self, e: Entry, grads: dict[int, Val]) -> None:
        mod, path, args = e.recompute
        saved, prev_ledger = self.entries, self._ledger_on
        self.entries = []
        self._ledger_on = False
        try:
            outs = self._call_plain(mod, path, args)
            sub = self.entries
        finally:
            self.entries = saved
            self._ledger_on = prev_ledger
        for old, new in zip(e.outputs, outs):
            g = grads.pop(old, None)
            if g is not None:
                _acc(grads, new, g)
        self._reverse(sub, grads)
