"""Per-rank numpy kernels and their vector-Jacobian products.

Collectives (``all_reduce``/``all_gather``) span ranks and live in the engine.
"""
from __future__ import annotations

import math
from typing import Any, Sequence

import numpy as np

from ..ir.shapes import reshape_target

GELU_C = math.sqrt(2.0 / math.pi)
_MASK64 = np.uint64(0xFFFFFFFFFFFFFFFF)


def _splitmix64(x: np.ndarray) -> np.ndarray:
    with np.errstate(over="ignore"):
        z = (x + np.uint64(0x9E3779B97F4A7C15)) & _MASK64
        z = ((z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)) & _MASK64
        z = ((z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)) & _MASK64
        return z ^ (z >> np.uint64(31))


def dropout_mask(shape: Sequence[int], p: float, run_seed: int, node_seed: int) -> np.ndarray:
    """Keep-mask from a counter-based hash of (run seed, node seed, element index)."""
    key = _splitmix64(np.array([(run_seed * 0x100000001B3 + node_seed) & 0xFFFFFFFFFFFFFFFF], dtype=np.uint64))
    idx = np.arange(math.prod(shape), dtype=np.uint64)
    with np.errstate(over="ignore"):
        h = _splitmix64(idx ^ key[0])
    u = (h >> np.uint64(11)).astype(np.float64) * (1.0 / 9007199254740992.0)
    return (u >= p).reshape(tuple(shape))


class KernelContext:
    def __init__(self, mode: str = "verify", seed: int = 0) -> None:
        if mode not in ("verify", "train"):
            raise ValueError(f"unknown exec mode {mode!r}")
        self.mode = mode
        self.seed = seed


def _axis(attrs: dict[str, Any], rank: int, default: int = -1) -> int:
    return int(attrs.get("axis", default)) % max(rank, 1)


def _perm(attrs: dict[str, Any], rank: int) -> list[int]:
    perm = attrs.get("perm")
    if perm is None:
        perm = list(range(rank - 2)) + [rank - 1, rank - 2]
    return list(perm)


def _rhs(b: np.ndarray, attrs: dict[str, Any]) -> np.ndarray:
    return np.swapaxes(b, -1, -2) if attrs.get("transpose_b") else b


def _gelu_parts(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    inner = GELU_C * (x + 0.044715 * x ** 3)
    return inner, np.tanh(inner)


def _layernorm_stats(x: np.ndarray, eps: float) -> tuple[np.ndarray, np.ndarray]:
    mu = x.mean(axis=-1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
    return mu, 1.0 / np.sqrt(var + eps)


def forward(op: str, xs: Sequence[np.ndarray], attrs: dict[str, Any], ctx: KernelContext) -> Any:
    x = xs[0] if xs else None
    if op == "matmul":
        return np.matmul(x, _rhs(xs[1], attrs))
    if op == "add":
        return x + xs[1]
    if op == "mul":
        return x * xs[1]
    if op == "scale":
        return x * float(attrs["factor"])
    if op == "transpose":
        return np.ascontiguousarray(np.transpose(x, _perm(attrs, x.ndim)))
    if op == "reshape":
        return x.reshape(reshape_target(x.shape, attrs["shape"]))
    if op == "split":
        ax = _axis(attrs, x.ndim)
        cuts = np.cumsum(attrs["sizes"])[:-1]
        return tuple(np.ascontiguousarray(p) for p in np.split(x, cuts, axis=ax))
    if op == "concat":
        return np.concatenate(xs, axis=_axis(attrs, x.ndim))
    if op == "relu":
        return np.maximum(x, 0.0)
    if op == "gelu":
        _, t = _gelu_parts(x)
        return 0.5 * x * (1.0 + t)
    if op == "softmax":
        ax = _axis(attrs, x.ndim)
        e = np.exp(x - x.max(axis=ax, keepdims=True))
        return e / e.sum(axis=ax, keepdims=True)
    if op == "layernorm":
        mu, rstd = _layernorm_stats(x, float(attrs.get("eps", 1e-5)))
        return (x - mu) * rstd * xs[1] + xs[2]
    if op == "dropout":
        p = float(attrs.get("p", 0.0))
        if ctx.mode == "verify" or p == 0.0:
            return x
        mask = dropout_mask(x.shape, p, ctx.seed, int(attrs.get("seed", 0)))
        return x * mask * (1.0 / (1.0 - p))
    if op == "reduce_sum":
        axis = attrs.get("axis")
        return np.asarray(x.sum(axis=None if axis is None else int(axis), keepdims=bool(attrs.get("keepdims"))))
    raise ValueError(f"kernel for {op!r} is not per-rank")


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    if shape == ():
        return np.asarray(g.sum())
    # rank-1 bias broadcast along the last axis
    return g.reshape(-1, shape[-1]).sum(axis=0)


def vjp(op: str, xs: Sequence[np.ndarray], out: Any, gout: Any, attrs: dict[str, Any],
        ctx: KernelContext) -> list[np.ndarray | None]:
    """Gradients w.r.t. each input given the gradient of the output."""
    x = xs[0]
    if op == "matmul":
        b = _rhs(xs[1], attrs)
        gx = np.matmul(gout, np.swapaxes(b, -1, -2))
        if b.ndim == 2:
            gb = x.reshape(-1, x.shape[-1]).T @ gout.reshape(-1, gout.shape[-1])
        else:
            gb = np.matmul(np.swapaxes(x, -1, -2), gout)
        if attrs.get("transpose_b"):
            gb = np.swapaxes(gb, -1, -2)
        return [gx, gb]
    if op == "add":
        return [_unbroadcast(gout, x.shape), _unbroadcast(gout, xs[1].shape)]
    if op == "mul":
        y = xs[1]
        return [_unbroadcast(gout * y, x.shape), _unbroadcast(gout * x, y.shape)]
    if op == "scale":
        return [gout * float(attrs["factor"])]
    if op == "transpose":
        return [np.transpose(gout, np.argsort(_perm(attrs, x.ndim)))]
    if op == "reshape":
        return [gout.reshape(x.shape)]
    if op == "split":
        parts = [np.zeros_like(o) if g is None else g for o, g in zip(out, gout)]
        return [np.concatenate(parts, axis=_axis(attrs, x.ndim))]
    if op == "concat":
        ax = _axis(attrs, x.ndim)
        cuts = np.cumsum([a.shape[ax] for a in xs])[:-1]
        return list(np.split(gout, cuts, axis=ax))
    if op == "relu":
        return [gout * (x > 0)]
    if op == "gelu":
        inner, t = _gelu_parts(x)
        d = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3 * 0.044715 * x * x)
        return [gout * d]
    if op == "softmax":
        ax = _axis(attrs, x.ndim)
        return [out * (gout - (gout * out).sum(axis=ax, keepdims=True))]
    if op == "layernorm":
        g, _ = xs[1], xs[2]
        mu, rstd = _layernorm_stats(x, float(attrs.get("eps", 1e-5)))
        xhat = (x - mu) * rstd
        gxhat = gout * g
        gx = rstd * (gxhat - gxhat.mean(axis=-1, keepdims=True)
                     - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True))
        lead = gout.reshape(-1, x.shape[-1])
        return [gx, (lead * xhat.reshape(-1, x.shape[-1])).sum(axis=0), lead.sum(axis=0)]
    if op == "dropout":
        p = float(attrs.get("p", 0.0))
        if ctx.mode == "verify" or p == 0.0:
            return [gout]
        mask = dropout_mask(x.shape, p, ctx.seed, int(attrs.get("seed", 0)))
        return [gout * mask * (1.0 / (1.0 - p))]
    if op == "reduce_sum":
        axis = attrs.get("axis")
        g = gout
        if axis is not None and not attrs.get("keepdims"):
            g = np.expand_dims(g, int(axis))
        return [np.broadcast_to(g, x.shape).copy()]
    raise ValueError(f"no vjp for {op!r}")


def gather_rows(weight: np.ndarray, ids: np.ndarray, offset: int = 0) -> np.ndarray:
    """Row lookup; ids outside ``[offset, offset + rows)`` give zero rows."""
    local = ids.astype(np.int64) - offset
    if offset == 0 and (local.size == 0 or local.max() < weight.shape[0]):
        return weight[local]
    hit = (local >= 0) & (local < weight.shape[0])
    out = weight[np.where(hit, local, 0)]
    out[~hit] = 0.0
    return out


def gather_rows_vjp(weight: np.ndarray, ids: np.ndarray, gout: np.ndarray, offset: int = 0) -> np.ndarray:
    local = ids.astype(np.int64).reshape(-1) - offset
    hit = (local >= 0) & (local < weight.shape[0])
    gw = np.zeros_like(weight)
    np.add.at(gw, local[hit], gout.reshape(-1, weight.shape[1])[hit])
    return gw
