"""Constructors for builtin modules."""
from __future__ import annotations

import math

from .module import InitSpec, ModuleDef, ParamDef
from .tensor import TensorSpec

# number of inputs / outputs each builtin kind takes
ARITY = {
    "Linear": (1, 1),
    "LayerNorm": (1, 1),
    "Dropout": (1, 1),
    "Embedding": (1, 1),
    "FusedQKV": (1, 3),
    "EfficientAttention": (3, 1),
}

# library modules whose math differs from what they usually replace
APPROXIMATE = frozenset()


def linear(name: str, in_features: int, out_features: int, *, bias: bool = True, seed: int = 0,
           dtype: str = "f64") -> ModuleDef:
    scale = 1.0 / math.sqrt(in_features)
    params = [ParamDef("weight", TensorSpec((out_features, in_features), dtype), InitSpec("normal", seed, scale))]
    if bias:
        params.append(ParamDef("bias", TensorSpec((out_features,), dtype), InitSpec("normal", seed + 1, scale)))
    return ModuleDef(name, "Linear", tuple(params),
                     attrs={"in_features": in_features, "out_features": out_features, "bias": bias})


def layer_norm(name: str, n: int, *, eps: float = 1e-5, seed: int = 0, dtype: str = "f64") -> ModuleDef:
    params = (
        ParamDef("weight", TensorSpec((n,), dtype), InitSpec("uniform", seed, 1.0)),
        ParamDef("bias", TensorSpec((n,), dtype), InitSpec("uniform", seed + 1, 0.1)),
    )
    return ModuleDef(name, "LayerNorm", params, attrs={"normalized_shape": n, "eps": eps})


def dropout(name: str, p: float, *, seed: int = 0) -> ModuleDef:
    return ModuleDef(name, "Dropout", attrs={"p": p, "seed": seed})


def embedding(name: str, num: int, dim: int, *, seed: int = 0, dtype: str = "f64") -> ModuleDef:
    params = (ParamDef("weight", TensorSpec((num, dim), dtype), InitSpec("normal", seed, 1.0)),)
    return ModuleDef(name, "Embedding", params, attrs={"num_embeddings": num, "embedding_dim": dim})


def fused_qkv(name: str, in_features: int, out_features: int, *, bias: bool = True, seed: int = 0,
              dtype: str = "f64") -> ModuleDef:
    """One projection producing query, key and value (each ``out_features`` wide)."""
    scale = 1.0 / math.sqrt(in_features)
    params = [ParamDef("weight", TensorSpec((3 * out_features, in_features), dtype),
                       InitSpec("normal", seed, scale))]
    if bias:
        params.append(ParamDef("bias", TensorSpec((3 * out_features,), dtype), InitSpec("normal", seed + 1, scale)))
    return ModuleDef(name, "FusedQKV", tuple(params),
                     attrs={"in_features": in_features, "out_features": out_features, "bias": bias})


def fused_qkv_from(name: str, query: ModuleDef, key: ModuleDef, value: ModuleDef) -> ModuleDef:
    """FusedQKV whose weight is the row-concatenation of three Linear weights."""
    linears = (query, key, value)
    for lin in linears:
        if lin.kind != "Linear":
            raise ValueError(f"FusedQKV can only absorb Linear modules, got {lin.kind}")
        if lin.attrs != query.attrs:
            raise ValueError("query/key/value projections must have identical configuration")
        if any(p.shard is not None for p in lin.params):
            raise ValueError("cannot fuse already sharded projections")
    attrs = dict(query.attrs)
    params = []
    for pname in [p.name for p in query.params]:
        parts = tuple((lin.param(pname).spec.shape, lin.param(pname).init) for lin in linears)
        spec0 = query.param(pname).spec
        shape = (3 * spec0.shape[0],) + spec0.shape[1:]
        params.append(ParamDef(pname, spec0.with_shape(shape), InitSpec("concat", axis=0, parts=parts)))
    return ModuleDef(name, "FusedQKV", tuple(params), attrs=attrs)


def efficient_attention(name: str, head_dim: int, *, p: float = 0.0, seed: int = 0) -> ModuleDef:
    """Single-kernel scaled dot-product attention over (batch, seq, hidden) q/k/v."""
    return ModuleDef(name, "EfficientAttention", attrs={"head_dim": head_dim, "p": p, "seed": seed})
