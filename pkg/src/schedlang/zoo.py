"""Small reference models used by tests, the CLI examples and the tuner.

``python -m schedlang.zoo OUT_DIR`` writes every model as a JSON model file.
"""
from __future__ import annotations

import itertools
import sys
from pathlib import Path

from .ir import library
from .ir.graph import GraphBuilder, StaticGraph
from .ir.module import InitSpec, ModuleDef, ParamDef
from .ir.serialize import dump_model
from .ir.tensor import TensorSpec


class _Seeds:
    def __init__(self, start: int = 1) -> None:
        self._it = itertools.count(start, 2)

    def __call__(self) -> int:
        return next(self._it)


def attention_core(head_dim: int, p: float, seed: int) -> ModuleDef:
    """Scaled dot-product attention spelled out in primitive ops."""
    g = GraphBuilder()
    q, k, v = g.input(), g.input(), g.input()
    heads = [0, 0, -1, head_dim]
    qh = g.op("transpose", g.op("reshape", q, shape=heads), perm=[0, 2, 1, 3])
    kt = g.op("transpose", g.op("reshape", k, shape=heads), perm=[0, 2, 3, 1])
    vh = g.op("transpose", g.op("reshape", v, shape=heads), perm=[0, 2, 1, 3])
    scores = g.op("scale", g.op("matmul", qh, kt), factor=1.0 / head_dim ** 0.5)
    probs = g.op("dropout", g.op("softmax", scores, axis=-1), p=p, seed=seed)
    ctx = g.op("transpose", g.op("matmul", probs, vh), perm=[0, 2, 1, 3])
    out = g.op("reshape", ctx, shape=[0, 0, -1])
    return ModuleDef("core", forward=g.output(out), attrs={"head_dim": head_dim, "p": p, "seed": seed})


def _residual_block(name: str, in_dim: int, out_dim: int, p: float, seeds: _Seeds) -> ModuleDef:
    """dense (no bias) -> BiasAdd -> Dropout -> ResidualAdd -> LayerNorm."""
    scale = 1.0 / in_dim ** 0.5
    g = GraphBuilder()
    x, residual = g.input(), g.input()
    d = g.call("dense", x)
    b = g.op("add", d, g.param("bias"))
    r = g.op("add", g.op("dropout", b, p=p, seed=seeds()), residual)
    y = g.op("layernorm", r, g.param("ln_weight"), g.param("ln_bias"), eps=1e-5)
    params = (
        ParamDef("bias", TensorSpec((out_dim,)), InitSpec("normal", seeds(), scale)),
        ParamDef("ln_weight", TensorSpec((out_dim,)), InitSpec("uniform", seeds(), 1.0)),
        ParamDef("ln_bias", TensorSpec((out_dim,)), InitSpec("uniform", seeds(), 0.1)),
    )
    subs = {"dense": library.linear("dense", in_dim, out_dim, bias=False, seed=seeds())}
    return ModuleDef(name, params=params, submodules=subs, forward=g.output(y))


def bert_layer(hidden: int, heads: int, ffn: int, p: float, seeds: _Seeds) -> ModuleDef:
    hd = hidden // heads
    g = GraphBuilder()
    h = g.input()
    q, k, v = g.call("query", h), g.call("key", h), g.call("value", h)
    self_graph = g.output(g.call("core", q, k, v))
    self_attn = ModuleDef("self", submodules={
        "query": library.linear("query", hidden, hidden, seed=seeds()),
        "key": library.linear("key", hidden, hidden, seed=seeds()),
        "value": library.linear("value", hidden, hidden, seed=seeds()),
        "core": attention_core(hd, p, seeds()),
    }, forward=self_graph)

    g = GraphBuilder()
    h = g.input()
    attn_graph = g.output(g.call("output", g.call("self", h), h))
    attention = ModuleDef("attention", submodules={
        "self": self_attn,
        "output": _residual_block("output", hidden, hidden, p, seeds),
    }, forward=attn_graph)

    g = GraphBuilder()
    x = g.input()
    inter = ModuleDef("intermediate", submodules={"dense": library.linear("dense", hidden, ffn, seed=seeds())},
                      forward=g.output(g.op("gelu", g.call("dense", x))))

    g = GraphBuilder()
    h = g.input()
    a = g.call("attention", h)
    out = g.call("output", g.call("intermediate", a), a)
    return ModuleDef("layer", submodules={
        "attention": attention,
        "intermediate": inter,
        "output": _residual_block("output", ffn, hidden, p, seeds),
    }, forward=g.output(out))


def _sequential(name: str, children: dict[str, ModuleDef]) -> ModuleDef:
    g = GraphBuilder()
    h = g.input()
    for key in children:
        h = g.call(key, h)
    return ModuleDef(name, submodules=children, forward=g.output(h))


def _embeddings(features: int, hidden: int, p: float, seeds: _Seeds) -> ModuleDef:
    g = GraphBuilder()
    x = g.input()
    y = g.call("dropout", g.call("norm", g.call("word", x)))
    return ModuleDef("embeddings", submodules={
        "word": library.linear("word", features, hidden, seed=seeds()),
        "norm": library.layer_norm("norm", hidden, seed=seeds()),
        "dropout": library.dropout("dropout", p, seed=seeds()),
    }, forward=g.output(y))


def _pooler(hidden: int, seeds: _Seeds) -> ModuleDef:
    g = GraphBuilder()
    h, skip = g.input(), g.input()
    y = g.op("relu", g.call("dense", g.op("add", h, skip)))
    return ModuleDef("pooler", submodules={"dense": library.linear("dense", hidden, hidden, seed=seeds())},
                     forward=g.output(y))


def toy_bert(num_layers: int = 24, hidden: int = 8, heads: int = 2, ffn: int = 16, seq: int = 4,
             features: int = 8, batch: int = 4, p: float = 0.1, flat: bool = False) -> ModuleDef:
    """BERT-like encoder: embeddings, ``num_layers`` attention layers and a pooler.

    The pooler also consumes the embedding output, so that value must cross any
    pipeline boundary placed inside the encoder.  With ``flat=True`` the layers
    hang directly off the root as ``layer_<i>``.
    """
    seeds = _Seeds()
    layers = {str(i): bert_layer(hidden, heads, ffn, p, seeds) for i in range(num_layers)}
    emb = _embeddings(features, hidden, p, seeds)
    pooler = _pooler(hidden, seeds)
    g = GraphBuilder()
    x = g.input(shape=[batch, seq, features], dtype="f64")
    e = g.call("embeddings", x)
    if flat:
        h = e
        for i in range(num_layers):
            h = g.call(f"layer_{i}", h)
        subs = {"embeddings": emb, **{f"layer_{i}": m for i, m in layers.items()}, "pooler": pooler}
    else:
        h = g.call("encoder", e)
        encoder = ModuleDef("encoder", submodules={"layer": _sequential("layer", layers)},
                            forward=_single_call("layer"))
        subs = {"embeddings": emb, "encoder": encoder, "pooler": pooler}
    out = g.output(h, g.call("pooler", h, e))
    return ModuleDef("toy_bert_flat" if flat else "toy_bert", submodules=subs, forward=out)


def _single_call(target: str) -> StaticGraph:
    g = GraphBuilder()
    return g.output(g.call(target, g.input()))


def two_linear(hidden: int = 4, inner: int = 8, batch: int = 2, activation: str = "gelu") -> ModuleDef:
    """QKV-style projection, elementwise activation, output projection."""
    g = GraphBuilder()
    x = g.input(shape=[batch, hidden], dtype="f64")
    y = g.call("out", g.op(activation, g.call("qkv", x)))
    return ModuleDef("two_linear", submodules={
        "qkv": library.linear("qkv", hidden, inner, seed=11),
        "out": library.linear("out", inner, hidden, seed=13),
    }, forward=g.output(y))


def qkv_block(hidden: int = 8, seq: int = 4, batch: int = 2) -> ModuleDef:
    """Three independent projections of one hidden state."""
    g = GraphBuilder()
    h = g.input(shape=[batch, seq, hidden], dtype="f64")
    out = g.output(g.call("query", h), g.call("key", h), g.call("value", h))
    return ModuleDef("qkv_block", submodules={
        "query": library.linear("query", hidden, hidden, seed=21),
        "key": library.linear("key", hidden, hidden, seed=23),
        "value": library.linear("value", hidden, hidden, seed=25),
    }, forward=out)


def mlp(dims: tuple[int, ...] = (4, 8, 8, 3), batch: int = 3) -> ModuleDef:
    g = GraphBuilder()
    h = g.input(shape=[batch, dims[0]], dtype="f64")
    subs = {}
    for i, (a, b) in enumerate(zip(dims, dims[1:])):
        subs[f"fc{i}"] = library.linear(f"fc{i}", a, b, seed=31 + 2 * i)
        h = g.call(f"fc{i}", h)
        if i < len(dims) - 2:
            h = g.op("relu", h)
    return ModuleDef("mlp", submodules=subs, forward=g.output(h))


def embed_model(num: int = 10, dim: int = 4, out: int = 3, batch: int = 2, seq: int = 5) -> ModuleDef:
    g = GraphBuilder()
    ids = g.input(shape=[batch, seq], dtype="f64")
    y = g.call("proj", g.call("embed", ids))
    return ModuleDef("embed_model", submodules={
        "embed": library.embedding("embed", num, dim, seed=41),
        "proj": library.linear("proj", dim, out, seed=43),
    }, forward=g.output(y))


MODELS = {
    "toy_bert": toy_bert,
    "toy_bert_flat": lambda: toy_bert(flat=True),
    "two_linear": two_linear,
    "qkv_block": qkv_block,
    "mlp": mlp,
    "embed_model": embed_model,
}


def main(argv: list[str] | None = None) -> int:
    argv = sys.argv[1:] if argv is None else argv
    out = Path(argv[0] if argv else ".")
    out.mkdir(parents=True, exist_ok=True)
    for name, build in MODELS.items():
        (out / f"{name}.json").write_text(dump_model(build()))
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
