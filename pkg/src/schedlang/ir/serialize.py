"""JSON model file format.

Layout::

    {"format_version": 1,
     "name": "<model name>",
     "modules": <module>}

    <module> = {"kind": "composite" | <builtin kind>,
                "params": [{"name", "shape", "dtype", "init", "seed", ...}],
                "submodules": {"<segment>": <module>, ...},
                "forward": [{"id", "kind", "op" | "target", "args", "attrs"}],
                "attrs": {...}}

Optional parameter keys: ``scale`` (init scale), ``axis``/``parts`` (concat init),
``data`` (flat row-major values for ``"init": "values"``),
``shard`` ({"axis", "world_size", "chunks"}) and ``tied_to``.
"""
from __future__ import annotations

import json
from typing import Any

from .graph import GraphError, GraphNode, StaticGraph
from .module import BUILTIN_KINDS, COMPOSITE, InitSpec, ModelError, ModuleDef, ParamDef, ShardInfo
from .tensor import TensorSpec

FORMAT_VERSION = 1


class ModelFormatError(ModelError):
    pass


def _no_duplicates(pairs: list[tuple[str, Any]]) -> dict[str, Any]:
    out: dict[str, Any] = {}
    for k, v in pairs:
        if k in out:
            raise ModelFormatError(f"duplicate key {k!r}")
        out[k] = v
    return out


def load_model(text: str | bytes) -> ModuleDef:
    if isinstance(text, bytes):
        text = text.decode("utf-8")
    try:
        doc = json.loads(text, object_pairs_hook=_no_duplicates)
    except json.JSONDecodeError as exc:
        raise ModelFormatError(f"parse error at line {exc.lineno}, column {exc.colno}: {exc.msg}") from None
    if not isinstance(doc, dict) or "modules" not in doc:
        raise ModelFormatError("model file must be an object with a 'modules' key")
    version = doc.get("format_version", FORMAT_VERSION)
    if version != FORMAT_VERSION:
        raise ModelFormatError(f"unsupported format_version {version}")
    model = _module_from_json(doc.get("name", "model"), doc["modules"], "modules")
    model.validate()
    return model


def _init_from_json(d: dict[str, Any], where: str) -> InitSpec:
    parts = tuple((tuple(p["shape"]), _init_from_json(p, where)) for p in d.get("parts", ()))
    try:
        return InitSpec(d.get("init", "normal"), int(d.get("seed", 0)), float(d.get("scale", 1.0)),
                        int(d.get("axis", 0)), parts, tuple(d.get("data", ())))
    except ModelError as exc:
        raise ModelFormatError(f"{where}: {exc}") from None


def _param_from_json(d: dict[str, Any], where: str) -> ParamDef:
    try:
        spec = TensorSpec(tuple(d["shape"]), d.get("dtype", "f64"))
    except (KeyError, ValueError, TypeError) as exc:
        raise ModelFormatError(f"{where}: bad parameter spec: {exc}") from None
    shard = None
    if d.get("shard"):
        s = d["shard"]
        shard = ShardInfo(int(s["axis"]), int(s["world_size"]), int(s.get("chunks", 1)))
    return ParamDef(d["name"], spec, _init_from_json(d, where), shard, d.get("tied_to"))


def _module_from_json(name: str, d: dict[str, Any], where: str) -> ModuleDef:
    if not isinstance(d, dict):
        raise ModelFormatError(f"{where}: module must be an object")
    kind = d.get("kind", COMPOSITE)
    if kind != COMPOSITE and kind not in BUILTIN_KINDS:
        raise ModelFormatError(f"{where}: unknown module kind {kind!r}")
    params = tuple(_param_from_json(p, f"{where}.params[{i}]") for i, p in enumerate(d.get("params", [])))
    names = [p.name for p in params]
    if len(set(names)) != len(names):
        raise ModelFormatError(f"{where}: duplicate parameter names")
    subs = {k: _module_from_json(k, v, f"{where}.{k}") for k, v in d.get("submodules", {}).items()}
    forward = None
    if "forward" in d and d["forward"] is not None:
        try:
            forward = StaticGraph(tuple(
                GraphNode(int(n["id"]), n["kind"], n.get("op"), n.get("target"),
                          tuple(n.get("args", ())), n.get("attrs", {}))
                for n in d["forward"]
            ))
        except (GraphError, KeyError, TypeError) as exc:
            raise ModelFormatError(f"{where}.forward: {exc}") from None
    return ModuleDef(name, kind, params, subs, forward, d.get("attrs", {}))


def _init_to_json(init: InitSpec) -> dict[str, Any]:
    out: dict[str, Any] = {"init": init.scheme, "seed": init.seed}
    if init.scale != 1.0:
        out["scale"] = init.scale
    if init.scheme == "concat":
        out["axis"] = init.axis
        out["parts"] = [{"shape": list(s), **_init_to_json(i)} for s, i in init.parts]
    if init.scheme == "values":
        out["data"] = list(init.data)
    return out


def _param_to_json(p: ParamDef) -> dict[str, Any]:
    out: dict[str, Any] = {"name": p.name, "shape": list(p.spec.shape), "dtype": p.spec.dtype}
    out.update(_init_to_json(p.init))
    if p.shard is not None:
        out["shard"] = {"axis": p.shard.axis, "world_size": p.shard.world_size, "chunks": p.shard.chunks}
    if p.tied_to:
        out["tied_to"] = p.tied_to
    return out


def _jsonable(v: Any) -> Any:
    if isinstance(v, tuple):
        return [_jsonable(x) for x in v]
    if isinstance(v, list):
        return [_jsonable(x) for x in v]
    if isinstance(v, dict):
        return {k: _jsonable(x) for k, x in v.items()}
    return v


def graph_to_json(graph: StaticGraph) -> list[dict[str, Any]]:
    nodes = []
    for n in graph:
        d: dict[str, Any] = {"id": n.id, "kind": n.kind}
        if n.op is not None:
            d["op"] = n.op
        if n.target is not None:
            d["target"] = n.target
        d["args"] = list(n.args)
        d["attrs"] = _jsonable(n.attrs)
        nodes.append(d)
    return nodes


def module_to_json(mod: ModuleDef) -> dict[str, Any]:
    out: dict[str, Any] = {"kind": mod.kind}
    if mod.params:
        out["params"] = [_param_to_json(p) for p in mod.params]
    if mod.submodules:
        out["submodules"] = {k: module_to_json(v) for k, v in mod.submodules.items()}
    if mod.forward is not None:
        out["forward"] = graph_to_json(mod.forward)
    if mod.attrs:
        out["attrs"] = _jsonable(mod.attrs)
    return out


def dump_model(model: ModuleDef) -> str:
    doc = {"format_version": FORMAT_VERSION, "name": model.name, "modules": module_to_json(model)}
    return json.dumps(doc, indent=1) + "\n"


def structurally_equal(a: ModuleDef, b: ModuleDef) -> bool:
    """Tree equality up to dense renumbering of graph node ids."""
    if (a.kind, a.params, a.attrs) != (b.kind, b.params, b.attrs):
        return False
    if list(a.submodules) != list(b.submodules):
        return False
    if (a.forward is None) != (b.forward is None):
        return False
    if a.forward is not None and a.forward.renumbered() != b.forward.renumbered():
        return False
    return all(structurally_equal(a.submodules[k], b.submodules[k]) for k in a.submodules)
