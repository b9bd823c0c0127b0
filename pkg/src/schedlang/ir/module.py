"""Hierarchical module definitions and their parameters."""
from __future__ import annotations

import fnmatch
import math
from dataclasses import dataclass, field, replace
from typing import Any, Iterator, Mapping

import numpy as np

from .graph import GraphError, StaticGraph, normalize_attrs
from .tensor import NUMPY_DTYPE, TensorSpec

BUILTIN_KINDS = ("Linear", "LayerNorm", "Dropout", "Embedding", "FusedQKV", "EfficientAttention")
COMPOSITE = "composite"
INIT_SCHEMES = ("normal", "uniform", "zeros", "ones", "concat", "values")


class ModelError(ValueError):
    pass


@dataclass(frozen=True)
class InitSpec:
    """Deterministic initializer.

    ``concat`` joins ``parts`` (each a ``(shape, InitSpec)`` pair) along ``axis``;
    it lets a fused parameter reproduce the values of the ones it replaced.
    ``values`` carries the row-major data literally (golden fixtures).
    """

    scheme: str = "normal"
    seed: int = 0
    scale: float = 1.0
    axis: int = 0
    parts: tuple[tuple[tuple[int, ...], "InitSpec"], ...] = ()
    data: tuple[float, ...] = ()

    def __post_init__(self) -> None:
        if self.scheme not in INIT_SCHEMES:
            raise ModelError(f"unknown init scheme {self.scheme!r}")
        object.__setattr__(self, "data", tuple(float(v) for v in self.data))

    def materialize(self, shape: tuple[int, ...], dtype: str = "f64") -> np.ndarray:
        np_dtype = NUMPY_DTYPE[dtype]
        if self.scheme == "zeros":
            return np.zeros(shape, dtype=np_dtype)
        if self.scheme == "ones":
            return np.ones(shape, dtype=np_dtype)
        if self.scheme == "values":
            if len(self.data) != math.prod(shape):
                raise ModelError(f"values init has {len(self.data)} elements, shape {tuple(shape)} needs {math.prod(shape)}")
            return np.array(self.data, dtype=np_dtype).reshape(shape)
        if self.scheme == "concat":
            arrays = [init.materialize(tuple(s), dtype) for s, init in self.parts]
            out = np.concatenate(arrays, axis=self.axis)
            if out.shape != tuple(shape):
                raise ModelError(f"concat init yields {out.shape}, declared {tuple(shape)}")
            return out
        rng = np.random.default_rng(self.seed)
        if self.scheme == "normal":
            return (rng.standard_normal(shape) * self.scale).astype(np_dtype)
        return rng.uniform(-self.scale, self.scale, size=shape).astype(np_dtype)


@dataclass(frozen=True)
class ShardInfo:
    axis: int
    world_size: int
    # >1 when the axis holds that many concatenated logical blocks, each sliced separately
    chunks: int = 1


@dataclass(frozen=True)
class ParamDef:
    name: str
    spec: TensorSpec
    init: InitSpec = field(default_factory=InitSpec)
    shard: ShardInfo | None = None
    tied_to: str | None = None

    @property
    def full_spec(self) -> TensorSpec:
        if self.shard is None:
            return self.spec
        shape = list(self.spec.shape)
        shape[self.shard.axis] *= self.shard.world_size
        return self.spec.with_shape(shape)

    def full_value(self) -> np.ndarray:
        return self.init.materialize(self.full_spec.shape, self.spec.dtype)

    def local_value(self, rank: int) -> np.ndarray:
        full = self.full_value()
        if self.shard is None:
            return full
        return shard_slice(full, self.shard, rank)


def shard_slice(full: np.ndarray, info: ShardInfo, rank: int) -> np.ndarray:
    blocks = np.split(full, info.chunks, axis=info.axis)
    parts = [np.split(b, info.world_size, axis=info.axis)[rank] for b in blocks]
    return np.concatenate(parts, axis=info.axis) if len(parts) > 1 else parts[0]


def unshard(pieces: list[np.ndarray], info: ShardInfo) -> np.ndarray:
    """Inverse of :func:`shard_slice` over all ranks."""
    per_rank = [np.split(p, info.chunks, axis=info.axis) for p in pieces]
    blocks = [np.concatenate([r[c] for r in per_rank], axis=info.axis) for c in range(info.chunks)]
    return np.concatenate(blocks, axis=info.axis)


@dataclass(frozen=True)
class ModuleDef:
    name: str
    kind: str = COMPOSITE
    params: tuple[ParamDef, ...] = ()
    submodules: Mapping[str, "ModuleDef"] = field(default_factory=dict)
    forward: StaticGraph | None = None
    attrs: Mapping[str, Any] = field(default_factory=dict)

    def __post_init__(self) -> None:
        object.__setattr__(self, "params", tuple(self.params))
        object.__setattr__(self, "submodules", dict(self.submodules))
        object.__setattr__(self, "attrs", normalize_attrs(self.attrs))

    @property
    def is_builtin(self) -> bool:
        return self.kind != COMPOSITE

    def param(self, name: str) -> ParamDef:
        for p in self.params:
            if p.name == name:
                return p
        raise ModelError(f"module {self.name!r} has no parameter {name!r}")

    def has_param(self, name: str) -> bool:
        return any(p.name == name for p in self.params)

    def get(self, path: str) -> "ModuleDef":
        mod = self
        for seg in split_path(path):
            try:
                mod = mod.submodules[seg]
            except KeyError:
                raise ModelError(f"unknown submodule {seg!r} in path {path!r}") from None
        return mod

    def has(self, path: str) -> bool:
        try:
            self.get(path)
        except ModelError:
            return False
        return True

    def resolve_param(self, dotted: str) -> ParamDef:
        """Look up ``a.b.weight`` relative to this module."""
        owner, _, pname = dotted.rpartition(".")
        return self.get(owner).param(pname)

    def replace_at(self, path: str, new: "ModuleDef | None") -> "ModuleDef":
        """Return a new tree with the module at ``path`` substituted (or removed when ``new`` is None)."""
        segs = split_path(path)
        if not segs:
            if new is None:
                raise ModelError("cannot remove the root module")
            return new
        head, rest = segs[0], ".".join(segs[1:])
        if head not in self.submodules:
            raise ModelError(f"unknown submodule {head!r} in {self.name!r}")
        subs = dict(self.submodules)
        if rest:
            subs[head] = subs[head].replace_at(rest, new)
        elif new is None:
            del subs[head]
        else:
            subs[head] = new
        return replace(self, submodules=subs)

    def update(self, **changes: Any) -> "ModuleDef":
        return replace(self, **changes)

    def walk(self, prefix: str = "") -> Iterator[tuple[str, "ModuleDef"]]:
        yield prefix, self
        for name, sub in self.submodules.items():
            yield from sub.walk(join_path(prefix, name))

    def leaf_paths(self, prefix: str = "") -> list[str]:
        return [p for p, m in self.walk(prefix) if m.is_builtin]

    def all_params(self, prefix: str = "") -> Iterator[tuple[str, ParamDef]]:
        for path, mod in self.walk(prefix):
            for p in mod.params:
                yield join_path(path, p.name), p

    def validate(self) -> None:
        """Check naming and reference invariants over the whole tree."""
        _validate_module(self, self.name or "<root>")


def _validate_module(mod: ModuleDef, where: str) -> None:
    names = [p.name for p in mod.params]
    if len(set(names)) != len(names):
        raise ModelError(f"{where}: duplicate parameter names")
    clash = set(names) & set(mod.submodules)
    if clash:
        raise ModelError(f"{where}: names used for both parameters and submodules: {sorted(clash)}")
    for name in mod.submodules:
        if not name or "." in name:
            raise ModelError(f"{where}: invalid submodule name {name!r}")
    if mod.is_builtin:
        if mod.kind not in BUILTIN_KINDS:
            raise ModelError(f"{where}: unknown builtin kind {mod.kind!r}")
        if mod.forward is not None:
            raise ModelError(f"{where}: builtin modules have no forward graph")
    else:
        if mod.forward is None:
            raise ModelError(f"{where}: composite module needs a forward graph")
        try:
            mod.forward.validate()
        except GraphError as exc:
            raise ModelError(f"{where}: {exc}") from None
        for node in mod.forward:
            if node.kind == "call_module" and not mod.has(node.target):
                raise ModelError(f"{where}: node {node.id} references unknown submodule {node.target!r}")
            if node.kind == "param_ref":
                try:
                    mod.resolve_param(node.target)
                except ModelError:
                    raise ModelError(
                        f"{where}: node {node.id} references unknown parameter {node.target!r}"
                    ) from None
    for name, sub in mod.submodules.items():
        _validate_module(sub, f"{where}.{name}")


def split_path(path: str) -> list[str]:
    return [s for s in path.split(".") if s] if path else []


def join_path(*parts: str) -> str:
    return ".".join(p for p in parts if p)


def parent_path(path: str) -> str:
    return path.rpartition(".")[0]


def _match_segments(pat: list[str], segs: list[str]) -> bool:
    if not pat:
        return not segs
    head = pat[0]
    if head == "**":
        return any(_match_segments(pat[1:], segs[i:]) for i in range(len(segs) + 1))
    if not segs:
        return False
    return fnmatch.fnmatchcase(segs[0], head) and _match_segments(pat[1:], segs[1:])


def path_matches(pattern: str, path: str) -> bool:
    return _match_segments(split_path(pattern), split_path(path))


def resolve_paths(root: ModuleDef, pattern: str) -> list[str]:
    """All concrete module paths under ``root`` matching a glob pattern, sorted.

    ``*`` matches exactly one segment (shell-style wildcards inside a segment
    also work) and ``**`` matches any number of segments.
    """
    if not any(ch in pattern for ch in "*?["):
        return [pattern] if root.has(pattern) else []
    return sorted(p for p, _ in root.walk() if p and path_matches(pattern, p))
