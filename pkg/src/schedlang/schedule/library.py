"""Named replacement modules usable from schedules and scripts."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

from ..errors import ScheduleError
from ..ir import library as lib
from ..ir.module import ModuleDef


@dataclass(frozen=True)
class LibraryModule:
    name: str
    # build from the module being replaced (module form)
    from_module: Callable[[ModuleDef, str], ModuleDef] | None
    # build from the modules called inside a matched region (subgraph form)
    from_region: Callable[[list[ModuleDef], str], ModuleDef] | None
    approx: bool = False


def _qkv_from_module(old: ModuleDef, name: str) -> ModuleDef:
    try:
        parts = [old.submodules[k] for k in ("query", "key", "value")]
    except KeyError:
        raise ScheduleError(f"FusedQKV can only replace a module with query/key/value children, not {old.name}") from None
    return _qkv_from_region(parts, name)


def _qkv_from_region(callees: list[ModuleDef], name: str) -> ModuleDef:
    if len(callees) != 3:
        raise ScheduleError(f"FusedQKV needs exactly three Linear modules, region calls {len(callees)}")
    try:
        return lib.fused_qkv_from(name, *callees)
    except ValueError as exc:
        raise ScheduleError(str(exc)) from None


def _attention_from_module(old: ModuleDef, name: str) -> ModuleDef:
    if "head_dim" not in old.attrs:
        raise ScheduleError(f"EfficientAttention needs a head_dim attr on {old.name}")
    return lib.efficient_attention(name, int(old.attrs["head_dim"]), p=float(old.attrs.get("p", 0.0)),
                                   seed=int(old.attrs.get("seed", 0)))


LIBRARY: dict[str, LibraryModule] = {
    "FusedQKV": LibraryModule("FusedQKV", _qkv_from_module, _qkv_from_region),
    "EfficientAttention": LibraryModule("EfficientAttention", _attention_from_module, None,
                                        approx="EfficientAttention" in lib.APPROXIMATE),
}


def lookup(name: str) -> LibraryModule:
    try:
        return LIBRARY[name]
    except KeyError:
        raise ScheduleError(f"unknown library module {name!r} (known: {sorted(LIBRARY)})") from None
