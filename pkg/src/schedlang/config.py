"""World and cost configuration, plus the ``[world]/[cost]/[verify]`` config file."""
from __future__ import annotations

from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Any

import tomli


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class CostConstants:
    device_flops_per_s: float = 1.0e12
    link_bytes_per_s: float = 1.0e10
    kernel_launch_overhead_s: float = 5.0e-6
    optimizer_state_multiplier: float = 2.0
    # backward pass costs this many forward passes
    backward_flops_multiplier: float = 2.0

    def __post_init__(self) -> None:
        for f in fields(self):
            if getattr(self, f.name) <= 0:
                raise ConfigError(f"cost constant {f.name} must be positive")


@dataclass(frozen=True)
class WorldConfig:
    world_size: int = 1
    device_memory_bytes: int = 16 * 2 ** 30
    cost: CostConstants = field(default_factory=CostConstants)

    def __post_init__(self) -> None:
        if self.world_size < 1:
            raise ConfigError("world_size must be >= 1")
        if self.device_memory_bytes < 1:
            raise ConfigError("device_memory_bytes must be >= 1")


@dataclass(frozen=True)
class VerifyConfig:
    trials: int = 10
    atol: float = 1e-6
    rtol: float = 1e-5


@dataclass(frozen=True)
class Config:
    world: WorldConfig = field(default_factory=WorldConfig)
    verify: VerifyConfig = field(default_factory=VerifyConfig)


def _pick(cls: type, section: dict[str, Any], where: str) -> dict[str, Any]:
    names = {f.name for f in fields(cls)}
    unknown = set(section) - names
    if unknown:
        raise ConfigError(f"[{where}] unknown keys: {sorted(unknown)}")
    return dict(section)


def load_config(path: str | Path | None) -> Config:
    if path is None:
        return Config()
    try:
        with open(path, "rb") as fh:
            doc = tomli.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    except tomli.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    unknown = set(doc) - {"cost", "world", "verify"}
    if unknown:
        raise ConfigError(f"{path}: unknown sections {sorted(unknown)}")
    cost = CostConstants(**_pick(CostConstants, doc.get("cost", {}), "cost"))
    world_kw = _pick(WorldConfig, doc.get("world", {}), "world")
    world_kw.pop("cost", None)
    world = WorldConfig(cost=cost, **world_kw)
    verify = VerifyConfig(**_pick(VerifyConfig, doc.get("verify", {}), "verify"))
    return Config(world, verify)


def with_world_size(cfg: Config, world_size: int | None) -> Config:
    if world_size is None:
        return cfg
    return replace(cfg, world=replace(cfg.world, world_size=world_size))
