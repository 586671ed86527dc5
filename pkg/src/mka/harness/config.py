"""Run configuration: YAML document with nested sections; CLI flags override keys."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Any, Optional

import yaml

from ..engines.block import BlockPlan
from ..memory import SummaryMode
from ..routing import RoutingPolicy
from ..tensor import PRECISIONS, ModelDims

ENGINES = ("mha", "symbolic_mka", "fastmka", "block_mka_local", "block_mka_global")


class ConfigError(ValueError):
    """Invalid or unreadable configuration (CLI exit code 2)."""


@dataclass
class DimsConfig:
    d_model: int = 64
    n_heads: int = 4


@dataclass
class SummaryConfig:
    kind: str = "prefix_mean"
    ema_decay: Optional[float] = None


@dataclass
class RoutingConfig:
    kind: str = "learned_soft"
    k: Optional[int] = None


@dataclass
class BlockConfig:
    b_blk: int = 64
    window: int = 4
    tau: Optional[float] = None


@dataclass
class RetrievalConfig:
    enabled: bool = False
    top_r: int = 8
    h_bits: int = 64
    history_blocks: int = 16


@dataclass
class StabilityConfig:
    score_rms: float = 80.0
    instances: int = 100
    precision: str = "single"


@dataclass
class RunConfig:
    engines: list = field(default_factory=lambda: list(ENGINES))
    dims: DimsConfig = field(default_factory=DimsConfig)
    seq_lens: list = field(default_factory=lambda: [512, 1024, 2048, 4096, 8192])
    batch: int = 1
    summary: SummaryConfig = field(default_factory=SummaryConfig)
    routing: RoutingConfig = field(default_factory=RoutingConfig)
    block: BlockConfig = field(default_factory=BlockConfig)
    retrieval: RetrievalConfig = field(default_factory=RetrievalConfig)
    stability: StabilityConfig = field(default_factory=StabilityConfig)
    seed: int = 0
    precision: str = "single"
    repeats: int = 5
    warmup: int = 2
    measure_memory: bool = True

    def validate(self) -> "RunConfig":
        try:
            self.model_dims()
            self.summary_mode()
            self.routing_policy()
            BlockPlan(self.block.b_blk, self.block.b_blk, self.block.tau, "local", self.block.window)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        for name in self.engines:
            if name not in ENGINES:
                raise ConfigError(f"unknown engine {name!r}; choose from {', '.join(ENGINES)}")
        if not self.seq_lens or any(s <= 0 for s in self.seq_lens):
            raise ConfigError("seq_lens must be a non-empty list of positive lengths")
        if list(self.seq_lens) != sorted(self.seq_lens):
            raise ConfigError("seq_lens must be sorted ascending")
        for key in ("batch", "repeats"):
            if getattr(self, key) <= 0:
                raise ConfigError(f"{key} must be positive")
        if self.warmup < 0:
            raise ConfigError("warmup must be >= 0")
        if self.seed < 0:
            raise ConfigError("seed must be a nonnegative integer")
        for p in (self.precision, self.stability.precision):
            if p not in PRECISIONS:
                raise ConfigError(f"precision must be one of {sorted(PRECISIONS)}, got {p!r}")
        r = self.retrieval
        if r.top_r < 0 or r.h_bits <= 0 or r.history_blocks < 0:
            raise ConfigError("retrieval needs top_r >= 0, h_bits > 0 and history_blocks >= 0")
        return self

    def model_dims(self) -> ModelDims:
        return ModelDims(self.dims.d_model, self.dims.n_heads)

    def summary_mode(self) -> SummaryMode:
        return SummaryMode(self.summary.kind, self.summary.ema_decay)

    def routing_policy(self) -> RoutingPolicy:
        return RoutingPolicy(self.routing.kind, self.routing.k)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def _merge(target: Any, data: dict, where: str = "") -> None:
    known = {f.name: f for f in dataclasses.fields(target)}
    for key, value in data.items():
        if key not in known:
            raise ConfigError(f"unknown config key {where}{key!r}")
        current = getattr(target, key)
        if dataclasses.is_dataclass(current):
            if not isinstance(value, dict):
                raise ConfigError(f"config key {where}{key!r} must be a mapping")
            _merge(current, value, f"{where}{key}.")
        else:
            setattr(target, key, value)


def load_config(path: Optional[str] = None, overrides: Optional[dict] = None) -> RunConfig:
    """Defaults, then the YAML file at ``path``, then ``overrides`` (dotted keys allowed)."""
    cfg = RunConfig()
    if path is not None:
        try:
            with open(path) as fh:
                data = yaml.safe_load(fh) or {}
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        except yaml.YAMLError as exc:
            raise ConfigError(f"cannot parse config {path}: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError("config document must be a mapping")
        _merge(cfg, data)
    for dotted, value in (overrides or {}).items():
        if value is None:
            continue
        nested: dict = {}
        node = nested
        parts = dotted.split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
        node[parts[-1]] = value
        _merge(cfg, nested)
    return cfg.validate()
