"""Run configuration: nested dataclasses loaded from YAML (or JSON)."""
from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml

from .adapters import AdapterConfig
from .backbone import BackboneConfig
from .composer import MODES
from .data import GeneratorSpec
from .errors import ConfigError
from .router import RouterConfig

REGIMES = ("CIL", "TIL")


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 3e-4
    batch_size: int = 8
    max_epochs: int = 30
    patience: int = 3
    warmup_frac: float = 0.1
    weight_decay: float = 0.01

    def validate(self) -> "TrainConfig":
        if self.lr <= 0 or self.batch_size < 1 or self.max_epochs < 1 or self.patience < 1:
            raise ConfigError("train: lr > 0, batch_size >= 1, max_epochs >= 1, patience >= 1 required")
        if not 0 <= self.warmup_frac < 1:
            raise ConfigError("train.warmup_frac must be in [0, 1)")
        return self


@dataclass(frozen=True)
class IngestConfig:
    path: str
    schema: str
    vocab: str | None = None
    split_ratios: tuple[float, float, float] | None = None


@dataclass
class RunConfig:
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    adapter: AdapterConfig = field(default_factory=AdapterConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    router: RouterConfig = field(default_factory=RouterConfig)
    data: GeneratorSpec | None = field(default_factory=GeneratorSpec)
    ingest: IngestConfig | None = None
    memory_fraction: float = 0.10
    composition: str = "wavg"
    regime: str = "CIL"
    orders: tuple[str, ...] = ("i",)
    seed: int = 0
    output_dir: str = "runs"

    def validate(self) -> "RunConfig":
        self.backbone.validate()
        self.adapter.validate(self.backbone.hidden_dim)
        self.train.validate()
        self.router.validate()
        if self.data is None and self.ingest is None:
            raise ConfigError("one of data (generator) or ingest must be given")
        if self.data is not None and self.ingest is not None:
            raise ConfigError("data and ingest are mutually exclusive")
        if self.data is not None:
            self.data.validate()
            if self.data.max_len + 1 > self.backbone.max_seq_len:
                raise ConfigError(
                    f"data.max_len {self.data.max_len} + [CLS] exceeds backbone.max_seq_len {self.backbone.max_seq_len}"
                )
            if self.data.vocab_size > self.backbone.vocab_size:
                raise ConfigError("data.vocab_size exceeds backbone.vocab_size")
        if not 0 < self.memory_fraction <= 1:
            raise ConfigError(f"memory_fraction must be in (0, 1], got {self.memory_fraction}")
        if self.composition not in MODES:
            raise ConfigError(f"composition must be one of {MODES}, got {self.composition!r}")
        if self.regime not in REGIMES:
            raise ConfigError(f"regime must be one of {REGIMES}, got {self.regime!r}")
        if not self.orders:
            raise ConfigError("orders must name at least one task order")
        return self

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["backbone"].pop("seed", None)
        if self.data is not None:
            d["data"] = self.data.to_dict()
            d["data"].pop("seed", None)
        d["orders"] = list(self.orders)
        if self.ingest is not None and self.ingest.split_ratios is not None:
            d["ingest"]["split_ratios"] = list(self.ingest.split_ratios)
        return d

    def hash(self) -> str:
        d = self.to_dict()
        d.pop("output_dir")
        blob = json.dumps(d, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:12]

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=True)


def _build(cls, raw: Any, where: str):
    if raw is None:
        return None
    if not isinstance(raw, dict):
        raise ConfigError(f"{where} must be a mapping")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(raw) - names)
    if unknown:
        raise ConfigError(f"unknown config field {where}.{unknown[0]}")
    kwargs = dict(raw)
    for key in ("examples_per_split", "class_priors", "split_ratios"):
        if key in kwargs and kwargs[key] is not None:
            kwargs[key] = tuple(kwargs[key])
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(f"{where}: {exc}") from None


def from_dict(raw: dict) -> RunConfig:
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a mapping")
    names = {f.name for f in dataclasses.fields(RunConfig)}
    unknown = sorted(set(raw) - names)
    if unknown:
        raise ConfigError(f"unknown config field {unknown[0]}")
    kw: dict[str, Any] = {}
    sub = {"backbone": BackboneConfig, "adapter": AdapterConfig, "train": TrainConfig,
           "router": RouterConfig, "data": GeneratorSpec, "ingest": IngestConfig}
    for key, value in raw.items():
        if key in sub:
            kw[key] = _build(sub[key], value, key)
        elif key == "orders":
            kw[key] = tuple([value] if isinstance(value, str) else value)
        else:
            kw[key] = value
    if "ingest" in kw and kw["ingest"] is not None and "data" not in raw:
        kw["data"] = None
    for key in ("memory_fraction",):
        if key in kw and not isinstance(kw[key], (int, float)):
            raise ConfigError(f"{key} must be a number")
    if "seed" in kw and not isinstance(kw["seed"], int):
        raise ConfigError("seed must be an integer")
    return RunConfig(**kw).validate()


def load_config(path: Path) -> RunConfig:
    try:
        raw = yaml.safe_load(Path(path).read_text(encoding="utf-8"))
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    except yaml.YAMLError as exc:
        raise ConfigError(f"config {path} is not valid YAML: {exc}") from None
    return from_dict(raw or {})
