"""Run configuration.

One declarative YAML file covers every module. Keys may be nested or flat
dotted (``model.depth: 8``); command-line overrides (``--set key=value``)
take precedence over the file.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

import yaml

CATEGORIES = ("LocalChange", "LocalRemove", "LocalAdd", "GlobalStyle")


class ConfigError(ValueError):
    pass


@dataclass
class DataConfig:
    T: int = 4
    H: int = 16
    W: int = 16
    C: int = 3
    min_objects: int = 1
    max_objects: int = 3
    vocab_size: int = 64
    instr_len: int = 8
    category_weights: dict = field(default_factory=lambda: {c: 1.0 for c in CATEGORIES})
    n_samples: int = 256
    seed: int = 0

    def validate(self) -> None:
        for name in ("T", "H", "W", "C"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"data.{name} must be positive")
        if self.T < 2:
            raise ConfigError("data.T must be at least 2")
        if self.C != 3:
            raise ConfigError("data.C must be 3 (RGB scenes)")
        if self.H < 4 or self.W < 4:
            raise ConfigError("data.H and data.W must be at least 4")
        if not 1 <= self.min_objects <= self.max_objects <= 3:
            raise ConfigError("need 1 <= data.min_objects <= data.max_objects <= 3")
        if self.instr_len < 6:
            raise ConfigError("data.instr_len must be at least 6")
        if self.vocab_size < 64:
            raise ConfigError("data.vocab_size must be at least 64")
        unknown = set(self.category_weights) - set(CATEGORIES)
        if unknown:
            raise ConfigError(f"unknown categories in data.category_weights: {sorted(unknown)}")
        weights = [float(w) for w in self.category_weights.values()]
        if any(w < 0 for w in weights) or sum(weights) <= 0:
            raise ConfigError("data.category_weights must be non-negative with a positive sum")


@dataclass
class ModelConfig:
    width: int = 32
    heads: int = 2
    depth: int = 8
    split: int = 4
    edit_tokens: int = 8
    patch: int = 4
    extractor_blocks: int = 2
    mlp_ratio: int = 2

    def validate(self) -> None:
        if self.depth < 1:
            raise ConfigError("model.depth must be >= 1")
        if not 1 <= self.split <= self.depth:
            raise ConfigError("model.split must satisfy 1 <= split <= depth")
        if self.edit_tokens < 1:
            raise ConfigError("model.edit_tokens must be >= 1")
        if self.width % self.heads or self.width % 2:
            raise ConfigError("model.width must be even and divisible by model.heads")


@dataclass
class AlignConfig:
    temperature: float = 0.07
    weight: float = 0.75

    def validate(self) -> None:
        if not self.temperature > 0:
            raise ConfigError("align.temperature must be > 0")
        if not self.weight >= 0:
            raise ConfigError("align.weight must be >= 0")


@dataclass
class TrainConfig:
    lr: float = 1e-5
    steps: int = 2000
    batch_size: int = 16
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    grad_clip: float = 1.0
    seed: int = 0
    data_seed: int = 0
    checkpoint_every: int = 0
    log_every: int = 1
    precision: str = "float32"
    time_shift: float = 1.0

    def validate(self) -> None:
        if not self.lr >= 0:
            raise ConfigError("train.lr must be >= 0")
        if self.steps < 1 or self.batch_size < 1:
            raise ConfigError("train.steps and train.batch_size must be positive")
        if self.precision not in ("float32", "float64"):
            raise ConfigError("train.precision must be float32 or float64")
        if not self.time_shift > 0:
            raise ConfigError("train.time_shift must be positive")


@dataclass
class SamplerConfig:
    steps: int = 25
    seed: int = 0

    def validate(self) -> None:
        if self.steps < 1:
            raise ConfigError("sampler.steps must be >= 1")


@dataclass
class EvalConfig:
    heldout: int = 32
    heldout_offset: int = 1_000_000
    timesteps: tuple = (0.1, 0.5, 0.9)
    analysis_samples: int = 8


@dataclass
class Config:
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    align: AlignConfig = field(default_factory=AlignConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def validate(self) -> "Config":
        for section in (self.data, self.model, self.align, self.train, self.sampler):
            section.validate()
        if self.data.H % self.model.patch or self.data.W % self.model.patch:
            raise ConfigError("data.H and data.W must be divisible by model.patch")
        return self

    def to_flat(self) -> dict[str, Any]:
        return flatten(dataclasses.asdict(self))

    def replace(self, **flat: Any) -> "Config":
        return config_from_flat({**self.to_flat(), **flat})


def flatten(d: Mapping[str, Any], prefix: str = "") -> dict[str, Any]:
    out: dict[str, Any] = {}
    for k, v in d.items():
        key = f"{prefix}{k}"
        # category weights are a value, not a section
        if isinstance(v, Mapping) and k != "category_weights":
            out.update(flatten(v, key + "."))
        else:
            out[key] = list(v) if isinstance(v, tuple) else v
    return out


def _coerce(current: Any, value: Any, key: str) -> Any:
    if isinstance(value, str) and not isinstance(current, str):
        try:
            value = yaml.safe_load(value)
        except yaml.YAMLError as exc:
            raise ConfigError(f"cannot parse value for {key}: {value!r}") from exc
    if isinstance(current, bool):
        return bool(value)
    if isinstance(current, int):
        if isinstance(value, float) and not value.is_integer():
            raise ConfigError(f"{key} expects an integer, got {value!r}")
        return int(value)
    if isinstance(current, float):
        return float(value)
    if isinstance(current, tuple):
        return tuple(float(x) for x in value)
    if isinstance(current, dict):
        if not isinstance(value, Mapping):
            raise ConfigError(f"{key} expects a mapping")
        return {str(k): float(v) for k, v in value.items()}
    return value


def config_from_flat(flat: Mapping[str, Any]) -> Config:
    cfg = Config()
    sections = {f.name: getattr(cfg, f.name) for f in dataclasses.fields(cfg)}
    for key, value in flat.items():
        section_name, _, attr = key.partition(".")
        section = sections.get(section_name)
        if section is None or not attr or not hasattr(section, attr):
            raise ConfigError(f"unknown config key: {key}")
        try:
            setattr(section, attr, _coerce(getattr(section, attr), value, key))
        except (TypeError, ValueError) as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(f"bad value for {key}: {value!r}") from exc
    return cfg.validate()


def load_config(path: str | Path | None = None, overrides: Mapping[str, Any] | None = None) -> Config:
    flat: dict[str, Any] = {}
    if path is not None:
        text = Path(path).read_text()
        try:
            raw = yaml.safe_load(text) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
        if not isinstance(raw, Mapping):
            raise ConfigError(f"{path}: top level must be a mapping")
        flat.update(flatten(raw))
    flat.update(overrides or {})
    return config_from_flat(flat)


def parse_overrides(items: list[str] | None) -> dict[str, str]:
    out = {}
    for item in items or []:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"override must look like key=value: {item!r}")
        out[key.strip()] = value.strip()
    return out


def dump_config(cfg: Config) -> str:
    return json.dumps(cfg.to_flat(), sort_keys=True)
