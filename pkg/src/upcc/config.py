"""Experiment configuration: JSON document with strict schema and defaults.

Every field has a default; unknown keys are rejected before any work starts.
The canonical hash covers the fully-resolved configuration, so two reports
with equal hashes were produced from byte-identical settings.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .generator import GeneratorParams


class ConfigError(Exception):
    pass


@dataclass(frozen=True)
class DataConfig:
    train_path: str = "train.tsv"
    dev_path: str = "dev.tsv"
    test_path: str = "test.tsv"
    num_classes: int = 5
    synthetic: dict | None = None  # GeneratorParams overrides for `gen`

    def generator_params(self) -> GeneratorParams:
        overrides = dict(self.synthetic or {})
        fields = {f.name for f in dataclasses.fields(GeneratorParams)}
        unknown = set(overrides) - fields
        if unknown:
            raise ConfigError(f"unknown synthetic keys: {sorted(unknown)}")
        for key in ("doc_length_range", "split_fractions"):
            if key in overrides:
                overrides[key] = tuple(overrides[key])
        return GeneratorParams(**overrides)


@dataclass(frozen=True)
class TokenizerConfig:
    min_freq: int = 1
    max_len: int = 24


@dataclass(frozen=True)
class EncoderSection:
    hidden_size: int = 64
    layers: int = 2
    heads: int = 4
    ffn_dim: int = 256
    dropout_rate: float = 0.1


@dataclass(frozen=True)
class UpinitConfig:
    scale_mode: str = "closed_form"  # closed_form | sampled
    scale_seed: int = 0
    batch_size: int = 64


@dataclass(frozen=True)
class ModelConfig:
    variant: str = "full_cross_context"
    cross_heads: int = 4


@dataclass(frozen=True)
class TrainSection:
    learning_rate: float = 3e-4
    batch_size: int = 32
    max_epochs: int = 20
    patience: int = 2
    phase_a_epochs: int = 2
    eval_every: int | None = None


@dataclass(frozen=True)
class ExperimentSection:
    name: str = "experiment"
    seeds: tuple[int, ...] = (0, 1, 2)
    scale_grid_start: float = 0.05
    scale_grid_stop: float = 1.5
    scale_grid_step: float = 0.05
    fractions: tuple[float, ...] = (0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0)
    length_grid: tuple[int, ...] = (16, 32, 64, 128)
    downsample_seed: int = 13

    def scale_grid(self) -> list[float]:
        grid = []
        value = self.scale_grid_start
        while value <= self.scale_grid_stop + 1e-9:
            grid.append(round(value, 10))
            value += self.scale_grid_step
        return grid


_SECTIONS = {
    "data": DataConfig,
    "tokenizer": TokenizerConfig,
    "encoder": EncoderSection,
    "upinit": UpinitConfig,
    "model": ModelConfig,
    "train": TrainSection,
    "experiment": ExperimentSection,
}


@dataclass(frozen=True)
class ExperimentConfig:
    data: DataConfig = field(default_factory=DataConfig)
    tokenizer: TokenizerConfig = field(default_factory=TokenizerConfig)
    encoder: EncoderSection = field(default_factory=EncoderSection)
    upinit: UpinitConfig = field(default_factory=UpinitConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainSection = field(default_factory=TrainSection)
    experiment: ExperimentSection = field(default_factory=ExperimentSection)

    def replaced(self, **section_updates: dict) -> "ExperimentConfig":
        """New config with per-section field updates, e.g. replaced(model={'variant': v})."""
        kwargs = {}
        for name in _SECTIONS:
            section = getattr(self, name)
            if name in section_updates:
                section = dataclasses.replace(section, **section_updates[name])
            kwargs[name] = section
        return ExperimentConfig(**kwargs)

    def to_dict(self) -> dict:
        return {name: dataclasses.asdict(getattr(self, name)) for name in _SECTIONS}

    def canonical_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    def hash(self) -> str:
        return hashlib.sha256(self.canonical_json().encode("utf-8")).hexdigest()


def _build_section(cls, payload: dict, where: str):
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(payload) - set(fields)
    if unknown:
        raise ConfigError(f"unknown keys in {where}: {sorted(unknown)}")
    coerced: dict[str, Any] = {}
    for key, value in payload.items():
        default = getattr(cls(), key)
        if isinstance(default, tuple) and isinstance(value, list):
            value = tuple(value)
        coerced[key] = value
    return cls(**coerced)


def config_from_dict(payload: dict) -> ExperimentConfig:
    if not isinstance(payload, dict):
        raise ConfigError("config root must be a JSON object")
    unknown = set(payload) - set(_SECTIONS)
    if unknown:
        raise ConfigError(f"unknown config sections: {sorted(unknown)}")
    sections = {}
    for name, cls in _SECTIONS.items():
        raw = payload.get(name, {})
        if not isinstance(raw, dict):
            raise ConfigError(f"section {name!r} must be an object")
        sections[name] = _build_section(cls, raw, name)
    cfg = ExperimentConfig(**sections)
    validate_config(cfg)
    return cfg


def load_config(path: str | Path) -> ExperimentConfig:
    try:
        payload = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    return config_from_dict(payload)


def validate_config(cfg: ExperimentConfig) -> None:
    from .model import Variant
    from .entity_init import SCALE_MODES

    if cfg.train.learning_rate <= 0:
        raise ConfigError("train.learning_rate must be positive")
    if cfg.train.patience < 1:
        raise ConfigError("train.patience must be >= 1")
    if cfg.tokenizer.max_len < 2:
        raise ConfigError("tokenizer.max_len must be >= 2")
    if cfg.upinit.scale_mode not in SCALE_MODES:
        raise ConfigError(f"upinit.scale_mode must be one of {SCALE_MODES}")
    try:
        Variant(cfg.model.variant)
    except ValueError:
        raise ConfigError(f"unknown model.variant {cfg.model.variant!r}") from None
    if cfg.data.num_classes < 2:
        raise ConfigError("data.num_classes must be >= 2")
    if not cfg.experiment.seeds:
        raise ConfigError("experiment.seeds must be non-empty")
    if cfg.data.synthetic is not None:
        cfg.data.generator_params()
