"""Experiment configuration: dataclasses, YAML round-trip, CLI overrides.

A config file is a YAML mapping with the same nesting as
:class:`ExperimentConfig`.  Command-line flags override file values via
dotted keys, e.g. ``gan.epochs=20``.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .errors import FormatError, ValidationError


@dataclass
class GanConfig:
    stage_count: int = 3
    noise_dim: int = 128
    batch_size: int = 64
    epochs: int = 1000
    learning_rate: float = 2e-4
    gp_weight: float = 50.0
    # checkpoints are kept only for epochs strictly greater than this
    warmup_epochs: int = 100
    # optimizer-step budget for scaled-down runs; None = run all epochs
    max_steps: int | None = None
    critic_steps: int = 1
    base_channels: int = 64
    disc_channels: int = 64
    beta1: float = 0.0
    beta2: float = 0.9


@dataclass
class SelectionConfig:
    ratio: float = 0.5
    mc_runs: int = 5
    ema_alpha: float = 0.5
    pool_multiplier: int = 4
    # generated-sample budget per FID evaluation
    fid_sample_cap: int = 2048
    # centroids use one stochastic forward pass; set False for plain eval passes
    centroid_dropout: bool = True


@dataclass
class ClassifierConfig:
    epochs: int = 30
    learning_rate: float = 1e-3
    runs: int = 5
    batch_size: int = 64
    stage_blocks: tuple[int, ...] = (3, 4, 6, 3)
    stage_channels: tuple[int, ...] = (64, 128, 256, 512)
    dropout_rate: float = 0.5


@dataclass
class ExperimentConfig:
    seed: int = 0
    data_root: str = ""
    profile: str = "cervical"
    device: str = "auto"
    gan: GanConfig = field(default_factory=GanConfig)
    selection: SelectionConfig = field(default_factory=SelectionConfig)
    classifier: ClassifierConfig = field(default_factory=ClassifierConfig)

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.selection.ratio <= 0:
            raise ValidationError("selection.ratio must be > 0")
        if self.selection.pool_multiplier < 1:
            raise ValidationError("selection.pool_multiplier must be >= 1")
        if self.selection.mc_runs < 1:
            raise ValidationError("selection.mc_runs must be >= 1")
        if not 0.0 <= self.selection.ema_alpha <= 1.0:
            raise ValidationError("selection.ema_alpha must lie in [0, 1]")
        if self.gan.stage_count < 1:
            raise ValidationError("gan.stage_count must be >= 1")
        if len(self.classifier.stage_blocks) != len(self.classifier.stage_channels):
            raise ValidationError("classifier stage_blocks and stage_channels must align")


_SECTIONS = {"gan": GanConfig, "selection": SelectionConfig, "classifier": ClassifierConfig}


def config_from_dict(raw: dict) -> ExperimentConfig:
    """Build an ExperimentConfig from a (possibly partial) nested mapping."""
    kwargs = {}
    for key, value in raw.items():
        if key in _SECTIONS:
            cls = _SECTIONS[key]
            names = {f.name for f in dataclasses.fields(cls)}
            unknown = set(value) - names
            if unknown:
                raise FormatError(f"unknown keys in '{key}' section: {sorted(unknown)}")
            section = cls(**{k: _coerce(cls, k, v) for k, v in value.items()})
            kwargs[key] = section
        else:
            names = {f.name for f in dataclasses.fields(ExperimentConfig)}
            if key not in names:
                raise FormatError(f"unknown config key: {key}")
            kwargs[key] = value
    return ExperimentConfig(**kwargs)


def _coerce(cls, name, value):
    # YAML gives lists; tuple-typed fields expect tuples
    for f in dataclasses.fields(cls):
        if f.name == name and isinstance(value, list):
            return tuple(value)
    return value


def config_to_dict(config: ExperimentConfig) -> dict:
    out = dataclasses.asdict(config)
    for section in _SECTIONS:
        for k, v in out[section].items():
            if isinstance(v, tuple):
                out[section][k] = list(v)
    return out


def load_config(path: str | Path) -> ExperimentConfig:
    path = Path(path)
    if not path.exists():
        raise FormatError(f"config file not found: {path}")
    try:
        raw = yaml.safe_load(path.read_text()) or {}
    except yaml.YAMLError as exc:
        raise FormatError(f"config file {path} is not valid YAML: {exc}") from exc
    if not isinstance(raw, dict):
        raise FormatError(f"config file {path} must contain a mapping")
    return config_from_dict(raw)


def save_config(config: ExperimentConfig, path: str | Path) -> None:
    Path(path).write_text(yaml.safe_dump(config_to_dict(config), sort_keys=True))


def apply_overrides(config: ExperimentConfig, overrides: dict[str, object]) -> ExperimentConfig:
    """Return a new config with dotted-key overrides applied (``gan.epochs=5``)."""
    raw = config_to_dict(config)
    for dotted, value in overrides.items():
        parts = dotted.split(".")
        node = raw
        for part in parts[:-1]:
            if part not in node:
                raise FormatError(f"unknown config section: {dotted}")
            node = node[part]
        if parts[-1] not in node:
            raise FormatError(f"unknown config key: {dotted}")
        node[parts[-1]] = value
    return config_from_dict(raw)


def config_fingerprint(obj) -> str:
    """Stable hash of a config (sub)object, used to assert regime isolation."""
    if dataclasses.is_dataclass(obj) and not isinstance(obj, type):
        obj = dataclasses.asdict(obj)
    blob = json.dumps(obj, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]
