"""YAML run configuration: strict loading into typed sections and a stable
content hash stamped into every output."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field

import yaml

from .metrics import ScoreConfig
from .model import ModelConfig
from .moe import ConfigError
from .training import LossWeights, TrainConfig


@dataclass
class DataConfig:
    n_scenes: int = 512
    seed: int = 0
    mismatch_rate: float = 0.05

    def __post_init__(self):
        if self.n_scenes < 1:
            raise ConfigError("data.n_scenes must be >= 1")
        if not 0.0 <= self.mismatch_rate <= 1.0:
            raise ConfigError("data.mismatch_rate must lie in [0, 1]")


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)
    score: ScoreConfig = field(default_factory=ScoreConfig)


def _build(cls, payload: dict, where: str):
    if not isinstance(payload, dict):
        raise ConfigError(f"section {where!r} must be a mapping")
    names = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(payload) - set(names)
    if unknown:
        raise ConfigError(
            f"unknown key(s) in {where!r}: {', '.join(sorted(unknown))}")
    kwargs = dict(payload)
    if cls is TrainConfig and "weights" in kwargs:
        kwargs["weights"] = _build(LossWeights, kwargs["weights"],
                                   f"{where}.weights")
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid {where!r} section: {exc}") from exc


_SECTIONS = {"model": ModelConfig, "train": TrainConfig, "data": DataConfig,
             "score": ScoreConfig}


def from_dict(payload: dict) -> RunConfig:
    if payload is None:
        payload = {}
    if not isinstance(payload, dict):
        raise ConfigError("top-level config must be a mapping")
    unknown = set(payload) - set(_SECTIONS)
    if unknown:
        raise ConfigError(
            f"unknown top-level section(s): {', '.join(sorted(unknown))}")
    return RunConfig(**{name: _build(cls, payload.get(name, {}), name)
                        for name, cls in _SECTIONS.items()})


def load_config(path) -> RunConfig:
    try:
        with open(path) as fh:
            payload = yaml.safe_load(fh)
    except yaml.YAMLError as exc:
        raise ConfigError(f"could not parse {path}: {exc}") from exc
    return from_dict(payload)


def config_hash(cfg: RunConfig) -> str:
    """sha256 over the fully resolved configuration."""
    blob = json.dumps(dataclasses.asdict(cfg), sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()
