"""Experiment configuration: nested dataclasses with strict parsing and lossless round trips."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
import typing
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from ..adapt import AdaptConfig
from ..datagen import DatagenConfig
from ..describe import MarsConfig
from ..detector import DetectorConfig
from ..track import TrackConfig


class ConfigError(ValueError):
    pass


@dataclass
class OptimizerConfig:
    learning_rate: float = 1e-2
    steps: int = 1200
    batch_size: int = 16
    seed: int = 0
    momentum: float = 0.9
    grad_clip: float = 100.0
    checkpoint_every: int = 0

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.steps < 0:
            raise ValueError("steps must be non-negative")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")
        if self.grad_clip < 0:
            raise ValueError("grad_clip must be non-negative (0 disables clipping)")
        if self.checkpoint_every < 0:
            raise ValueError("checkpoint_every must be non-negative")


@dataclass
class PairDataConfig:
    """View-pair crops for descriptor training and held-out retrieval."""

    train_worlds: int = 300
    eval_worlds: int = 40
    num_landmarks: tuple[int, int] = (5, 8)
    sun_azimuth_jitter: float = math.pi / 4
    sun_elevation_jitter: float = 0.1
    rotation_jitter: float = math.pi / 4
    offset_jitter: float = 8.0
    scale_jitter: tuple[float, float] = (0.85, 1.18)
    min_delta: float = 0.2
    min_visible: float = 0.9
    noise_sigma: float = 0.02

    def __post_init__(self):
        self.num_landmarks = tuple(self.num_landmarks)
        self.scale_jitter = tuple(self.scale_jitter)
        if self.train_worlds < 0 or self.eval_worlds < 0:
            raise ValueError("world counts must be non-negative")


@dataclass
class EvalConfig:
    n_source: int = 128
    n_target: int = 128
    conf_threshold: float = 0.3
    iou_threshold: float = 0.5
    class_aware: bool = True
    sequence_frames: int = 20
    sequences: int = 3

    def __post_init__(self):
        if not 0 <= self.conf_threshold <= 1 or not 0 <= self.iou_threshold <= 1:
            raise ValueError("thresholds must lie in [0, 1]")


@dataclass
class AblationConfig:
    adapt_enabled: bool = True
    mars_enabled: bool = True


@dataclass
class ExperimentConfig:
    datagen: DatagenConfig = field(default_factory=DatagenConfig)
    detector: DetectorConfig = field(default_factory=DetectorConfig)
    adapt: AdaptConfig = field(default_factory=AdaptConfig)
    mars: MarsConfig = field(default_factory=MarsConfig)
    track: TrackConfig = field(default_factory=TrackConfig)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    descriptor_optimizer: OptimizerConfig = field(
        default_factory=lambda: OptimizerConfig(learning_rate=3e-3, steps=600, batch_size=32, grad_clip=10.0)
    )
    pairs: PairDataConfig = field(default_factory=PairDataConfig)
    evaluation: EvalConfig = field(default_factory=EvalConfig)
    ablation: AblationConfig = field(default_factory=AblationConfig)

    def with_seed(self, seed: int) -> "ExperimentConfig":
        cfg = from_dict(ExperimentConfig, to_dict(self))
        cfg.optimizer.seed = seed
        cfg.descriptor_optimizer.seed = seed
        return cfg


def _is_dataclass_type(tp) -> bool:
    return isinstance(tp, type) and dataclasses.is_dataclass(tp)


def from_dict(cls, data, path: str = ""):
    """Build dataclass ``cls`` from plain data, rejecting unknown fields at any depth."""
    if not isinstance(data, dict):
        raise ConfigError(f"{path or cls.__name__}: expected a mapping, got {type(data).__name__}")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        where = f"{path}." if path else ""
        raise ConfigError(f"unknown field(s): {', '.join(where + u for u in unknown)}")
    kwargs = {}
    for key, value in data.items():
        tp = hints[key]
        sub = f"{path}.{key}" if path else key
        if _is_dataclass_type(tp):
            value = from_dict(tp, value, sub)
        kwargs[key] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{path or cls.__name__}: {exc}") from exc


def _plain(obj):
    if dataclasses.is_dataclass(obj):
        return {f.name: _plain(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def to_dict(cfg) -> dict:
    return _plain(cfg)


def dumps(cfg: ExperimentConfig) -> str:
    return yaml.safe_dump(to_dict(cfg), sort_keys=False)


def loads(text: str) -> ExperimentConfig:
    data = yaml.safe_load(text) or {}
    return from_dict(ExperimentConfig, data)


def load_config(path: str | Path | None) -> ExperimentConfig:
    if path is None:
        return ExperimentConfig()
    return loads(Path(path).read_text(encoding="utf-8"))


def save_config(cfg: ExperimentConfig, path: str | Path) -> None:
    Path(path).write_text(dumps(cfg), encoding="utf-8")


def config_hash(cfg) -> str:
    blob = json.dumps(to_dict(cfg), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()
