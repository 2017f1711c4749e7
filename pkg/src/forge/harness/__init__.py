"""Experiment harness: config, data, training, evaluation and A/B comparison."""

from .config import ConfigError, ExperimentConfig, load_config, save_config
from .evaluate import evaluate, load_models
from .train import RunReport, TrainingDiverged, train_descriptor, train_detector

__all__ = [
    "ConfigError",
    "ExperimentConfig",
    "RunReport",
    "TrainingDiverged",
    "evaluate",
    "load_config",
    "load_models",
    "save_config",
    "train_descriptor",
    "train_detector",
]
