"""Optimizer, schedules, datasets, presets, the training loop, sweeps and reports."""
from .data import DatasetError, ImageDataset, build_tiny_corpus, load_dataset, tiny_corpus
from .optim import AdamW, ScheduleParams, lr_at
from .presets import ConfigError, ExperimentPreset, get_preset, preset_names
from .train import DivergenceError, MetricsLog, TrainResult, train

__all__ = [
    "AdamW", "ConfigError", "DatasetError", "DivergenceError", "ExperimentPreset", "ImageDataset",
    "MetricsLog", "ScheduleParams", "TrainResult", "build_tiny_corpus", "get_preset", "load_dataset",
    "lr_at", "preset_names", "tiny_corpus", "train",
]
