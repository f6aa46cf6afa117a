"""Amortized stochastic-variational Bayesian GPLVM for single-cell count data."""

from .data import CountDataset, filter_qc, library_normalize, load_dataset, write_dataset
from .simulate import SimConfig, simulate
from .trainer import TrainConfig, ablation_presets, build_model, train

__version__ = "0.1.0"

__all__ = [
    "CountDataset",
    "SimConfig",
    "TrainConfig",
    "ablation_presets",
    "build_model",
    "filter_qc",
    "library_normalize",
    "load_dataset",
    "simulate",
    "train",
    "write_dataset",
]
