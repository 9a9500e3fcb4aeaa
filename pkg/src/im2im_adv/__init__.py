"""Adversarial perturbations against toy image-to-image translation models."""

from .core import DatasetSpec, FlowBudget, ImageBuffer, PairedDataset, Perturbation, UniversalBudget, make_synthetic_dataset
from .errors import (
    ArgumentError,
    CapabilityError,
    ConfigError,
    DataError,
    DimensionError,
    Im2ImAdvError,
    OptimizationDivergenceError,
    TrainingDivergenceError,
)
from .geometry import FlowField, SimilarityParams
from .harness import ExperimentConfig, run_experiment

__version__ = "0.1.0"

__all__ = [
    "ArgumentError",
    "CapabilityError",
    "ConfigError",
    "DataError",
    "DatasetSpec",
    "DimensionError",
    "ExperimentConfig",
    "FlowBudget",
    "FlowField",
    "ImageBuffer",
    "Im2ImAdvError",
    "OptimizationDivergenceError",
    "PairedDataset",
    "Perturbation",
    "SimilarityParams",
    "TrainingDivergenceError",
    "UniversalBudget",
    "make_synthetic_dataset",
    "run_experiment",
]
