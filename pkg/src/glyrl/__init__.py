"""Offline reinforcement learning for personalized glycemic targets.

Learns a per-state glycemic target policy from logged ICU time series:
cohort ingestion and normalization, sparse-autoencoder state encoding,
k-means state abstraction, tabular MDP estimation, policy iteration,
and mortality-calibrated off-policy evaluation.
"""

__version__ = "0.1.0"

from .errors import (
    ArtifactError,
    CalibrationError,
    ConfigError,
    ConvergenceError,
    DataError,
    GlyrlError,
    ImputationError,
    IntegrityError,
    NumericalError,
    ParseError,
    TrainingDivergedError,
)
from .config import PipelineConfig, load_config
from .pipeline import run_pipeline

__all__ = [
    "__version__",
    "GlyrlError",
    "ConfigError",
    "DataError",
    "ParseError",
    "IntegrityError",
    "ImputationError",
    "CalibrationError",
    "ArtifactError",
    "NumericalError",
    "TrainingDivergedError",
    "ConvergenceError",
    "PipelineConfig",
    "load_config",
    "run_pipeline",
]
