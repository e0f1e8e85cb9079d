"""Poisson ordinal network: unimodal Poisson head, Poisson label encoding,
Poisson focal loss and memory-bank contrastive learning for ordinal data."""

from .errors import (
    ConfigError,
    DataFormatError,
    InvalidInputError,
    TrainingDivergenceError,
    UndefinedMetricError,
)

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "DataFormatError",
    "InvalidInputError",
    "TrainingDivergenceError",
    "UndefinedMetricError",
    "__version__",
]
