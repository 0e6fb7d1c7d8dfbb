"""Peer-effect estimation for grouped training-program data."""

from .core import Dataset, FilterRules, filter_estimation_sample, load_dataset, write_dataset
from .errors import (
    ConfigError, ConvergenceError, DataError, EmptySampleError, IntegrityError, LoadError,
    NumericalError, PeerFXError, SeparationError,
)
from .synth import DGPConfig, GroundTruth, generate

__version__ = "0.1.0"

__all__ = [
    "Dataset", "FilterRules", "filter_estimation_sample", "load_dataset", "write_dataset",
    "ConfigError", "ConvergenceError", "DataError", "EmptySampleError", "IntegrityError",
    "LoadError", "NumericalError", "PeerFXError", "SeparationError",
    "DGPConfig", "GroundTruth", "generate",
]
