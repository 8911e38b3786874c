"""Evolving Gaussian-process covariance functions for time-series
extrapolation."""

__version__ = "0.1.0"

from .estimator import EvoCovRegressor, KernelGPRegressor
from .evolve import Individual, SearchConfig, evocov, go_with_the_first, random_search
from .expr import ExprType, Node, parse, serialize, type_check
from .gp import Dataset, MetricKind
from .kernels import builtin
from .psd import PsdCheckConfig, validate_kernel

__all__ = [
    "__version__",
    "EvoCovRegressor",
    "KernelGPRegressor",
    "Individual",
    "SearchConfig",
    "evocov",
    "go_with_the_first",
    "random_search",
    "ExprType",
    "Node",
    "parse",
    "serialize",
    "type_check",
    "Dataset",
    "MetricKind",
    "builtin",
    "PsdCheckConfig",
    "validate_kernel",
]
