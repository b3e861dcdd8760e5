"""Accordion: residual MLPs trained so that any priority prefix of their
units is a usable model, plus the tooling to profile, chunk, and ship them
incrementally over a link."""

from .arch import AccordionModel, ArchSpec, DepthConfig, Scheme, active_set, build, forward, size_of
from .data import Dataset, SpiralSpec, make_splits
from .errors import (
    AccordionError,
    ConfigError,
    DimensionError,
    InfeasibleBudgetError,
    InputError,
    IntegrityError,
    ProtocolError,
    UnreachableAccuracyError,
    VersionError,
)
from .policy import DepthPolicy, from_size_requests, from_throughput, named_policy, sample
from .profile import ProfileTable, build_table, select_by_accuracy, select_by_link, select_by_size
from .train import TrainConfig, accordion_step, evaluate, train

__version__ = "0.1.0"

__all__ = [
    "AccordionError", "AccordionModel", "ArchSpec", "ConfigError", "Dataset", "DepthConfig",
    "DepthPolicy", "DimensionError", "InfeasibleBudgetError", "InputError", "IntegrityError",
    "ProfileTable", "ProtocolError", "Scheme", "SpiralSpec", "TrainConfig",
    "UnreachableAccuracyError", "VersionError", "accordion_step", "active_set", "build",
    "build_table", "evaluate", "forward", "from_size_requests", "from_throughput",
    "make_splits", "named_policy", "sample", "select_by_accuracy", "select_by_link",
    "select_by_size", "size_of", "train",
]
