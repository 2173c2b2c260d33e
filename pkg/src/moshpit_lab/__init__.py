"""Simulation lab for Moshpit All-Reduce, its baselines and Moshpit SGD."""

from .core import FailureModel, GridConfig, Rng, distortion
from .protocols import ProtocolKind, TrialReport, run_protocol

__version__ = "0.1.0"

__all__ = ["FailureModel", "GridConfig", "Rng", "distortion", "ProtocolKind", "TrialReport", "run_protocol"]
