"""Entropy-rate-driven time grids for Brownian-bridge transport samplers."""

from .errors import BridgeSchedError, InvalidInput, NumericalFailure
from .core import FieldHandle, RateCurve, SampleBatch, StepDensity, TimeGrid, validate_grid

__version__ = "0.1.0"

__all__ = [
    "BridgeSchedError",
    "InvalidInput",
    "NumericalFailure",
    "FieldHandle",
    "RateCurve",
    "SampleBatch",
    "StepDensity",
    "TimeGrid",
    "validate_grid",
]
