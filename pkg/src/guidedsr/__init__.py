"""Guided single-image super-resolution with unsupervised external learning."""

from .errors import (
    ConfigurationError, DataError, DomainError, FormatError, GuidedSRError, NumericalError,
    PlanningError,
)

__version__ = "0.1.0"

__all__ = [
    "ConfigurationError", "DataError", "DomainError", "FormatError", "GuidedSRError",
    "NumericalError", "PlanningError", "__version__",
]
