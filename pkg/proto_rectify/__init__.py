"""
Semi-supervised 3D segmentation with prototype-based pseudo-label rectification.
"""

from .errors import ConfigurationError, ContractViolation, CorruptFileError, DataError, NumericalError, ShapeMismatchError
from .settings import ExperimentSettings, load_settings

__version__ = "0.1.0"

__all__ = [
    "ConfigurationError",
    "ContractViolation",
    "CorruptFileError",
    "DataError",
    "NumericalError",
    "ShapeMismatchError",
    "ExperimentSettings",
    "load_settings",
]
