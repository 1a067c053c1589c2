"""Mask-conditioned fundus image synthesis with grade manipulation (desk scale)."""

from drgan.errors import (
    ConfigurationError,
    DRGANError,
    IngestionError,
    NumericError,
    StateError,
    ValidationError,
)

__version__ = "0.1.0"

N_GRADES = 5

__all__ = [
    "ConfigurationError",
    "DRGANError",
    "IngestionError",
    "NumericError",
    "StateError",
    "ValidationError",
    "N_GRADES",
]
