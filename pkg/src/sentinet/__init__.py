"""Desk-scale CaffeNet-style toolkit for visual sentiment fine-tuning experiments."""

from sentinet.errors import (
    ConversionError,
    DataError,
    DimensionError,
    FitError,
    NumericError,
    SpecError,
    SurgeryError,
    TransferError,
    WeightFileError,
)

__version__ = "0.1.0"

__all__ = [
    "ConversionError",
    "DataError",
    "DimensionError",
    "FitError",
    "NumericError",
    "SpecError",
    "SurgeryError",
    "TransferError",
    "WeightFileError",
]
