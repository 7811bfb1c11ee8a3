"""Thermal model identification for multicore packages from coarse telemetry,
with classifiers that predict which telemetry windows yield a trustworthy
model."""

from .arx import ArxModel, IdentDiagnostics, identify, identify_arrays
from .errors import (ChecksumError, ConfigurationError, DataError, ExcitationDeficient, ModelFormatError,
                     NumericalFailure, RankDeficientError, SchemaError, ThermidError, UnsupportedVersionError)
from .kalman import run_kalman, score_model, score_models
from .power import PowerModel, fit_power_model, partition_powers, predict_package
from .telemetry import MetricKind, ScalingBounds, TelemetryFrame, Window

__version__ = "0.1.0"

__all__ = [
    "ArxModel", "IdentDiagnostics", "identify", "identify_arrays",
    "ChecksumError", "ConfigurationError", "DataError", "ExcitationDeficient", "ModelFormatError",
    "NumericalFailure", "RankDeficientError", "SchemaError", "ThermidError", "UnsupportedVersionError",
    "run_kalman", "score_model", "score_models",
    "PowerModel", "fit_power_model", "partition_powers", "predict_package",
    "MetricKind", "ScalingBounds", "TelemetryFrame", "Window",
]
