"""Exception hierarchy shared by every stage of the toolkit."""

from __future__ import annotations


class ThermidError(Exception):
    """Base class for all toolkit errors."""


class ConfigurationError(ThermidError, ValueError):
    """Invalid parameters, bounds or settings."""


class DataError(ThermidError, ValueError):
    """Input data that violates a documented precondition."""


class SchemaError(DataError):
    """A telemetry or feature file does not match its documented schema."""


class RankDeficientError(DataError):
    """A regression design matrix has dependent columns.

    ``columns`` names the columns that the rank-revealing decomposition
    could not separate from the others.
    """

    def __init__(self, message: str, columns: list[str]):
        super().__init__(message)
        self.columns = list(columns)


class ExcitationDeficient(DataError):
    """The inputs of a window do not excite enough modes to identify a model."""

    def __init__(self, message: str, cond_r: float, rank: int, required: int, min_sv_r: float = 0.0):
        super().__init__(message)
        self.cond_r = cond_r
        self.min_sv_r = min_sv_r
        self.rank = rank
        self.required = required


class NumericalFailure(ThermidError, ArithmeticError):
    """A recursion lost symmetry/positivity or produced non-finite values."""

    def __init__(self, message: str, step: int | None = None):
        super().__init__(message)
        self.step = step


class ModelFormatError(ThermidError):
    """Serialized model file is unreadable."""


class ChecksumError(ModelFormatError):
    """Serialized payload does not match its recorded checksum or length."""


class UnsupportedVersionError(ModelFormatError):
    """Serialized payload was written by an unsupported format version."""
