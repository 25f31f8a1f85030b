"""Exception hierarchy. Each family maps to a CLI exit status."""

from __future__ import annotations


class MbmdError(Exception):
    exit_code = 1


class ConfigError(MbmdError):
    exit_code = 3


class DataError(MbmdError):
    exit_code = 4


class MissingFileError(DataError):
    pass


class ShapeMismatchError(DataError):
    pass


class UnknownLabelError(DataError):
    pass


class VersionMismatchError(DataError):
    pass


class UnsupportedRateError(DataError):
    pass


class InfeasibleFoldError(DataError):
    pass


class MissingBandCacheError(DataError):
    pass


class ShapeError(MbmdError, ValueError):
    """Array shape incompatible with an operation."""

    exit_code = 4


class AlignmentError(MbmdError, ValueError):
    """Band edges do not fall on wavelet-packet leaf boundaries."""

    exit_code = 3


class NumericError(MbmdError, FloatingPointError):
    """NaN or Inf produced during computation."""

    exit_code = 5
