"""Exception types shared across the package."""


class AuwError(Exception):
    """Base class for all package errors."""


class DimensionError(AuwError):
    """Operand shapes do not agree."""


class NumericError(AuwError):
    """Non-finite values where finite ones are required."""


class PartitionError(AuwError):
    """Invalid column partition request."""


class DataError(AuwError):
    """Unusable input data (missing files, bad format, infeasible init)."""
