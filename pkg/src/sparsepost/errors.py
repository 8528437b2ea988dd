"""Exception types shared across the package."""


class SparsePostError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(SparsePostError, ValueError):
    """Dimension mismatch between arrays, masks, or network layers."""


class NumericError(SparsePostError, ArithmeticError):
    """Non-finite values where finite ones are required."""


class UsageError(SparsePostError, RuntimeError):
    """API misuse, e.g. a backward pass fed a stale or foreign cache."""


class ConfigError(SparsePostError, ValueError):
    """Invalid configuration value or unparseable config document."""


class FormatError(SparsePostError, ValueError):
    """Malformed on-disk data: bad magic numbers, impossible layouts."""


class UnsupportedVersionError(FormatError):
    """File written by an incompatible format version."""


class IntegrityError(SparsePostError, ValueError):
    """Checksum mismatch or truncated file."""


class ConsistencyError(SparsePostError, ValueError):
    """Jointly loaded pieces of data disagree with each other."""
