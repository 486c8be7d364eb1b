"""Exception hierarchy shared by all memseg modules."""


class MemsegError(Exception):
    """Base class for every error raised by this package."""


class FormatError(MemsegError, ValueError):
    """A file does not follow the expected layout (bad magic, bad header)."""


class TruncatedFileError(FormatError):
    """A file ended before its declared payload was complete."""


class MaxvalError(FormatError):
    """A netpbm file declares a maxval other than 255."""


class IndexOverflowError(MemsegError, ValueError):
    """A class index does not fit in the 8-bit mask encoding."""


class DimensionError(MemsegError, ValueError):
    """Array or raster dimensions are inconsistent."""


class ConfigError(MemsegError, ValueError):
    """A configuration value is unknown, unparsable or out of range."""


class NonFiniteError(MemsegError, FloatingPointError):
    """A forward or backward pass produced NaN or infinity."""


class EmptyInputError(MemsegError, ValueError):
    """An operation received an empty sequence, bank or directory."""


class UndefinedMetricError(MemsegError, ValueError):
    """A metric has no defined value for the given masks."""


class PairingError(MemsegError, ValueError):
    """Prediction and ground-truth directories do not pair up."""
