"""Exception hierarchy shared by every andt module."""


class ANDTError(Exception):
    """Base class for all errors raised by andt."""


class DimensionError(ANDTError, ValueError):
    """Array shapes are incompatible with an operation."""


class ConfigError(ANDTError, ValueError):
    """A configuration value is invalid or inconsistent."""


class DegenerateBatchError(ANDTError, ValueError):
    """Batch statistics are undefined (fewer than two elements per channel)."""


class NumericFault(ANDTError, ArithmeticError):
    """A non-finite value appeared during a forward pass or training."""


class GradCheckAborted(ANDTError, ArithmeticError):
    """Finite-difference checking hit a non-finite value."""


class DataError(ANDTError, ValueError):
    """Dataset files are missing, malformed, or inconsistent."""


class UndefinedMetricError(ANDTError, ValueError):
    """A metric is undefined for the given labels (e.g. a single class)."""


class CheckpointError(ANDTError):
    """A checkpoint file cannot be read."""


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointChecksumError(CheckpointError):
    pass


class CheckpointTruncatedError(CheckpointError):
    pass
