"""Exception hierarchy shared by every module."""


class MapPruneError(Exception):
    """Base class for all package errors."""


class ShapeError(MapPruneError, ValueError):
    """Tensor or layer shapes are incompatible."""


class UsageError(MapPruneError, RuntimeError):
    """An operation was called out of order (missing cache, empty accumulator...)."""


class ModelFormatError(MapPruneError, ValueError):
    """A model file is corrupt, truncated or of an unsupported version."""


class ConfigError(MapPruneError, ValueError):
    """Invalid experiment or pruning configuration."""


class DataError(MapPruneError, ValueError):
    """Dataset files are malformed or inconsistent."""


class NumericError(MapPruneError, ArithmeticError):
    """A computation produced non-finite values."""


class PruningError(MapPruneError, RuntimeError):
    """The pruning loop could not satisfy its stop rule.

    ``trace`` holds the partial trace recorded before the failure.
    """

    def __init__(self, message, trace=None):
        super().__init__(message)
        self.trace = trace
