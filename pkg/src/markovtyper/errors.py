"""Exception types shared across the package."""


class MarkovTyperError(Exception):
    """Base class for errors raised by this package."""


class DimensionError(MarkovTyperError):
    """An operand's shape does not match what the operation requires."""


class ConfigurationError(MarkovTyperError):
    """A configuration value is out of its legal range."""


class DataError(MarkovTyperError):
    """A dataset or checkpoint on disk is missing, truncated, or inconsistent."""


class DivergenceError(MarkovTyperError):
    """Training produced a non-finite loss."""
