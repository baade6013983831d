"""Exception hierarchy shared by all modules."""


class MMFuseError(Exception):
    """Base class for every error raised by the package."""


class DimensionError(MMFuseError, ValueError):
    """Array lengths or shapes do not satisfy an operation's contract."""


class ConfigError(MMFuseError, ValueError):
    """A configuration value is invalid."""


class DataError(MMFuseError, ValueError):
    """Input data (labels, probabilities, records) is invalid."""


class ParseError(DataError):
    """A manifest or config file could not be parsed.

    ``line`` is the 1-based line number when known.
    """

    def __init__(self, message, line=None, field=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line
        self.field = field


class UndefinedMetricError(MMFuseError, ValueError):
    """A metric is undefined for the given labels (e.g. a single class)."""
