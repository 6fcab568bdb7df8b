"""Exception hierarchy shared by every module of the toolkit."""


class LmnError(Exception):
    """Base class for all toolkit errors."""


class DimensionError(LmnError, ValueError):
    """A tensor or node shape does not satisfy an operation's contract."""


class ConfigurationError(LmnError, ValueError):
    """Invalid hyper-parameters, block settings or architecture configs."""


class StateError(LmnError, RuntimeError):
    """An object is used before it reached the required state."""


class DataError(LmnError, ValueError):
    """Dataset contents are out of range (labels, pixel values)."""


class FormatError(LmnError, ValueError):
    """A file on disk does not follow its binary layout."""


class NumericError(LmnError, ArithmeticError):
    """Non-finite values or degenerate statistics."""
