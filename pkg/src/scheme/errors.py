"""Exception types raised across the package."""


class SchemeError(Exception):
    """Base class for every error raised by this package."""


class DimensionError(SchemeError, ValueError):
    pass


class NumericError(SchemeError, ArithmeticError):
    pass


class ParameterError(SchemeError, ValueError):
    pass


class ConfigError(SchemeError, ValueError):
    pass


class UsageError(SchemeError, RuntimeError):
    pass


class DivergenceError(SchemeError, RuntimeError):
    pass


class FormatError(SchemeError, ValueError):
    """Malformed binary input. ``offset`` is the byte position of the problem."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class ParseError(SchemeError, ValueError):
    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line
