"""Exception hierarchy shared by every svqlab module."""


class SvqLabError(Exception):
    """Base class for all library errors."""


class ShapeError(SvqLabError, ValueError):
    pass


class ParameterError(SvqLabError, ValueError):
    pass


class ConfigError(SvqLabError, ValueError):
    pass


class UsageError(SvqLabError, RuntimeError):
    pass


class NumericError(SvqLabError, ArithmeticError):
    pass


class DivergenceError(NumericError):
    pass


class DegenerateInputError(SvqLabError, ValueError):
    pass


class DataError(SvqLabError, ValueError):
    pass


class FormatError(SvqLabError, ValueError):
    """Raised when a tensor file is malformed; ``offset`` is the byte position."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset
