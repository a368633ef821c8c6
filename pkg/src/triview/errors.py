"""Exception types raised across the package."""


class TriviewError(Exception):
    """Base class for all package errors."""


class ShapeError(TriviewError, ValueError):
    pass


class LabelError(TriviewError, ValueError):
    pass


class ParseError(TriviewError, ValueError):
    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class BoxError(TriviewError, ValueError):
    pass


class DataError(TriviewError, ValueError):
    pass


class IoError(TriviewError, OSError):
    pass


class NumericError(TriviewError, ArithmeticError):
    """A non-finite value appeared in a tensor or a training loss."""


class UsageError(TriviewError, ValueError):
    """Invalid command-line flags or experiment configuration."""


class RunError(TriviewError, RuntimeError):
    """A training or evaluation run failed; the message names the run and split."""
