"""Exception hierarchy shared by every quantlab module.

Each subclass maps onto one CLI exit code (see ``quantlab.cli``).
"""


class QuantlabError(Exception):
    """Base class for all library errors."""

    exit_code = 1


class ConfigError(QuantlabError, ValueError):
    """Invalid specification, configuration or argument value."""

    exit_code = 2

    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class FormatError(QuantlabError, ValueError):
    """Malformed binary dump or report file."""

    exit_code = 3

    def __init__(self, message, offset=None):
        self.offset = offset
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)


class NumericError(QuantlabError, ArithmeticError):
    """Numerical or optimization failure."""

    exit_code = 4


class DegenerateError(NumericError):
    """Zero-variance channel, constant token or zero vector where a spread is required."""


class SelectionError(NumericError):
    """No threshold on the ASOT grid satisfies the selection rule."""

    def __init__(self, message, curve=None):
        self.curve = curve if curve is not None else []
        super().__init__(message)


class StepError(NumericError):
    """A Cayley update could not be computed."""
