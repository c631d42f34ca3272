"""Exception types shared across the package."""


class PointQLError(Exception):
    """Base class for all errors raised by pointql."""


class InvalidArgumentError(PointQLError, ValueError):
    """An argument is outside its documented domain."""


class DomainError(PointQLError, ValueError):
    """A model quantity left its admissible range (e.g. a non-positive intensity)."""

    def __init__(self, message, location=None, value=None):
        super().__init__(message)
        self.location = location
        self.value = value


class NumericError(PointQLError, ArithmeticError):
    """A numerical routine failed: singular matrix, failed factorization, no convergence."""


class InputFormatError(PointQLError, ValueError):
    """A data file could not be parsed; the message carries file and line."""
