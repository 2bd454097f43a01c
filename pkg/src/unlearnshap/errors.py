"""Exception hierarchy shared across the package."""


class UnlearnShapError(Exception):
    """Base class for all package errors."""


class ContractViolation(UnlearnShapError, ValueError):
    """Inputs break a structural precondition (shapes, bindings, lengths)."""


class ValidationError(UnlearnShapError, ValueError):
    """A value is outside its permitted domain."""


class CapabilityError(UnlearnShapError, RuntimeError):
    """The request is well-formed but too large for the chosen method."""


class ParseError(UnlearnShapError, ValueError):
    """A file could not be parsed. ``line`` is 1-based when known."""

    def __init__(self, message: str, line: int | None = None):
        super().__init__(message)
        self.line = line


class NumericFailure(UnlearnShapError, ArithmeticError):
    """A NaN or Inf appeared where finite values are required."""
