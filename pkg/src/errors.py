"""Exception roots; each maps to one CLI exit code."""


class LabError(Exception):
    """Base exception for the stability lab."""
    pass


class ValidationError(LabError):
    """Raised when an input violates a model invariant (exit code 2)."""
    pass


class NumericError(LabError):
    """Raised when a numerical procedure fails at run time (exit code 3)."""
    pass


class PropertyViolation(LabError):
    """Raised when a checked property or invariant is falsified (exit code 4)."""
    pass


class OutputError(LabError):
    """Raised when a result artifact cannot be written (exit code 5)."""
    pass
