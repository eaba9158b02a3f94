"""Exception types shared across the package.

The CLI maps these onto exit codes (data problems -> 3, numerical
failures -> 4); library users can catch them directly.
"""


class SkbvError(Exception):
    """Base class for all package errors."""


class DataError(SkbvError):
    """Malformed or inconsistent input data (shapes, parsing, invariants)."""


class NumericalError(SkbvError):
    """Numerical failure (non-PD matrix, non-finite likelihood, ...)."""
