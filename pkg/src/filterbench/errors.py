"""Exception hierarchy shared by every module.

The CLI maps these onto exit codes: data problems exit with 3 and
numerical failures exit with 4.
"""


class FilterbenchError(Exception):
    """Base class for all package errors."""


class InvalidSpecError(FilterbenchError, ValueError):
    """A model object violates its structural invariants."""


class DataError(FilterbenchError, ValueError):
    """Malformed input data (files, series, option curves)."""


class NumericalError(FilterbenchError, ArithmeticError):
    """A computation degenerated (singular system, zero mass, ...)."""


class NoUniqueInvariantError(NumericalError):
    """The chain does not have a unique invariant distribution."""


class NotPrimitiveError(NumericalError):
    """A one-step kernel is not primitive."""


class DegenerateLikelihoodError(NumericalError):
    """All likelihood mass vanished at some step."""
