"""Exception hierarchy shared by all gridcast modules.

The CLI maps these onto exit codes: ``DataError`` -> 2, the numerical
errors (``NumericalError`` subclasses) -> 3.
"""


class GridcastError(Exception):
    """Base class for all gridcast errors."""


class ParameterError(GridcastError, ValueError):
    """Distribution or model parameters outside their valid domain."""


class DomainError(GridcastError, ValueError):
    """Function argument outside the function's domain (e.g. negative wind speed)."""


class DataError(GridcastError):
    """Input files that fail to parse or violate dataset invariants."""


class OutOfBoundsError(GridcastError, ValueError):
    """Query point outside a grid's bounding box."""


class NumericalError(GridcastError):
    """Base class for numerical failures (exit code 3)."""


class InvalidStartError(NumericalError):
    """Objective is not finite at the starting point."""


class FitError(NumericalError):
    """Parameter estimation failed; carries the best point found so far."""

    def __init__(self, message, best=None, diagnostics=None):
        super().__init__(message)
        self.best = best
        self.diagnostics = diagnostics or {}


class EstimationError(NumericalError):
    """Covariance parameters cannot be estimated from the given data."""


class DegenerateDataError(EstimationError):
    """All generalized increments vanish, so the restricted likelihood is flat."""


class SingularSystemError(NumericalError):
    """The kriging system matrix is singular."""
