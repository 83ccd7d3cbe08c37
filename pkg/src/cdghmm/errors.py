"""Exception hierarchy shared across the package."""


class CdghmmError(Exception):
    """Base class for all package errors."""


class DataError(CdghmmError):
    """Malformed input data: bad shapes, ragged grids, unparseable cells."""


class DecompositionError(CdghmmError):
    """Covariance matrix is not positive definite.

    `minor` is the 1-based order of the first failing leading minor.
    """

    def __init__(self, message, minor=None):
        super().__init__(message)
        self.minor = minor


class SolverError(CdghmmError):
    """A covariance M-step linear system could not be solved."""


class ImpossibleObservationError(CdghmmError):
    """Total emission mass is zero at some cell; usually corrupted dropout flags."""

    def __init__(self, message, subject=None, time=None):
        super().__init__(message)
        self.subject = subject
        self.time = time


class InitializationError(CdghmmError):
    """Initial state assignments could not be produced (e.g. m exceeds distinct rows)."""


class AscentError(CdghmmError):
    """Observed log-likelihood decreased beyond tolerance during EM."""


class FitError(CdghmmError):
    """Every restart of the EM failed."""
