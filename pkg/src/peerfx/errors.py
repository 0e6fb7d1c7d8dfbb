"""Exception hierarchy shared by every stage of the pipeline."""


class PeerFXError(Exception):
    """Base class for all package errors."""


class DataError(PeerFXError):
    """Problem with input data (schema, integrity, empty samples)."""


class LoadError(DataError):
    """A CSV cell or column does not conform to the schema."""


class IntegrityError(DataError):
    """Cross-record invariant violated (dangling references, duplicates)."""


class EmptySampleError(DataError):
    """Filtering or subsetting left nothing to estimate on."""


class ConfigError(PeerFXError):
    """Infeasible or malformed configuration."""


class NumericalError(PeerFXError):
    """Numerical routine failed (non-convergence, singular matrices)."""


class SeparationError(NumericalError):
    """Logit coefficients diverged: the data are (quasi-)separable."""


class ConvergenceError(NumericalError):
    """Iterative routine hit its iteration cap.

    Parameters
    ----------
    message : str
    last_value : float
        Last attained criterion value (deviance, max change, ...).
    """

    def __init__(self, message, last_value=float("nan")):
        super().__init__(message)
        self.last_value = last_value
