"""Exception types raised across the package."""


class NpsemError(Exception):
    """Base class for all package errors."""


class SingularCovariance(NpsemError, ValueError):
    """A covariance matrix failed to factorize.

    ``pivot`` is the 0-based index of the leading minor that is not
    positive definite (``None`` when unknown, e.g. indefinite PSD checks).
    """

    def __init__(self, message, pivot=None):
        super().__init__(message)
        self.pivot = pivot


class DynamicsError(NpsemError, RuntimeError):
    """Evaluation of a dynamical model failed."""


class IntegrationDiverged(DynamicsError):
    """An ODE integration produced non-finite values."""


class InsufficientCatalog(NpsemError, ValueError):
    """Not enough admissible catalog entries for a neighbor search."""

    def __init__(self, message, admissible=None):
        super().__init__(message)
        self.admissible = admissible


class WeightCollapse(NpsemError, RuntimeError):
    """All particle weights are numerically zero at time ``t``."""

    def __init__(self, message, t=None):
        super().__init__(message)
        self.t = t


class NoObservations(NpsemError, ValueError):
    """No observed time step is available to estimate R."""


class EmptySelection(NpsemError, ValueError):
    """A score was requested over an empty set of time steps."""


class UnsupportedGapPattern(NpsemError, ValueError):
    """Gaps were found where the imputation workflow requires complete data."""


class ConfigError(NpsemError, ValueError):
    """Invalid experiment configuration."""
