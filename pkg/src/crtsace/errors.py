"""Exception hierarchy.

Each family maps to a CLI exit code (see ``crtsace.cli``).
"""


class SaceError(Exception):
    """Base class for all package errors."""

    exit_code = 1


class InputError(SaceError):
    """Malformed or invalid input data."""

    exit_code = 2


class ConfigError(SaceError, ValueError):
    """Invalid configuration or argument."""

    exit_code = 5


class IntegrationError(SaceError):
    """Numerical integration failed (non-unimodal integrand, NaN, ...)."""

    exit_code = 3

    def __init__(self, message, cluster=None):
        if cluster is not None:
            message = f"cluster {cluster}: {message}"
        super().__init__(message)
        self.cluster = cluster


class FitError(SaceError):
    """Survival model fit did not converge."""

    exit_code = 3

    def __init__(self, message, trace=None):
        super().__init__(message)
        self.trace = trace or []


class SeparationError(FitError):
    """Complete or quasi-complete separation: coefficients diverge."""


class RankError(FitError):
    """Singular weighted cross-product in the logistic fit."""


class EstimationError(SaceError):
    """Point estimate undefined (empty arm, zero weight sum, positivity)."""

    exit_code = 3


class VarianceError(SaceError):
    """Sandwich assembly failed."""

    exit_code = 4


class SingularMatrixError(VarianceError):
    """Outer matrix is singular or too ill-conditioned to invert."""

    def __init__(self, message, condition_number=None):
        super().__init__(message)
        self.condition_number = condition_number


class BootstrapInstabilityError(VarianceError):
    """Too many bootstrap replicates failed."""

    def __init__(self, message, failures=None):
        super().__init__(message)
        self.failures = dict(failures or {})


class StudyError(SaceError):
    """Monte-Carlo study had too many failed replicates."""

    exit_code = 3

    def __init__(self, message, failures=None):
        super().__init__(message)
        self.failures = dict(failures or {})
