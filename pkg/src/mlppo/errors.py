"""Exception hierarchy shared across the package.

The CLI maps these onto distinct exit codes: configuration problems,
numerical failures, and I/O errors are reported separately.
"""


class MlppoError(Exception):
    """Base class for all package-specific errors."""


class ConfigError(MlppoError, ValueError):
    """Invalid configuration, parameters, or incompatible inputs."""


class UsageError(MlppoError, RuntimeError):
    """An API called out of sequence (e.g. stepping a finished episode)."""


class NumericError(MlppoError, RuntimeError):
    """A numerical computation failed or produced out-of-contract values."""


class SolverFailure(NumericError):
    """Linear solve did not reach the required residual.

    Carries the achieved residual for diagnostics.
    """

    def __init__(self, message: str, residual: float | None = None):
        super().__init__(message)
        self.residual = residual


class IntegrityError(NumericError):
    """A solution violated a physical bound beyond round-off tolerance."""


class GenerationError(NumericError):
    """Random-field generation failed (e.g. covariance not factorizable)."""
