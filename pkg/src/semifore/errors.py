"""Exception types shared across the package."""


class SemiforeError(Exception):
    """Base class for all semifore errors."""


class ConfigError(SemiforeError, ValueError):
    """Inconsistent or incomplete experiment configuration."""


class InsufficientDataError(SemiforeError, ValueError):
    """Too few samples for the requested operation."""


class DegenerateDataError(SemiforeError, ValueError):
    """Data carries no usable signal (zero variance, constant series)."""


class DegenerateGeometryError(DegenerateDataError):
    """Training points have no geometric spread."""


class DivergenceError(SemiforeError, RuntimeError):
    """A trajectory or filter left the valid region.

    The step index at which divergence was detected is stored on ``step``.
    """

    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step


class CovarianceError(SemiforeError, RuntimeError):
    """A covariance matrix is not positive semidefinite beyond round-off."""


class NumericError(SemiforeError, RuntimeError):
    """A numerical routine (eigensolver, linear solve) failed."""


class DensityCollapseError(SemiforeError, RuntimeError):
    """A reconstructed density vanished on the training set."""


class PathologicalDensityError(SemiforeError, RuntimeError):
    """Rejection sampling acceptance probability is impractically small."""


class EstimationError(SemiforeError, RuntimeError):
    """Adaptive noise estimation failed to converge."""
