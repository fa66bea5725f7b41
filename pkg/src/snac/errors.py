"""Exception types raised across the package."""


class SnacError(Exception):
    """Base class for all package errors."""


class BehindCamera(SnacError):
    """Point projects with a non-positive homogeneous factor."""


class SingularCovariance(SnacError):
    """Covariance is not invertible to working precision."""


class InvalidProbability(SnacError, ValueError):
    """Probability argument outside (0, 1]."""


class OriginSingularity(SnacError):
    """Field evaluated at the body center."""


class StepFailure(SnacError):
    """Adaptive integrator could not meet its tolerance."""


class DegenerateFit(SnacError):
    """Least-squares fit has no unique solution."""


class ConsensusFailure(SnacError):
    """No sample-consensus model reached the minimum inlier fraction."""


class DegenerateGeometry(SnacError):
    """Triangulation rays are parallel or camera centers coincide."""


class NonConvergence(SnacError):
    """Iterative solver hit its iteration limit."""


class CholeskyFailure(SnacError):
    """Covariance lost positive definiteness."""


class IndefiniteResult(SnacError):
    """Augmented covariance is not positive semi-definite."""


class UnknownId(SnacError, KeyError):
    """Landmark id not present in the filter state."""


class OriginPoint(SnacError):
    """Shape sample located at the body origin."""


class RankDeficient(SnacError):
    """Design matrix does not determine the coefficients."""


class NumericalFailure(SnacError):
    """Factorization failed because of overflow or loss of precision."""


class NoMinimum(SnacError):
    """Cross-validation objective has no interior minimum."""


class ConfigError(SnacError, ValueError):
    """Scenario configuration failed validation."""
