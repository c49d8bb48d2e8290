"""Exception types shared across the package."""


class LodemError(Exception):
    """Base class for all package-specific errors."""


class AngleNearPi(LodemError):
    """Rotation angle is within the guard band of pi; log map is ill-conditioned."""


class NonMonotonicStamps(LodemError):
    """Knot timestamps are not strictly increasing."""


class NonPositiveDt(LodemError):
    """A time increment that must be positive is zero or negative."""


class EmptyCloud(LodemError):
    """An operation received a point cloud with no points."""


class StaleRecords(LodemError):
    """Backward pass invoked without the matching forward records."""


class SingularInformation(LodemError):
    """Information matrix is rank deficient (degenerate geometry)."""


class DivergedSolve(LodemError):
    """Gauss-Newton cost increased for several consecutive iterations."""


class CholeskyFailure(LodemError):
    """A matrix expected to be positive definite failed its Cholesky factorization."""


class WindowRejected(LodemError):
    """A training window was rejected (e.g. rotation too close to pi)."""


class NoTrainableWindows(LodemError):
    """No input sequence is long enough to form a single training window."""


class MalformedFile(LodemError):
    """An input file does not match its documented binary or text layout."""


class TrajectoryTooShort(LodemError):
    """Groundtruth path is shorter than the smallest evaluation segment."""


class ConfigError(LodemError):
    """Run configuration failed schema validation."""
