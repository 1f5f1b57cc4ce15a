"""Exception types shared across the package.

Each error names the contract it guards; modules raise these instead of bare
ValueError so callers (and the CLI exit-code mapping) can tell configuration,
data, and numerical failures apart.
"""


class GsnavError(Exception):
    """Base class for all package errors."""


class AngleNearPi(GsnavError):
    """Rotation too close to the pi cut locus for a principal-branch log."""


class EmptyMask(GsnavError):
    """An operation that samples masked pixels received an all-false mask."""


class DimensionMismatch(GsnavError):
    """Image, mask, or buffer shapes do not agree."""


class StaleRayTable(GsnavError):
    """Ray opacity table was built against an older map generation."""


class DegenerateView(GsnavError):
    """Tracking view contains no visible map primitives or no masked pixels."""


class BehindCamera(GsnavError):
    """Landmark projects behind the camera plane."""


class NonMonotonicTime(GsnavError):
    """Measurement timestamps are not strictly increasing."""


class InsufficientSatellites(GsnavError):
    """Fewer than two common satellites in a differenced GNSS epoch."""


class InsufficientData(GsnavError):
    """Not enough buffered measurements to initialize the estimator."""


class ExcessiveMotion(GsnavError):
    """No low-motion segment found for gyro-bias / gravity initialization."""


class RankDeficient(GsnavError):
    """Normal equations are singular beyond the damping range."""


class DegenerateWaypoints(GsnavError):
    """Trajectory waypoints are unusable (too few, or non-increasing times)."""


class NoOverlap(GsnavError):
    """Two trajectories share no timestamps within the association window."""


class ConfigError(GsnavError):
    """Malformed configuration file or unknown key (carries a line number)."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class DataError(GsnavError):
    """Dataset on disk is missing pieces or malformed."""
