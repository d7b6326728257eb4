"""Exception hierarchy for the sfdeblur package.

Every error raised on purpose derives from SfdError so callers (and the CLI)
can distinguish our failures from genuine bugs. The CLI maps ConfigError to
exit code 2, DataError to 3 and SolverError to 4.
"""


class SfdError(Exception):
    """Base class for all package errors."""


class ConfigError(SfdError):
    """Invalid configuration: unknown keys, out-of-range values, bad modes."""


class DataError(SfdError):
    """Invalid input data: missing files, corrupt rasters, checksum mismatch."""


class UndefinedMetricError(DataError):
    """A metric was requested on an empty or mismatched evaluation domain."""


class GeometryError(SfdError):
    """Degenerate geometric configuration."""


class SingularHomographyError(GeometryError):
    """Plane/motion combination produced a numerically singular homography."""


class PointAtInfinityError(GeometryError):
    """A warped point's homogeneous scale vanished."""


class BehindCameraError(GeometryError):
    """A plane or point has non-positive depth in the querying camera."""


class InitializationError(SfdError):
    """Bootstrap stage failed: no disparities, no features, no hypotheses."""


class SolverError(SfdError):
    """Numerical optimization failure."""


class SolverDivergenceError(SolverError):
    """An iterate became non-finite."""

    def __init__(self, stage, iteration):
        self.stage = stage
        self.iteration = iteration
        super().__init__(f"{stage} diverged at iteration {iteration}")
