"""Exception hierarchy shared by all kp3d modules."""


class Kp3dError(Exception):
    """Base class for every error raised by this package."""


class GeometryError(Kp3dError):
    pass


class BehindCameraError(GeometryError):
    """A point with non-positive depth was projected."""


class InvalidDepthError(GeometryError):
    """Unprojection requested with a non-positive depth."""


class DimensionMismatchError(Kp3dError):
    pass


class NoNegativeError(Kp3dError):
    """Every candidate was excluded while mining a negative descriptor."""


class DegenerateError(Kp3dError):
    """Input configuration does not determine the requested estimate."""


class NonConvergenceError(Kp3dError):
    pass


class EstimationFailedError(Kp3dError):
    """Robust estimation found no consensus large enough to trust."""


class FormatError(Kp3dError):
    """Malformed on-disk data. ``offset`` is the byte offset of the problem, if known."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class ConfigError(Kp3dError):
    pass
