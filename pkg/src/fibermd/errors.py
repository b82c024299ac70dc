"""Exception types raised across the package."""


class FiberMDError(Exception):
    """Base class for all package errors."""


class NoGuidedModes(FiberMDError):
    pass


class InsufficientModes(FiberMDError):
    pass


class ResolutionTooCoarse(FiberMDError):
    pass


class DimensionMismatch(FiberMDError, ValueError):
    pass


class ShapeMismatch(DimensionMismatch):
    pass


class OddDimension(ShapeMismatch):
    pass


class DegenerateLabel(FiberMDError, ValueError):
    pass


class EmptyFrame(FiberMDError, ValueError):
    pass


class ConstantImage(FiberMDError, ValueError):
    """Correlation is undefined for a zero-variance image."""


class TooManyModes(FiberMDError, ValueError):
    pass


class FormatError(FiberMDError, ValueError):
    """Malformed or truncated file payload."""


class ConfigError(FiberMDError, ValueError):
    pass
