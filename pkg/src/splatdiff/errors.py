"""Exception types raised by splatdiff."""


class SplatDiffError(Exception):
    """Base class for all errors raised by this package."""


class FormatError(SplatDiffError, ValueError):
    """Malformed or unsupported input file."""


class LengthError(FormatError):
    """Binary payload shorter than its header declares."""


class UnsupportedModelError(FormatError):
    """Camera model other than PINHOLE / SIMPLE_PINHOLE."""


class ValidationError(SplatDiffError, ValueError):
    """Numerical input violates a documented precondition."""


class NoCovisibleRegionError(SplatDiffError):
    """Frustum co-visibility filtering removed every primitive of a scene."""


class SynthSpecError(SplatDiffError, ValueError):
    """Synthetic scene specification is inconsistent."""
