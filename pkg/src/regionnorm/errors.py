"""Exception types shared across the package."""


class RegionNormError(Exception):
    """Base class for all package errors."""


class ShapeError(RegionNormError):
    """Operands have incompatible or invalid shapes."""


class NumericError(RegionNormError):
    """An operation produced non-finite values, or training diverged."""


class EmptyRegionError(RegionNormError):
    """A selected mask region contains no pixels.

    This is a signal for callers that handle empty regions themselves, not a
    hard failure.
    """


class GenerationError(RegionNormError):
    """A random mask satisfying the requested coverage could not be produced."""


class ConfigError(RegionNormError):
    """A configuration file or CLI argument is malformed."""
