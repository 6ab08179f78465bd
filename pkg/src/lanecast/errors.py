"""Exception hierarchy shared across the package."""


class LanecastError(Exception):
    """Base class for all errors raised by lanecast."""


class DimensionError(LanecastError, ValueError):
    """An array has the wrong rank or extent on some axis."""


class NumericError(LanecastError, FloatingPointError):
    """A NaN or infinity appeared where finite values are required."""


class ContractError(LanecastError, RuntimeError):
    """A precondition of an operation was violated by the caller."""


class LabelError(LanecastError, ValueError):
    """A class index is outside {0, 1, 2}."""


class GeometryError(LanecastError, ValueError):
    """A contour or box is degenerate."""


class CoverageError(LanecastError, LookupError):
    """A window requests frames the track does not contain."""


class AnnotationError(LanecastError, ValueError):
    """An annotation file is malformed or violates track invariants."""


class ConfigurationError(LanecastError, ValueError):
    """A configuration cannot be used (e.g. a class with no samples)."""


class DivergenceError(LanecastError, RuntimeError):
    """Training produced a non-finite loss."""
