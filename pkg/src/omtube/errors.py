"""Exception types shared across the package."""


class OmtubeError(Exception):
    """Base class for all package errors."""


class ChartDomainError(OmtubeError):
    """A point or tube radius lies outside the chart's validity domain."""


class ConstructionError(OmtubeError):
    """A chart or curve could not be built from the given data."""


class NumericError(OmtubeError):
    """A numeric routine produced non-finite or non-SPD results."""


class UnitVectorError(OmtubeError):
    """An argument that must be a unit vector is not one."""


class EstimationError(OmtubeError):
    """A Monte Carlo estimator could not produce a usable estimate."""


class InsufficientSamplesError(EstimationError):
    """Too few surviving paths to form a conditional estimate."""
