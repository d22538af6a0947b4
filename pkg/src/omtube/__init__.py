"""omtube: Monte Carlo verification of diffusion tube-probability asymptotics.

The package simulates diffusions in Fermi coordinates along a curve on a
Riemannian manifold, builds the coupling between the reference process and
a flat Brownian motion with pathwise-equal radial parts, and estimates the
small-tube probability ratio against the closed-form prediction
exp(-S(gamma)) with

    S(gamma) = integral of  |f - v|^2/2 + div(f)/2 - R/12

along the curve (R the scalar curvature).
"""

__version__ = "0.1.0"

from . import coupling, geometry, mc, om, sde
from .errors import (
    ChartDomainError,
    ConstructionError,
    EstimationError,
    InsufficientSamplesError,
    NumericError,
    OmtubeError,
    UnitVectorError,
)
from .geometry import (
    CurveSpec,
    ManifoldModel,
    MetricChart,
    constant_curve,
    euclidean,
    fermi_chart,
    great_circle_curve,
    hyperbolic,
    line_curve,
    sphere,
    warped_diagonal,
)

__all__ = [
    "__version__",
    "geometry",
    "om",
    "sde",
    "coupling",
    "mc",
    "ManifoldModel",
    "CurveSpec",
    "MetricChart",
    "euclidean",
    "sphere",
    "hyperbolic",
    "warped_diagonal",
    "constant_curve",
    "line_curve",
    "great_circle_curve",
    "fermi_chart",
    "OmtubeError",
    "ChartDomainError",
    "ConstructionError",
    "NumericError",
    "UnitVectorError",
    "EstimationError",
    "InsufficientSamplesError",
]
