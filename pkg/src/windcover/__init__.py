"""Brownian winding statistics and abelian-cover heat kernels on planar domains."""

__version__ = "0.1.0"

from .geometry import (
    BoundaryCondition,
    Circle,
    PlanarDomain,
    build_domain,
    discretize,
)

__all__ = [
    "BoundaryCondition",
    "Circle",
    "PlanarDomain",
    "build_domain",
    "discretize",
    "__version__",
]
