"""mfglab: numerical laboratory for mean field game value functions on the torus."""

__version__ = "0.1.0"

from .torus import (
    Grid,
    GridFunction,
    GridMeasure,
    SignedGridMeasure,
    duality_pairing,
    gradient,
    laplacian,
    pushforward,
    sobolev_sample,
    w1_distance,
)

__all__ = [
    "__version__",
    "Grid",
    "GridFunction",
    "GridMeasure",
    "SignedGridMeasure",
    "duality_pairing",
    "gradient",
    "laplacian",
    "pushforward",
    "sobolev_sample",
    "w1_distance",
]
