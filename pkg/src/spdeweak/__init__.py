"""Semi-implicit Euler scheme for a semilinear SPDE on [0, 1] with Burgers drift and multiplicative noise,
its variations and Malliavin derivatives, and Monte Carlo error and regularity estimators."""

from .coefficients import BUNDLES, CoefficientBundle, RegularizationParams, get_bundle
from .errors import InvalidArgument, InvalidState, NumericalFailure, SPDEError
from .noise import NoisePath, coarsen, sample_path
from .solver import SchemeParams, Trajectory, simulate, simulate_coupled, step
from .spectral import Field, SpectralGrid, build_grid

__all__ = [
    "BUNDLES",
    "CoefficientBundle",
    "Field",
    "InvalidArgument",
    "InvalidState",
    "NoisePath",
    "NumericalFailure",
    "RegularizationParams",
    "SPDEError",
    "SchemeParams",
    "SpectralGrid",
    "Trajectory",
    "build_grid",
    "coarsen",
    "get_bundle",
    "sample_path",
    "simulate",
    "simulate_coupled",
    "step",
]
