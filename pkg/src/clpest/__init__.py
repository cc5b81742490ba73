"""Estimation of average conditional-linear-predictor slopes."""

from .basis import BasisSpec, linear_basis, parse_basis, polynomial_basis
from .clp import ClpBasis, brute_force_clp, build_R, derivative_weights, seb_monte_carlo
from .data import Dataset
from .estimators import (
    GIPW,
    DoublyRobust,
    Estimate,
    OaxacaBlinder,
    PartiallyLinear,
    dr,
    gipw,
    oaxaca_blinder,
    plm,
)
from .gps import GeneralizedPropensityScore, GpsFamily, GpsFit, fit_mle, multinomial_vinv
from .rng import stream
from .simulate import DESIGNS, Design, draw_sample, run_study

__version__ = "0.1.0"
