"""Small MILP toolkit: model container, simplex, branch-and-bound."""

from .bnb import MipSolution, solve_mip
from .instance import MipInstance, PiecewiseConvexTerm, Row, StandardForm, Variable
from .mps import read_mps, write_mps
from .pwl import add_quadratic_penalty, binding_facets, polygon_contains, polygonize_circle
from .simplex import LPResult, solve_lp

__all__ = [
    "MipInstance", "PiecewiseConvexTerm", "Row", "StandardForm", "Variable",
    "LPResult", "solve_lp", "MipSolution", "solve_mip",
    "add_quadratic_penalty", "polygonize_circle", "polygon_contains", "binding_facets",
    "read_mps", "write_mps",
]
