"""Backward systems: grids, solved fields, bound constants and solvers."""

from .bounds import BoundsReport, compute_bounds
from .comparison import ComparisonReport, LinearSystem, check_comparison
from .grid import RegimeField, TimeGrid
from .hcurve import HCurve
from .systems import (
    exp_random_bounds,
    solve_exp_h_deterministic,
    solve_exp_h_random,
    solve_exp_P_random,
    solve_exp_Y,
    solve_log_h,
    solve_log_P,
    solve_power,
    solve_power_logform,
)

__all__ = [
    "BoundsReport",
    "ComparisonReport",
    "HCurve",
    "LinearSystem",
    "RegimeField",
    "TimeGrid",
    "check_comparison",
    "compute_bounds",
    "exp_random_bounds",
    "solve_exp_P_random",
    "solve_exp_Y",
    "solve_exp_h_deterministic",
    "solve_exp_h_random",
    "solve_log_P",
    "solve_log_h",
    "solve_power",
    "solve_power_logform",
]
