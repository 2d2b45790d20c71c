"""A-priori bound constants for the backward systems.

Each constant is the smallest value satisfying its defining inequalities
uniformly over the grid, with strict lower limits realised as
``max(required, 1 + STRICT)`` (constants that must exceed one) or
``max(required, STRICT)`` (constants that must be positive).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from ..errors import DomainError
from ..market import MarketModel, coeff_arrays
from .grid import TimeGrid

STRICT = 1e-9
DEFAULT_N = 200


@dataclass(frozen=True)
class BoundsReport:
    """Constants for one case plus the uniform floor and ceiling they imply.

    ``lower_curve`` and ``upper_curve`` are the time-dependent comparison
    solutions behind the uniform values.
    """

    case: str
    constants: dict
    lower: float
    upper: float
    T: float
    lower_curve: Optional[Callable] = field(default=None, repr=False, compare=False)
    upper_curve: Optional[Callable] = field(default=None, repr=False, compare=False)

    def contains(self, values, slack: float = 1e-6) -> bool:
        v = np.asarray(values)
        return bool(np.all(v >= self.lower - slack) and np.all(v <= self.upper + slack))

    def to_dict(self) -> dict:
        out = {"case": self.case, "lower": self.lower, "upper": self.upper}
        out.update({k: float(v) for k, v in self.constants.items()})
        return out


def _theta2(b, sigma):
    """``b'(sigma sigma')^-1 b`` with ``b (..., ell, nx, m)``, ``sigma (..., ell, m, n)``."""
    S = np.einsum("...ik,...jk->...ij", sigma, sigma)
    Sx = np.broadcast_to(S[..., None, :, :], b.shape[:-1] + S.shape[-2:])
    return np.einsum("...i,...i->...", b, np.linalg.solve(Sx, b[..., None])[..., 0])


def _grid_stats(model: MarketModel, grid: TimeGrid):
    x = model.factor.grid() if model.factor.enabled else None
    ca = coeff_arrays(model, grid.half_nodes, x)
    return ca, _theta2(ca.b, ca.sigma)


def power_bounds(model: MarketModel, gamma: float, eps: Optional[float], grid: TimeGrid) -> BoundsReport:
    ca, th2 = _grid_stats(model, grid)
    T = model.horizon
    rho = ca.rho[..., None]
    core = gamma / (2 * (1 - gamma)) * th2 - rho + gamma * ca.r
    if gamma > 0:
        need = max(float(np.max(rho - gamma * ca.r)), float(np.max(core)) / (1 - gamma))
        a = max(need, 1.0 + STRICT)
        a1, a2 = np.exp(-a * T), 2 * np.exp(a * T)

        def lo_c(t):
            return np.exp(-a * (T - np.asarray(t)))

        def hi_c(t):
            e = np.exp(a * (T - np.asarray(t)))
            return (e + (e - 1) / a) ** (1 - gamma)

        return BoundsReport("power", {"a": a, "a1": a1, "a2": a2}, a1, a2, T, lo_c, hi_c)
    if eps is None or not eps > 0:
        raise DomainError("power utility with gamma < 0 needs eps > 0")
    need = max(-float(np.min(core)) / (1 - gamma),
               float(np.max(-rho + gamma * ca.r - gamma * eps)))
    a = max(need, STRICT)
    a1 = np.exp(-a * (1 - gamma) * T)
    a2 = np.exp(a * T) + eps**gamma / a * np.expm1(a * T)

    def lo_c(t):
        tau = T - np.asarray(t)
        return (np.exp(-a * tau) - np.expm1(-a * tau) / a) ** (1 - gamma)

    def hi_c(t):
        tau = T - np.asarray(t)
        return np.exp(a * tau) + eps**gamma / a * np.expm1(a * tau)

    return BoundsReport("power", {"a_prime": a, "a1_prime": a1, "a2_prime": a2, "eps": eps},
                        a1, a2, T, lo_c, hi_c)


def log_bounds(model: MarketModel, grid: TimeGrid) -> BoundsReport:
    T = model.horizon
    k = max(float(np.max(model.coefficients.rho)), STRICT)
    floor = np.exp(-k * T)

    def lo_c(t):
        tau = T - np.asarray(t)
        return np.exp(-k * tau) - np.expm1(-k * tau) / k

    return BoundsReport("log", {"k": k, "floor": floor}, floor, np.inf, T, lo_c, None)


def exp_deterministic_bounds(model: MarketModel, grid: TimeGrid, hcurve=None) -> BoundsReport:
    from .systems import solve_exp_h_deterministic

    T = model.horizon
    ca, th2 = _grid_stats(model, grid)
    if hcurve is None:
        hcurve = solve_exp_h_deterministic(model, grid)
    h = hcurve(grid.half_nodes)[:, None, None]
    rho = ca.rho[..., None]
    term = h * (1 - np.log(h))
    a1 = max(float(np.max(-rho + term)), STRICT)
    a2 = max(-float(np.min(0.5 * th2 - rho + term)), STRICT)
    a3 = float(np.min(h))
    a = np.exp(a1 * T)
    eps = np.exp(-(a2 / a3) * (-np.expm1(-a3 * T)))

    def lo_c(t):
        return np.exp(-(a2 / a3) * (-np.expm1(-a3 * (T - np.asarray(t)))))

    def hi_c(t):
        return np.exp(a1 * (T - np.asarray(t)))

    return BoundsReport("exp-deterministic", {"a1": a1, "a2": a2, "a3": a3, "a": a, "eps": eps},
                        eps, a, T, lo_c, hi_c)


def compute_bounds(model: MarketModel, case: str, gamma: Optional[float] = None,
                   beta: Optional[float] = None, eps: Optional[float] = None,
                   grid: Optional[TimeGrid] = None, h_field=None) -> BoundsReport:
    """Bound constants for ``case`` in {power, log, exp-deterministic, exp-random}.

    ``gamma`` is needed for power, ``eps`` for power with ``gamma < 0`` and
    ``beta`` for exp-random.  ``h_field`` lets the exp-random case reuse an
    already solved ``h``.
    """
    grid = grid or TimeGrid(model.horizon, DEFAULT_N)
    if case == "power":
        if gamma is None:
            raise DomainError("power bounds need gamma")
        return power_bounds(model, gamma, eps, grid)
    if case == "log":
        return log_bounds(model, grid)
    if case == "exp-deterministic":
        return exp_deterministic_bounds(model, grid, h_field)
    if case == "exp-random":
        from .systems import exp_random_bounds

        if beta is None or not beta > 0:
            raise DomainError("exp-random bounds need beta > 0")
        return exp_random_bounds(model, beta, grid, h_field)
    raise DomainError(f"unknown case {case!r}")
