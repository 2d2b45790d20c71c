"""Numerical check of the comparison property for linear coupled systems."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Union

import numpy as np

from ..errors import PreconditionError
from .engine import rk4_backward
from .grid import TimeGrid

ORDER_TOL = 1e-8


def _as_fn(x):
    if callable(x):
        return x
    arr = np.asarray(x, dtype=float)
    return lambda t: arr


@dataclass(frozen=True)
class LinearSystem:
    """``dY_i = -(alpha_i(t) + sum_j A_ij(t) Y_j) dt``, ``Y_T = terminal``.

    ``alpha`` and ``A`` are arrays or callables of ``t``.
    """

    alpha: Union[Callable, np.ndarray]
    A: Union[Callable, np.ndarray]
    terminal: np.ndarray

    @property
    def ell(self) -> int:
        return np.asarray(self.terminal).size

    def generator(self, t, Y):
        return _as_fn(self.alpha)(t)[:, None] + _as_fn(self.A)(t) @ Y

    def solve(self, grid: TimeGrid) -> np.ndarray:
        ts = grid.half_nodes

        def G(s, Y, _Z):
            return self.generator(ts[s], Y)

        return rk4_backward(G, np.asarray(self.terminal, dtype=float), grid, 1, "linear system")


@dataclass
class ComparisonReport:
    ok: bool
    max_violation: float
    lower: np.ndarray
    upper: np.ndarray


def check_comparison(system_a: LinearSystem, system_b: LinearSystem, grid: TimeGrid) -> ComparisonReport:
    """Solve both systems and check ``Y_a <= Y_b + 1e-8`` at every node.

    Raises ``PreconditionError`` when the lower system's generator decreases
    in an off-diagonal component, when the terminal values are not ordered,
    or when ``g_a(t, Y_b) > g_b(t, Y_b)`` somewhere on the grid.
    """
    if system_a.ell != system_b.ell:
        raise PreconditionError("systems have different dimensions")
    ts = grid.half_nodes
    for t in ts:
        A = _as_fn(system_a.A)(t)
        off = A - np.diag(np.diag(A))
        if np.any(off < 0):
            raise PreconditionError(f"generator not nondecreasing in off-diagonal components at t={t:g}")
    if np.any(np.asarray(system_a.terminal) > np.asarray(system_b.terminal)):
        raise PreconditionError("terminal values are not ordered")
    Yb = system_b.solve(grid)
    for k, t in enumerate(grid.nodes):
        y = Yb[k][:, None]
        if np.any(system_a.generator(t, y) > system_b.generator(t, y) + 1e-12):
            raise PreconditionError(f"generators not ordered along the upper solution at t={t:g}")
    Ya = system_a.solve(grid)
    gap = float(np.max(Ya - Yb))
    return ComparisonReport(ok=gap <= ORDER_TOL, max_violation=max(gap, 0.0), lower=Ya, upper=Yb)
