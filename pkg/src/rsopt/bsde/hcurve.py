"""Closed-form h for exponential utility with a deterministic interest rate."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.typing import NDArray

from .grid import TimeGrid


@dataclass(frozen=True)
class HCurve:
    """``h_t = (exp(-int_t^T r) + int_t^T exp(-int_t^s r) ds)^-1`` for step-function ``r``.

    ``breakpoints`` and ``rates`` describe ``r`` as a right-continuous step
    function on ``[0, T]``; every integral is done piece by piece in closed
    form.
    """

    T: float
    breakpoints: NDArray[np.float64]
    rates: NDArray[np.float64]

    def _edges(self):
        return np.r_[self.breakpoints, self.T]

    def __call__(self, t) -> NDArray[np.float64]:
        t = np.atleast_1d(np.asarray(t, dtype=float))
        return np.array([1.0 / self._inverse(float(s)) for s in t])

    def _inverse(self, t: float) -> float:
        edges = self._edges()
        disc = 0.0  # int_t^{u0} r
        acc = 0.0
        for k, r in enumerate(self.rates):
            u0 = max(edges[k], t)
            u1 = edges[k + 1]
            if u1 <= u0:
                continue
            span = u1 - u0
            # int_{u0}^{u1} exp(-disc - r (s - u0)) ds
            piece = span if r == 0 else -np.expm1(-r * span) / r
            acc += np.exp(-disc) * piece
            disc += r * span
        return np.exp(-disc) + acc

    def on(self, grid: TimeGrid) -> NDArray[np.float64]:
        return self(grid.nodes)

    def derivative_residual(self, t) -> NDArray[np.float64]:
        """``h' + h (r - h)`` by a central difference (diagnostic)."""
        t = np.atleast_1d(np.asarray(t, dtype=float))
        e = 1e-5
        hp = (self(t + e) - self(t - e)) / (2 * e)
        h = self(t)
        idx = np.clip(np.searchsorted(self.breakpoints, t, side="right") - 1, 0, len(self.rates) - 1)
        return hp + h * (self.rates[idx] - h)
