"""Backward integrators shared by all systems.

A system is described by its generator ``G(s, Y, Z)`` where ``s`` indexes
the stage table (``grid.half_nodes``: node ``k`` is ``s = 2k``), ``Y`` has
shape ``(S, nx)`` and ``Z`` shape ``(S, nx, n)``.  The equation is

    dY = -G dt + Z' dW,

integrated from the terminal value back to ``t = 0``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
from scipy.linalg import solve_banded

from ..errors import SolverError
from .grid import TimeGrid

STEP_RULE = 0.1


@dataclass(frozen=True)
class Envelope:
    """Admissible range for the state; leaving it aborts the solve."""

    lo: np.ndarray
    hi: np.ndarray
    label: str = "a-priori bound"

    def check(self, Y, t: float, name: str):
        if not np.all(np.isfinite(Y)):
            raise SolverError(f"{name}: non-finite value at t={t:g}; refine the time grid")
        lo = self.lo.reshape(-1, *([1] * (Y.ndim - 1)))
        hi = self.hi.reshape(-1, *([1] * (Y.ndim - 1)))
        bad = (Y < lo) | (Y > hi)
        if np.any(bad):
            i = int(np.argwhere(bad)[0][0])
            raise SolverError(
                f"{name}: component {i + 1} left the {self.label} envelope "
                f"[{float(self.lo[i]):.6g}, {float(self.hi[i]):.6g}] at t={t:g}; refine the time grid"
            )


def check_step_rule(q, grid: TimeGrid) -> None:
    rate = float(np.max(np.abs(np.diag(q)))) if np.size(q) else 0.0
    if rate > 0 and grid.dt > STEP_RULE / rate + 1e-15:
        raise SolverError(
            f"time step {grid.dt:g} exceeds {STEP_RULE}/max|q_ii| = {STEP_RULE / rate:g}; "
            f"use N >= {int(np.ceil(grid.T * rate / STEP_RULE))}"
        )


def rk4_backward(G: Callable, yT, grid: TimeGrid, n: int, name: str,
                 envelope: Optional[Envelope] = None) -> np.ndarray:
    """Classical RK4 from ``T`` to 0 with zero martingale part.

    Returns the values on the grid nodes, shape ``(N + 1, S)``.
    """
    y = np.asarray(yT, dtype=float).reshape(-1, 1).copy()
    S = y.shape[0]
    zero = np.zeros((S, 1, n))
    out = np.empty((grid.N + 1, S))
    out[-1] = y[:, 0]
    dt = grid.dt
    t = grid.nodes

    def rhs(s, yy):
        return -G(s, yy, zero)

    for k in range(grid.N - 1, -1, -1):
        s1, sm, s0 = 2 * k + 2, 2 * k + 1, 2 * k
        k1 = rhs(s1, y)
        k2 = rhs(sm, y - 0.5 * dt * k1)
        k3 = rhs(sm, y - 0.5 * dt * k2)
        k4 = rhs(s0, y - dt * k3)
        y = y - dt / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
        if envelope is not None:
            envelope.check(y, t[k], name)
        elif not np.all(np.isfinite(y)):
            raise SolverError(f"{name}: non-finite value at t={t[k]:g}; refine the time grid")
        out[k] = y[:, 0]
    return out


class FactorOperator:
    """Generator of the factor, ``mu(x) d/dx + 1/2 |vol|^2 d2/dx2``, Neumann ends."""

    def __init__(self, x, drift, vol):
        self.x = np.asarray(x, dtype=float)
        self.vol = np.asarray(vol, dtype=float)
        nx = self.x.size
        dx = self.x[1] - self.x[0]
        self.dx = dx
        s2 = float(self.vol @ self.vol)
        mu = np.asarray(drift, dtype=float) * np.ones(nx)
        lower = -mu / (2 * dx) + s2 / (2 * dx * dx)
        diag = np.full(nx, -s2 / (dx * dx))
        upper = mu / (2 * dx) + s2 / (2 * dx * dx)
        # ghost nodes mirror the first interior node, so the slope is zero
        upper[0] = s2 / (dx * dx)
        lower[-1] = s2 / (dx * dx)
        lower[0] = 0.0
        upper[-1] = 0.0
        self.lower, self.diag, self.upper = lower, diag, upper

    def apply(self, Y):
        """``L Y`` along the last axis."""
        out = self.diag * Y
        out[..., :-1] += self.upper[:-1] * Y[..., 1:]
        out[..., 1:] += self.lower[1:] * Y[..., :-1]
        return out

    def banded(self, alpha):
        """Banded storage of ``I - alpha L``."""
        ab = np.zeros((3, self.x.size))
        ab[0, 1:] = -alpha * self.upper[:-1]
        ab[1] = 1.0 - alpha * self.diag
        ab[2, :-1] = -alpha * self.lower[1:]
        return ab

    def gradient(self, Y):
        """``vol * dY/dx`` by central differences (zero at the ends), shape ``(..., nx, n)``."""
        d = np.zeros_like(Y)
        d[..., 1:-1] = (Y[..., 2:] - Y[..., :-2]) / (2 * self.dx)
        return d[..., None] * self.vol


def cn_backward(G: Callable, YT, grid: TimeGrid, op: FactorOperator, name: str,
                picard: int = 3, envelope: Optional[Envelope] = None):
    """Crank-Nicolson in the factor, trapezoidal generator with Picard sweeps.

    ``picard = 0`` evaluates the generator at the previous time level only.
    Returns ``(values (N+1, S, nx), gradients (N+1, S, nx, n))``.
    """
    Y = np.array(YT, dtype=float)
    S, nx = Y.shape
    n = op.vol.size
    vals = np.empty((grid.N + 1, S, nx))
    grads = np.empty((grid.N + 1, S, nx, n))
    dt = grid.dt
    ab = op.banded(0.5 * dt)
    Z = op.gradient(Y)
    vals[-1], grads[-1] = Y, Z
    t = grid.nodes
    for k in range(grid.N - 1, -1, -1):
        G1 = G(2 * k + 2, Y, Z)
        base = Y + 0.5 * dt * op.apply(Y) + 0.5 * dt * G1
        Yk, Zk = Y, Z
        for _ in range(picard + 1):
            G0 = G(2 * k, Yk, Zk)
            rhs = base + 0.5 * dt * G0
            Yk = solve_banded((1, 1), ab, rhs.T, check_finite=False).T
            Zk = op.gradient(Yk)
        Y, Z = Yk, Zk
        if envelope is not None:
            envelope.check(Y, t[k], name)
        elif not np.all(np.isfinite(Y)):
            raise SolverError(f"{name}: non-finite value at t={t[k]:g}; refine the time grid")
        vals[k], grads[k] = Y, Z
    return vals, grads
