"""Optimal feedback controls and value functions from solved fields.

All strategies are stored as tables on the solver grid,

    pi = pi0 + pi1 * X,    c = c0 + c1 * X,

indexed ``[k, regime, factor node]``.  For power and log utility ``pi`` and
``c`` are proportions of wealth and ``pi1 = c1 = 0``; for exponential
utility they are amounts.  Time lookup uses the left grid node, factor
lookup interpolates linearly.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np
from numpy.typing import NDArray

from . import constraints as cons
from .bsde.grid import RegimeField, TimeGrid
from .bsde.hcurve import HCurve
from .constraints import ConstraintSet
from .errors import ConfigurationError, DomainError
from .market import MarketModel, coeff_arrays

UTILITIES = ("power", "log", "exp-deterministic", "exp-random")


@dataclass(frozen=True)
class FeedbackStrategy:
    utility: str
    grid: TimeGrid
    pi0: NDArray[np.float64]
    pi1: NDArray[np.float64]
    c0: NDArray[np.float64]
    c1: NDArray[np.float64]
    theta: ConstraintSet
    x_nodes: Optional[NDArray[np.float64]] = None
    gamma: Optional[float] = None
    beta: Optional[float] = None
    label: str = "candidate"

    @property
    def proportional(self) -> bool:
        return self.utility in ("power", "log")

    @property
    def wealth_dependent(self) -> bool:
        return bool(np.any(self.pi1 != 0) or np.any(self.c1 != 0))

    def _weights(self, f):
        """Left index and weight for linear interpolation in the factor."""
        x = self.x_nodes
        f = np.asarray(f, dtype=float)
        dx = x[1] - x[0]
        j = np.clip(np.floor((f - x[0]) / dx).astype(np.intp), 0, x.size - 2)
        w = np.clip((f - x[j]) / dx, 0.0, 1.0)
        return j, w

    def tables_at(self, k, regime, factor=None):
        """``(pi0, pi1, c0, c1)`` at node index ``k`` and regime, vectorised."""
        k = np.asarray(k)
        regime = np.asarray(regime)
        if self.x_nodes is None:
            return (self.pi0[k, regime, 0], self.pi1[k, regime, 0],
                    self.c0[k, regime, 0], self.c1[k, regime, 0])
        j, w = self._weights(factor)
        out = []
        for tab in (self.pi0, self.pi1, self.c0, self.c1):
            lo, hi = tab[k, regime, j], tab[k, regime, j + 1]
            ww = w if lo.ndim == w.ndim else w[..., None]
            out.append(lo + ww * (hi - lo))
        return tuple(out)

    def evaluate(self, t: float, regime: int, wealth: float = 1.0, factor: Optional[float] = None):
        """``(pi, c)`` at time ``t``, 0-based ``regime``, wealth and factor value."""
        if self.x_nodes is not None and factor is None:
            raise DomainError("factor value required for a factor-mode strategy")
        k = int(self.grid.index(t))
        p0, p1, c0, c1 = self.tables_at(k, regime, factor)
        return p0 + p1 * wealth, float(c0 + c1 * wealth)

    def scaled(self, factor: float, label: Optional[str] = None) -> "FeedbackStrategy":
        return replace(self, pi0=self.pi0 * factor, pi1=self.pi1 * factor,
                       label=label or f"pi x {factor:g}")

    def with_constant_c(self, value: float, label: Optional[str] = None) -> "FeedbackStrategy":
        return replace(self, c0=np.full_like(self.c0, value), c1=np.zeros_like(self.c1),
                       label=label or f"c = {value:g}")

    def feasible(self, tol: float = 1e-9) -> bool:
        """Table-wide membership check (wealth-independent strategies only)."""
        if self.wealth_dependent:
            return bool(self.theta.family == "unconstrained")
        pis = self.pi0.reshape(-1, self.pi0.shape[-1])
        cs = self.c0.reshape(-1)
        if self.proportional:
            return bool(np.all(cs >= 0) and np.all(self.theta.contains_many(pis, cs, tol)))
        return bool(np.all(self.theta.portfolio_set().contains_many(pis, 0.0, tol)))

    def to_csv(self, path=None) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        m = self.pi0.shape[-1]
        fac = self.x_nodes is not None
        head = ["t", "regime"] + (["x"] if fac else [])
        if self.wealth_dependent or not self.proportional:
            head += [f"pi0_{j + 1}" for j in range(m)] + [f"pi1_{j + 1}" for j in range(m)] + ["c0", "c1"]
        else:
            head += [f"pi_{j + 1}" for j in range(m)] + ["c"]
        w.writerow(head)
        fmt = "%.17g"
        t = self.grid.nodes
        N1, ell, nx = self.c0.shape
        for k in range(N1):
            for i in range(ell):
                for ix in range(nx):
                    row = [fmt % t[k], str(i + 1)] + ([fmt % self.x_nodes[ix]] if fac else [])
                    row += [fmt % v for v in self.pi0[k, i, ix]]
                    if len(head) > len(row) + 1:
                        row += [fmt % v for v in self.pi1[k, i, ix]]
                        row += [fmt % self.c0[k, i, ix], fmt % self.c1[k, i, ix]]
                    else:
                        row.append(fmt % self.c0[k, i, ix])
                    w.writerow(row)
        text = buf.getvalue()
        if path is not None:
            with open(path, "w", newline="") as fh:
                fh.write(text)
        return text


@dataclass(frozen=True)
class ValueReport:
    utility: str
    value: float
    wealth: float
    regime: int
    components: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"utility": self.utility, "value": self.value, "wealth": self.wealth,
                "regime": self.regime + 1, **self.components}


def _node_coeffs(model: MarketModel, grid: TimeGrid):
    x = model.factor.grid() if model.factor.enabled else None
    ca = coeff_arrays(model, grid.nodes, x)
    N1, ell, nx = ca.r.shape
    sig = np.broadcast_to(ca.sigma[:, :, None], (N1, ell, nx) + ca.sigma.shape[-2:])
    return x, ca, sig


def _need(fields, *names):
    missing = [n for n in names if n not in fields]
    if missing:
        raise ConfigurationError(f"strategy needs solved fields {missing}")
    return [fields[n] for n in names]


def extract_strategy(model: MarketModel, utility: str, fields: dict, theta: ConstraintSet,
                     gamma: Optional[float] = None, beta: Optional[float] = None) -> FeedbackStrategy:
    """Feedback controls realising the Hamiltonian argmax on the solver grid.

    ``fields`` holds ``P`` (power), ``h`` and ``P`` (log), ``h`` (HCurve)
    and ``Y`` (exp-deterministic), or ``h`` and ``Y`` (exp-random).
    """
    if utility not in UTILITIES:
        raise ConfigurationError(f"unknown utility {utility!r}")
    mode = "power" if utility == "power" else "log" if utility == "log" else utility
    problems = theta.mode_violations(mode, model.m, gamma)
    if problems:
        raise ConfigurationError("; ".join(problems))
    if utility == "exp-random" and (theta.family != "unconstrained" or model.m != model.n):
        raise ConfigurationError("random-rate exponential strategy needs an unconstrained, square market")

    ref = next(f for f in fields.values() if isinstance(f, RegimeField))
    grid = ref.grid
    x, ca, sig = _node_coeffs(model, grid)
    N1, ell, nx = ca.r.shape
    m, n = model.m, model.n
    B = N1 * ell * nx
    sigB = np.ascontiguousarray(sig).reshape(B, m, n)
    bB = ca.b.reshape(B, m)
    zeros_m = np.zeros((N1, ell, nx, m))
    zeros = np.zeros((N1, ell, nx))

    if utility == "power":
        cons.check_gamma(gamma)
        (P,) = _need(fields, "P")
        res = cons.power_batch(theta, gamma, P.values.reshape(B), P.gradients.reshape(B, n), sigB, bB)
        return FeedbackStrategy(utility, grid, res.pi.reshape(N1, ell, nx, m), zeros_m,
                                res.c.reshape(N1, ell, nx), zeros, theta, x, gamma=gamma)

    if utility == "log":
        h, _P = _need(fields, "h", "P")
        hv = np.broadcast_to(h.values, (N1, ell, nx)).reshape(B)
        eta = np.broadcast_to(h.gradients, (N1, ell, nx, n)).reshape(B, n)
        res = cons.log_batch(theta, hv, eta, sigB, bB)
        return FeedbackStrategy(utility, grid, res.pi.reshape(N1, ell, nx, m), zeros_m,
                                res.c.reshape(N1, ell, nx), zeros, theta, x)

    if beta is None or not beta > 0:
        raise DomainError("exponential strategies need beta > 0")

    if utility == "exp-deterministic":
        h, Y = _need(fields, "h", "Y")
        if not isinstance(h, HCurve):
            raise ConfigurationError("deterministic-rate strategy needs the closed-form h curve")
        hn = h(grid.nodes)[:, None, None]
        hb = np.broadcast_to(hn, (N1, ell, nx)).reshape(B)
        Z = Y.gradients.reshape(B, n)
        res = cons.exp_batch(theta, beta, hb, Z, sigB, bB)
        c1 = np.broadcast_to(hn, (N1, ell, nx)).copy()
        c0 = Y.values - np.log(hn) / beta
        return FeedbackStrategy(utility, grid, res.pi.reshape(N1, ell, nx, m), zeros_m,
                                c0, c1, theta, x, beta=beta)

    h, Y = _need(fields, "h", "Y")
    hv = np.broadcast_to(h.values, (N1, ell, nx))
    eta = np.broadcast_to(h.gradients, (N1, ell, nx, n))
    sT_inv = np.linalg.inv(np.swapaxes(sig, -1, -2))              # (sigma')^-1
    th = np.linalg.solve(sig, ca.b[..., None])[..., 0]            # sigma^-1 b
    hh = hv[..., None]
    inner0 = beta * hh * Y.gradients - hh * th - eta
    pi0 = -np.einsum("...ij,...j->...i", sT_inv, inner0) / (beta * hh**2)
    pi1 = -np.einsum("...ij,...j->...i", sT_inv, beta * hh * eta) / (beta * hh**2)
    c1 = hv.copy()
    c0 = Y.values - np.log(hv) / beta
    return FeedbackStrategy(utility, grid, pi0, pi1, c0, c1, theta, x, beta=beta)


def value_at(utility: str, x: float, i0: int, fields: dict, gamma: Optional[float] = None,
             beta: Optional[float] = None, factor0: Optional[float] = None) -> ValueReport:
    """Analytic value at wealth ``x`` and 0-based regime ``i0``."""
    if utility == "power":
        cons.check_gamma(gamma)
        if not x > 0:
            raise DomainError("wealth must be positive for power utility")
        (P,) = _need(fields, "P")
        P0 = P.initial(i0, factor0)
        return ValueReport(utility, x**gamma * P0 / gamma, x, i0, {"P0": P0, "gamma": gamma})
    if utility == "log":
        if not x > 0:
            raise DomainError("wealth must be positive for log utility")
        h, P = _need(fields, "h", "P")
        h0, P0 = h.initial(i0, factor0), P.initial(i0, factor0)
        return ValueReport(utility, h0 * np.log(x) + P0, x, i0, {"h0": h0, "P0": P0})
    if utility in ("exp-deterministic", "exp-random"):
        if beta is None or not beta > 0:
            raise DomainError("exponential value needs beta > 0")
        h, Y = _need(fields, "h", "Y")
        h0 = float(h(0.0)[0]) if isinstance(h, HCurve) else h.initial(0, factor0)
        Y0 = Y.initial(i0, factor0)
        return ValueReport(utility, -np.exp(-beta * (h0 * x + Y0)), x, i0,
                           {"h0": h0, "Y0": Y0, "beta": beta})
    raise ConfigurationError(f"unknown utility {utility!r}")
