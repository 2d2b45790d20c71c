"""The coupled backward systems for power, log and exponential utility.

Every solver works in one of two modes:

* ODE mode (factor disabled): coefficients are deterministic per regime,
  the martingale part vanishes and the system is integrated by RK4.
* factor mode: each regime carries a function of (t, x) and the system is a
  semilinear parabolic PDE solved by Crank-Nicolson, the gradient being
  ``Z = vol * dY/dx``.

Regime coupling enters explicitly through ``q``.
"""

from __future__ import annotations

from typing import Optional

import numpy as np

from .. import constraints as cons
from ..constraints import ConstraintSet
from ..errors import ConfigurationError, DomainError, SolverError
from ..market import MarketModel, coeff_arrays
from .bounds import STRICT, BoundsReport, compute_bounds
from .engine import Envelope, FactorOperator, check_step_rule, cn_backward, rk4_backward
from .grid import RegimeField, TimeGrid
from .hcurve import HCurve

DEFAULT_PICARD = 3
CONSISTENCY_TOL = 1e-10


class _Setup:
    """Coefficient tables on the stage times and factor nodes."""

    def __init__(self, model: MarketModel, grid: TimeGrid):
        if abs(grid.T - model.horizon) > 1e-12:
            raise DomainError(f"grid horizon {grid.T} differs from model horizon {model.horizon}")
        check_step_rule(model.q, grid)
        self.model, self.grid = model, grid
        self.factor = model.factor.enabled
        self.x = model.factor.grid() if self.factor else None
        ca = coeff_arrays(model, grid.half_nodes, self.x)
        self.r = ca.r                      # (S, ell, nx)
        self.b = ca.b                      # (S, ell, nx, m)
        self.sigma = ca.sigma              # (S, ell, m, n)
        self.rho = ca.rho                  # (S, ell)
        self.q = model.q
        self.ell, self.m, self.n = model.ell, model.m, model.n
        self.nx = 1 if self.x is None else self.x.size
        B = self.ell * self.nx
        sig = np.broadcast_to(self.sigma[:, :, None], (len(self.rho), self.ell, self.nx, self.m, self.n))
        self._sig = np.ascontiguousarray(sig.reshape(-1, B, self.m, self.n))
        self._b = np.ascontiguousarray(self.b.reshape(-1, B, self.m))
        self._gram = np.einsum("sbik,sbjk->sbij", self._sig, self._sig)
        self.op = None
        if self.factor:
            f = model.factor
            self.op = FactorOperator(self.x, f.drift(self.x), f.vol)

    def flat(self, s):
        """Batch views ``(sigma, b, sigma sigma')`` for the Hamiltonian kernel at stage ``s``."""
        return self._sig[s], self._b[s], self._gram[s]

    def solve(self, G, yT, name, envelope=None, picard=DEFAULT_PICARD):
        """Run the mode-appropriate integrator; ``yT`` has shape ``(S,)``."""
        yT = np.asarray(yT, dtype=float)
        if not self.factor:
            vals = rk4_backward(G, yT, self.grid, self.n, name, envelope)
            return vals[..., None], np.zeros(vals.shape + (1, self.n))
        Y0 = np.repeat(yT[:, None], self.nx, axis=1)
        return cn_backward(G, Y0, self.grid, self.op, name, picard, envelope)

    def field(self, name, vals, grads, terminal, **aux):
        return RegimeField(name, self.grid, vals, grads, self.x, terminal, dict(aux))


def _couple(q, Y):
    """``sum_j q_ij Y_j`` along the regime axis."""
    return q @ Y


def _exp_couple(q, Y, scale=1.0):
    """``sum_j q_ij exp(scale (Y_j - Y_i))`` along the regime axis."""
    d = scale * (Y[None, :, :] - Y[:, None, :])
    return np.einsum("ij,ijx->ix", q, np.exp(d))


def _sigma_inv_b(su: _Setup, s):
    """``sigma^-1 b`` at stage ``s``, shape ``(ell, nx, n)`` (square case)."""
    sig = np.broadcast_to(su.sigma[s][:, None], (su.ell, su.nx, su.m, su.n))
    return np.linalg.solve(sig, su.b[s][..., None])[..., 0]


def _envelope(lo, hi, S, label):
    return Envelope(np.full(S, lo, dtype=float), np.full(S, hi, dtype=float), label)


# -- power utility ------------------------------------------------------------


def _power_setup(model, gamma, theta, grid):
    cons.check_gamma(gamma)
    if theta.m != model.m:
        raise ConfigurationError(f"constraint set has m={theta.m}, model has m={model.m}")
    su = _Setup(model, grid)
    bounds = compute_bounds(model, "power", gamma=gamma, eps=theta.eps, grid=grid)
    return su, bounds


def solve_power(model: MarketModel, gamma: float, theta: ConstraintSet, grid: TimeGrid,
                picard: int = DEFAULT_PICARD, bounds: Optional[BoundsReport] = None) -> RegimeField:
    """Solve for ``P`` with ``P_T = 1`` and generator

    ``f(P, Lambda) - (rho - gamma r) P + sum_j q_ij P_j``.
    """
    su, bnd = _power_setup(model, gamma, theta, grid)
    bnd = bounds or bnd
    B = su.ell * su.nx

    def G(s, P, Lam):
        sig, b, S = su.flat(s)
        f = cons.power_batch(theta, gamma, P.reshape(B), Lam.reshape(B, su.n), sig, b, S).value
        lin = (su.rho[s][:, None] - gamma * su.r[s]) * P
        return f.reshape(su.ell, su.nx) - lin + _couple(su.q, P)

    env = _envelope(bnd.lower / 2, 2 * bnd.upper, su.ell, "power")
    vals, grads = su.solve(G, np.ones(su.ell), "power P", env, picard)
    return su.field("P", vals, grads, 1.0, bounds=bnd, gamma=gamma)


def solve_power_logform(model: MarketModel, gamma: float, theta: ConstraintSet, grid: TimeGrid,
                        picard: int = DEFAULT_PICARD) -> RegimeField:
    """Solve for ``Y = ln P`` with ``Y_T = 0`` and generator

    ``F(Y, Z) + |Z|^2 / 2 - rho + gamma r + sum_j q_ij exp(Y_j - Y_i)``.
    """
    su, bnd = _power_setup(model, gamma, theta, grid)
    B = su.ell * su.nx

    def G(s, Y, Z):
        sig, b, S = su.flat(s)
        F = cons.power_logform_batch(theta, gamma, Y.reshape(B), Z.reshape(B, su.n), sig, b, S).value
        quad = 0.5 * np.einsum("ixn,ixn->ix", Z, Z)
        return (F.reshape(su.ell, su.nx) + quad - su.rho[s][:, None] + gamma * su.r[s]
                + _exp_couple(su.q, Y))

    env = _envelope(np.log(bnd.lower / 2), np.log(2 * bnd.upper), su.ell, "power")
    vals, grads = su.solve(G, np.zeros(su.ell), "power Y", env, picard)
    return su.field("Y", vals, grads, 0.0, bounds=bnd, gamma=gamma)


# -- log utility --------------------------------------------------------------


def _hlog_G(su):
    def G(s, h, _eta):
        return 1.0 - su.rho[s][:, None] * h + _couple(su.q, h)

    return G


def solve_log_h(model: MarketModel, grid: TimeGrid) -> RegimeField:
    """Solve the linear system for ``h`` with ``h_T = 1`` and generator ``1 - rho h + q h``.

    ``rho`` does not depend on the factor, so ``h`` is deterministic and is
    always integrated in ODE mode; in factor mode it is copied across nodes.
    """
    su = _Setup(model, grid)
    bnd = compute_bounds(model, "log", grid=grid)
    env = _envelope(bnd.lower / 2, np.inf, su.ell, "log h")
    vals = rk4_backward(_hlog_G(su), np.ones(su.ell), grid, su.n, "log h", env)
    vals = np.repeat(vals[..., None], su.nx, axis=2)
    return su.field("h", vals, np.zeros(vals.shape + (su.n,)), 1.0, bounds=bnd)


def solve_log_P(model: MarketModel, theta: ConstraintSet, h_field: RegimeField, grid: TimeGrid,
                picard: int = DEFAULT_PICARD) -> RegimeField:
    """Solve for ``P`` with ``P_T = 0`` and generator

    ``f(h, eta) - rho P + r h + sum_j q_ij P_j``, ``f`` the log Hamiltonian.
    """
    if theta.m != model.m:
        raise ConfigurationError(f"constraint set has m={theta.m}, model has m={model.m}")
    su = _Setup(model, grid)
    if h_field.values.shape[:2] != (grid.N + 1, su.ell):
        raise ConfigurationError("h field does not match the grid and regime count")
    ell, nx, n = su.ell, su.nx, su.n
    B = ell * nx
    zero_eta = np.zeros((B, n))

    def f_log(s, h):
        sig, b, S = su.flat(s)
        return cons.log_batch(theta, h.reshape(B), zero_eta, sig, b, S).value.reshape(ell, nx)

    if not su.factor:
        hG = _hlog_G(su)

        def G(s, y, z):
            h, P = y[:ell], y[ell:]
            gh = hG(s, h, None)
            gP = f_log(s, h) - su.rho[s][:, None] * P + su.r[s] * h + _couple(su.q, P)
            return np.concatenate([gh, gP])

        vals = rk4_backward(G, np.r_[np.ones(ell), np.zeros(ell)], grid, n, "log P")
        if np.max(np.abs(vals[:, :ell] - h_field.values[:, :, 0])) > CONSISTENCY_TOL:
            raise ConfigurationError("h field is not the solution of the log h system on this grid")
        P = vals[:, ell:, None]
        return su.field("P", P, np.zeros(P.shape + (n,)), 0.0)

    hv = h_field.values

    def G(s, P, _Lam):
        h = hv[s // 2]
        return f_log(s, h) - su.rho[s][:, None] * P + su.r[s] * h + _couple(su.q, P)

    vals, grads = su.solve(G, np.zeros(ell), "log P", None, picard)
    return su.field("P", vals, grads, 0.0)


# -- exponential utility, deterministic rate ----------------------------------


def _deterministic_rate(model: MarketModel) -> HCurve:
    c = model.coefficients
    if np.any(c.r_slope != 0) or (model.ell > 1 and np.ptp(c.r, axis=0).max() > 0):
        raise ConfigurationError("deterministic-rate exponential case needs r depending on t only")
    return HCurve(model.horizon, c.breakpoints.copy(), c.r[0].copy())


def solve_exp_h_deterministic(model: MarketModel, grid: Optional[TimeGrid] = None) -> HCurve:
    """Closed-form ``h``; evaluate on a grid with ``curve.on(grid)`` or ``curve(t)``."""
    return _deterministic_rate(model)


def _exp_F(su, Pi, beta, s, h, Z):
    """Exponential Hamiltonian ``F(z)`` per regime and node; ``h`` broadcasts to ``(ell, nx)``."""
    B = su.ell * su.nx
    sig, b, S = su.flat(s)
    hb = np.broadcast_to(h, (su.ell, su.nx)).reshape(B)
    return cons.exp_batch(Pi, beta, hb, Z.reshape(B, su.n), sig, b, S).value.reshape(su.ell, su.nx)


def solve_exp_Y(model: MarketModel, Pi: ConstraintSet, beta: float, h_curve: HCurve, grid: TimeGrid,
                form: str = "Y", picard: int = DEFAULT_PICARD) -> RegimeField:
    """Solve the deterministic-rate exponential system.

    ``form="Y"`` integrates ``Y`` (``Y_T = 0``) with generator

        F(Z) - h Y - beta |Z|^2 / 2 + rho / beta - (h / beta)(1 - ln h)
        - (1 / beta) sum_j q_ij (exp(-beta (Y_j - Y_i)) - 1);

    ``form="P"`` integrates ``P = exp(-beta Y)`` (``P_T = 1``) with generator

        -beta P F(Z) - h P ln P - rho P + h (1 - ln h) P + sum_j q_ij P_j,
        Z = -Lambda / (beta P).
    """
    if not beta > 0:
        raise DomainError(f"beta must be positive, got {beta}")
    if Pi.m != model.m:
        raise ConfigurationError(f"constraint set has m={Pi.m}, model has m={model.m}")
    su = _Setup(model, grid)
    hs = h_curve(grid.half_nodes)
    bnd = compute_bounds(model, "exp-deterministic", grid=grid, h_field=h_curve)
    ell = su.ell

    if form == "Y":

        def G(s, Y, Z):
            h = hs[s]
            F = _exp_F(su, Pi, beta, s, h, Z)
            quad = 0.5 * beta * np.einsum("ixn,ixn->ix", Z, Z)
            cpl = (_exp_couple(su.q, Y, -beta) - su.q.sum(axis=1)[:, None]) / beta
            return (F - h * Y - quad + su.rho[s][:, None] / beta
                    - (h / beta) * (1 - np.log(h)) - cpl)

        env = _envelope(-np.log(2 * bnd.upper) / beta, -np.log(bnd.lower / 2) / beta, ell, "exp")
        vals, grads = su.solve(G, np.zeros(ell), "exp Y", env, picard)
        return su.field("Y", vals, grads, 0.0, bounds=bnd, beta=beta)

    if form == "P":

        def G(s, P, Lam):
            h = hs[s]
            Z = -Lam / (beta * P[..., None])
            F = _exp_F(su, Pi, beta, s, h, Z)
            return (-beta * P * F - h * P * np.log(P) - su.rho[s][:, None] * P
                    + h * (1 - np.log(h)) * P + _couple(su.q, P))

        env = _envelope(bnd.lower / 2, 2 * bnd.upper, ell, "exp P")
        vals, grads = su.solve(G, np.ones(ell), "exp P", env, picard)
        return su.field("P", vals, grads, 1.0, bounds=bnd, beta=beta)

    raise DomainError(f"form must be 'Y' or 'P', got {form!r}")


# -- exponential utility, random rate -----------------------------------------


def _random_rate_check(model: MarketModel):
    c = model.coefficients
    if model.m != model.n:
        raise ConfigurationError("random-rate exponential case needs m = n")
    if model.ell > 1:
        if (np.ptp(c.r, axis=0).max() > 0 or np.ptp(c.mu, axis=0).max() > 0
                or np.ptp(c.sigma, axis=0).max() > 0 or np.ptp(c.r_slope) > 0
                or np.ptp(c.mu_slope, axis=0).max() > 0):
            raise ConfigurationError("random-rate exponential case needs regime-independent r, mu, sigma")


def solve_exp_h_random(model: MarketModel, grid: TimeGrid, picard: int = DEFAULT_PICARD) -> RegimeField:
    """Solve the linear system for ``p`` (``p_T = 1``, generator ``1 - r p - q' sigma^-1 b``).

    Returns ``h = 1/p`` with gradient ``eta = -q / p^2``; ``p`` itself is kept
    in ``aux["p"]``.  The field has a single component (the rate and market
    price of risk do not depend on the regime).
    """
    _random_rate_check(model)
    su = _Setup(model, grid)

    def G(s, p, q):
        th = _sigma_inv_b(su, s)[:1]
        return 1.0 - su.r[s][:1] * p - (q * th).sum(-1)

    env = Envelope(np.array([0.0]), np.array([np.inf]), "positivity of p")
    try:
        vals, grads = su.solve(G, np.ones(1), "exp p", env, picard)
    except SolverError as err:
        raise SolverError(f"p must stay positive: {err}") from err
    if np.any(vals <= 0):
        raise SolverError("p <= 0 on the grid")
    p = su.field("p", vals, grads, 1.0)
    h = vals ** -1.0
    eta = -grads / (vals ** 2)[..., None]
    return su.field("h", h, eta, 1.0, p=p)


def _exp_random_terms(su, beta, s, h, eta):
    """``|h th + eta|^2 / (2 beta h^3) + ...`` pieces shared by the P system and its bound."""
    th = _sigma_inv_b(su, s)[:1]
    v = h[..., None] * th + eta
    return 0.5 * np.einsum("ixn,ixn->ix", v, v) / (beta * h**3), th


def exp_random_bounds(model: MarketModel, beta: float, grid: TimeGrid,
                      h_field: Optional[RegimeField] = None) -> BoundsReport:
    """Constants ``k1`` and ``k = max(exp(k1 T), k1)`` for the random-rate system.

    The conditional expectation in the defining inequality of ``k1`` solves a
    linear backward equation under the drift-adjusted measure; it is solved
    on the same grid, one component per regime.
    """
    _random_rate_check(model)
    su = _Setup(model, grid)
    if h_field is None:
        h_field = solve_exp_h_random(model, grid)
    T = model.horizon
    hv, ev = h_field.values, h_field.gradients
    ell = su.ell
    qd = np.diag(su.q)[:, None]

    def g_term(s, h, eta):
        quad, _ = _exp_random_terms(su, beta, s, h, eta)
        return (quad + su.rho[s][:, None] / (beta * h) - (1 - np.log(h)) / beta
                - qd / (beta * h))

    if not su.factor:

        def G(s, y, z):
            p, E = y[:1], y[1:]
            h = 1.0 / p
            gp = 1.0 - su.r[s][:1] * p
            gE = -su.r[s][:1] * E + g_term(s, h, np.zeros((1, 1, su.n)))
            return np.concatenate([gp, gE])

        vals = rk4_backward(G, np.r_[1.0, np.zeros(ell)], grid, su.n, "exp k1")
        E = vals[:, 1:]
    else:

        def G(s, E, Z):
            k = s // 2
            th = _sigma_inv_b(su, s)[:1]
            return -su.r[s][:1] * E - (Z * th).sum(-1) + g_term(s, hv[k], ev[k])

        E, _ = su.solve(G, np.zeros(ell), "exp k1")

    nodes = np.arange(0, 2 * grid.N + 1, 2)
    h_nodes = hv[:, :1]
    other = -np.min((su.rho[nodes][..., None] / (beta * h_nodes) - (1 - np.log(h_nodes)) / beta))
    k1 = max(float(np.max(-su.r)), float(other), float(np.max(E)), STRICT)
    k = max(np.exp(k1 * T), k1)

    def lo_c(t):
        return 1 - np.exp(k1 * (T - np.asarray(t)))

    return BoundsReport("exp-random", {"k1": k1, "k": k, "expectation_max": float(np.max(E))},
                        -k, k, T, lo_c, None)


def solve_exp_P_random(model: MarketModel, beta: float, h_field: RegimeField, grid: TimeGrid,
                       picard: int = DEFAULT_PICARD, bounds: Optional[BoundsReport] = None) -> RegimeField:
    """Solve the truncated random-rate system for ``P`` (``P_T = 0``).

    The truncation ``psi`` clips to ``[-k, k]``; it must be inactive at the
    solution, otherwise a ``SolverError`` is raised.  ``aux`` carries
    ``Y = h P`` and ``Z = h Lambda + P eta``.
    """
    if not beta > 0:
        raise DomainError(f"beta must be positive, got {beta}")
    _random_rate_check(model)
    su = _Setup(model, grid)
    bnd = bounds or exp_random_bounds(model, beta, grid, h_field)
    k = bnd.constants["k"]
    ell, n = su.ell, su.n
    hv, ev = h_field.values, h_field.gradients

    def psi(y):
        return np.clip(y, -k, k)

    def gen(s, P, Lam, h, eta):
        quad, th = _exp_random_terms(su, beta, s, h, eta)
        lin = (th * Lam).sum(-1)
        y = psi(P)
        cpl = np.einsum("ij,ijx->ix", su.q, np.exp(-beta * h[None] * (y[None] - y[:, None])))
        return (-su.r[s][:1] * P - lin + quad + su.rho[s][:, None] / (beta * h)
                - (1 - np.log(h)) / beta - cpl / (beta * h))

    env = _envelope(-2 * k, 2 * k, ell, "random-rate")
    if not su.factor:
        zeta = np.zeros((1, 1, n))

        def G(s, y, z):
            p, P = y[:1], y[1:]
            h = 1.0 / p
            gp = 1.0 - su.r[s][:1] * p
            gP = gen(s, P, np.zeros((ell, 1, n)), h, zeta)
            return np.concatenate([gp, gP])

        env_aug = Envelope(np.r_[0.0, env.lo], np.r_[np.inf, env.hi], env.label)
        vals = rk4_backward(G, np.r_[1.0, np.zeros(ell)], grid, n, "exp random P", env_aug)
        if np.max(np.abs(1.0 / vals[:, 0] - hv[:, 0, 0])) > CONSISTENCY_TOL * max(1.0, np.max(hv)):
            raise ConfigurationError("h field is not the solution of the random-rate h system on this grid")
        Pv = vals[:, 1:, None]
        Lv = np.zeros(Pv.shape + (n,))
    else:

        def G(s, P, Lam):
            kk = s // 2
            return gen(s, P, Lam, hv[kk], ev[kk])

        Pv, Lv = su.solve(G, np.zeros(ell), "exp random P", env, picard)

    if np.max(np.abs(Pv)) >= k:
        raise SolverError(f"truncation active: max|P| = {np.max(np.abs(Pv)):.6g} >= k = {k:.6g}; "
                          "bound constant miscomputed")
    Y = hv * Pv
    Z = hv[..., None] * Lv + Pv[..., None] * ev
    out = su.field("P", Pv, Lv, 0.0, bounds=bnd, beta=beta)
    out.aux["Y"] = RegimeField("Y", grid, Y, Z, su.x, 0.0)
    return out
