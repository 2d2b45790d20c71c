"""Independent reference values used by the tests.

Nothing here imports the solver internals: each oracle is either a closed
form, a quadrature, a lattice search or a high-accuracy ODE integration
by scipy.
"""

import itertools

import numpy as np
from scipy.integrate import quad, solve_ivp

# -- lattice search for the pointwise problems ------------------------------


def lattice_search(objective, feasible, lower, upper, points=41, levels=14, shrink=0.25):
    """Maximise ``objective`` on a box by repeated lattice zoom.

    ``objective`` and ``feasible`` take an array of shape (K, d).  The first
    lattice covers ``[lower, upper]``; each later level is centred on the
    incumbent with its half-width shrunk by ``shrink``.  Returns
    ``(best_value, best_point)``.
    """
    lower = np.asarray(lower, dtype=float)
    upper = np.asarray(upper, dtype=float)
    d = lower.size
    best_x, best_f = None, -np.inf
    centre = 0.5 * (lower + upper)
    half = 0.5 * (upper - lower)
    for _ in range(levels):
        lo = np.maximum(centre - half, lower)
        hi = np.minimum(centre + half, upper)
        axes = [np.linspace(lo[k], hi[k], points) for k in range(d)]
        if best_x is not None:
            axes = [np.union1d(ax, [best_x[k]]) for k, ax in enumerate(axes)]
        pts = np.array(list(itertools.product(*axes)))
        ok = feasible(pts)
        if not ok.any():
            half = half * shrink
            continue
        with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
            vals = np.where(ok, objective(pts), -np.inf)
        k = int(np.argmax(vals))
        if vals[k] >= best_f:
            best_f, best_x = float(vals[k]), pts[k].copy()
        centre = best_x
        half = half * shrink
    return best_f, best_x


def family_mask(family, params, m, with_c=True):
    """Vectorised membership written from each family's defining inequalities."""

    def mask(x):
        pi = x[:, :m]
        c = x[:, m] if with_c else np.zeros(len(x))
        ok = c >= 0 if with_c else np.ones(len(x), bool)
        if family == "no-shorting":
            ok &= np.all(pi >= 0, axis=1)
        elif family == "box":
            ok &= np.all((pi >= params["d"]) & (pi <= params["e"]), axis=1)
            if with_c:
                ok &= (c >= params["c_lo"]) & (c <= params["c_hi"])
        elif family == "budget-simplex":
            ok &= pi.sum(axis=1) + (c if with_c else 0.0) <= 1.0
        elif family == "half-space":
            lhs = pi @ np.asarray(params["a"], dtype=float)
            if with_c:
                lhs = lhs + params["a0"] * c
            ok &= lhs <= params["beta0"]
        return ok

    return mask


def power_oracle(gamma, P, Lam, sigma, b, family, params, c_min=1e-12):
    m = len(b)
    kb = 10.0 * (1 + np.linalg.norm(Lam) / P)
    S = sigma @ sigma.T

    def obj(x):
        pi, c = x[:, :m], x[:, m]
        quad_ = -0.5 * (1 - gamma) * P * np.einsum("ki,ij,kj->k", pi, S, pi)
        return quad_ + pi @ (P * b + sigma @ Lam) + c**gamma / gamma - P * c

    # c^gamma/gamma - P c peaks at P^(1/(gamma-1)); upper caps on c only lower
    # the optimal c, so twice that value bounds every feasible maximiser
    c_hi = max(kb, 2.0 * P ** (1.0 / (gamma - 1.0)))
    lo = np.r_[np.full(m, -kb), c_min]
    hi = np.r_[np.full(m, kb), c_hi]
    f, x = lattice_search(obj, family_mask(family, params, m), lo, hi)
    return gamma * f, x


def log_oracle(h, eta, sigma, b, family, params, c_min=1e-12):
    m = len(b)
    kb = 10.0 * (1 + np.linalg.norm(eta) / h)
    S = sigma @ sigma.T

    def obj(x):
        pi, c = x[:, :m], x[:, m]
        return (-0.5 * h * np.einsum("ki,ij,kj->k", pi, S, pi) + pi @ (h * b + sigma @ eta)
                + np.log(c) - h * c)

    lo = np.r_[np.full(m, -kb), c_min]
    hi = np.r_[np.full(m, kb), kb]
    f, x = lattice_search(obj, family_mask(family, params, m), lo, hi)
    return f, x


def exp_oracle(beta, h, z, sigma, b, family, params):
    m = len(b)
    kb = 10.0 * (1 + np.linalg.norm(z)) / (beta * h) + 10.0
    S = sigma @ sigma.T

    def obj(x):
        return -0.5 * beta * h * np.einsum("ki,ij,kj->k", x, S, x) + x @ (b - beta * sigma @ z)

    f, x = lattice_search(obj, family_mask(family, params, m, with_c=False),
                          np.full(m, -kb), np.full(m, kb), points=201 if m == 1 else 61)
    return h * f, x


# -- closed forms -------------------------------------------------------------


def merton_power_P(t, T, gamma, r, rho, b, sigma):
    """Single-regime unconstrained power P via the substitution u = P^(1/(1-gamma))."""
    theta2 = float(np.atleast_1d(b) @ np.linalg.solve(np.atleast_2d(sigma) @ np.atleast_2d(sigma).T,
                                                        np.atleast_1d(b)))
    k = (gamma * theta2 / (2 * (1 - gamma)) - rho + gamma * r) / (1 - gamma)
    tau = T - np.asarray(t, dtype=float)
    if abs(k) < 1e-14:
        u = 1 + tau
    else:
        u = np.exp(k * tau) + np.expm1(k * tau) / k
    return u ** (1 - gamma)


def log_h_constant(t, T, rho):
    tau = T - np.asarray(t, dtype=float)
    if rho == 0:
        return 1 + tau
    return np.exp(-rho * tau) + (1 - np.exp(-rho * tau)) / rho


def merton_log_P0(T, r, b, sigma, rho=0.0):
    """Single-regime unconstrained log P_0 by quadrature."""
    theta2 = float((b / sigma) ** 2)

    def integrand(s):
        h = log_h_constant(s, T, rho)
        f = 0.5 * h * theta2 - 1 - np.log(h)
        return np.exp(-rho * s) * (f + r * h)

    return quad(integrand, 0, T, epsabs=1e-13, epsrel=1e-13)[0]


def exp_h_quadrature(t, T, r_fn, breaks=()):
    """h_t from its integral representation, every integral done by quad.

    ``breaks`` lists the discontinuities of ``r`` so quad can split there.
    """

    def R(a, b_):
        pts = [p for p in breaks if a < p < b_] or None
        return quad(r_fn, a, b_, points=pts, epsabs=1e-12, epsrel=1e-12, limit=200)[0]

    first = np.exp(-R(t, T))
    pts = [p for p in breaks if t < p < T] or None
    second = quad(lambda s: np.exp(-R(t, s)), t, T, points=pts, epsabs=1e-12, epsrel=1e-12,
                  limit=200)[0]
    return 1.0 / (first + second)


# -- high-accuracy backward integration ---------------------------------------


def backward_ivp(rhs, yT, T, t_eval):
    """Integrate ``y' = rhs(t, y)`` from ``T`` back to 0; returns values at ``t_eval``."""
    t_eval = np.asarray(t_eval, dtype=float)
    sol = solve_ivp(rhs, (T, 0.0), np.atleast_1d(yT).astype(float), method="DOP853",
                    rtol=1e-12, atol=1e-14, dense_output=True)
    assert sol.success
    return sol.sol(t_eval)
