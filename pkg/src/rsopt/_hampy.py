"""Pure-numpy batch solver for the pointwise Hamiltonian problems.

Every instance maximises

    -1/2 pi'A pi + pi'v + u(c) - kappa c

over ``lo <= pi <= hi``, ``c_lo <= c <= c_hi`` and, optionally, one
coupling half-space ``a'pi + a0 c <= beta0``.  ``u`` is ``w c^g / g``
(``cmode=1``), ``w ln c`` (``cmode=2``) or absent (``cmode=0``).

The coupling constraint is dualised: for a multiplier ``lam >= 0`` the
problem splits into a box QP in ``pi`` and a scalar problem in ``c`` with
closed-form solution, and ``g(lam) = a'pi(lam) + a0 c(lam) - beta0`` is
non-increasing, so the active multiplier is found by bisection.

This module is the fallback for the compiled kernel and must return the
same numbers to rounding.
"""

from __future__ import annotations

import numpy as np

from .errors import InfeasibleError

MAX_SWEEPS = 10000
SWEEP_TOL = 1e-15
BISECT_ITERS = 200


def c_star(coef, w, cmode, gamma, c_lo, c_hi):
    """Maximiser of ``u(c) - coef c`` clipped to ``[c_lo, c_hi]``."""
    coef = np.asarray(coef, dtype=float)
    out = np.full(coef.shape, np.inf)
    pos = coef > 0
    if cmode == 1:
        out[pos] = (coef[pos] / w[pos]) ** (1.0 / (gamma - 1.0))
    elif cmode == 2:
        out[pos] = w[pos] / coef[pos]
    return np.clip(out, c_lo, c_hi)


def u_of_c(c, w, cmode, gamma):
    if cmode == 1:
        with np.errstate(divide="ignore"):
            return w * np.power(c, gamma) / gamma
    if cmode == 2:
        with np.errstate(divide="ignore"):
            return w * np.log(c)
    return np.zeros_like(c)


def _box_qp(A, v, lo, hi, x0=None):
    """Coordinate ascent for ``max -1/2 x'Ax + x'v`` on a box, batched."""
    B, m = v.shape
    free = np.all(np.isneginf(lo)) and np.all(np.isposinf(hi))
    if free:
        return np.linalg.solve(A, v[..., None])[..., 0]
    diag = np.einsum("bii->bi", A)
    if m == 1:
        return np.clip(v / diag, lo, hi)
    x = np.clip(np.linalg.solve(A, v[..., None])[..., 0], lo, hi) if x0 is None else x0.copy()
    for _ in range(MAX_SWEEPS):
        delta = 0.0
        for j in range(m):
            rest = np.einsum("bk,bk->b", A[:, j, :], x) - diag[:, j] * x[:, j]
            new = np.clip((v[:, j] - rest) / diag[:, j], lo[j], hi[j])
            delta = max(delta, float(np.max(np.abs(new - x[:, j]) / (1.0 + np.abs(new)))))
            x[:, j] = new
        if delta <= SWEEP_TOL:
            break
    return x


def objective(A, v, pi, c, w, kappa, cmode, gamma):
    quad = -0.5 * np.einsum("bi,bij,bj->b", pi, A, pi) + np.einsum("bi,bi->b", pi, v)
    if cmode == 0:
        return quad
    return quad + u_of_c(c, w, cmode, gamma) - kappa * c


def solve_batch(A, v, w, kappa, lo, hi, c_lo, c_hi, a, a0, beta0, has_half, cmode, gamma):
    """Return ``(pi, c, objective)`` for a batch of instances."""
    A = np.ascontiguousarray(A, dtype=float)
    v = np.ascontiguousarray(v, dtype=float)
    B, m = v.shape
    w = np.broadcast_to(np.asarray(w, dtype=float), (B,)).copy()
    kappa = np.broadcast_to(np.asarray(kappa, dtype=float), (B,)).copy()
    lo = np.asarray(lo, dtype=float)
    hi = np.asarray(hi, dtype=float)
    a = np.asarray(a, dtype=float)

    pi = _box_qp(A, v, lo, hi)
    if cmode:
        c = c_star(kappa, w, cmode, gamma, c_lo, c_hi)
    else:
        c = np.zeros(B)

    if has_half:
        ca = a0 * c if (cmode and a0 != 0) else 0.0
        g0 = pi @ a + ca - beta0
        act = np.nonzero(g0 > 0)[0]
        if act.size:
            pi_a, c_a = _active(A[act], v[act], w[act], kappa[act], lo, hi, c_lo, c_hi,
                                a, a0, beta0, cmode, gamma, pi[act])
            pi[act] = pi_a
            c[act] = c_a

    return pi, c, objective(A, v, pi, c, w, kappa, cmode, gamma)


def _active(A, v, w, kappa, lo, hi, c_lo, c_hi, a, a0, beta0, cmode, gamma, pi0):
    B, m = v.shape
    free = np.all(np.isneginf(lo)) and np.all(np.isposinf(hi))
    if free:
        base = np.linalg.solve(A, v[..., None])[..., 0]
        direc = np.linalg.solve(A, np.broadcast_to(a, v.shape)[..., None])[..., 0]

    def pi_of(lam, x0):
        if free:
            return base - lam[:, None] * direc
        return _box_qp(A, v - lam[:, None] * a, lo, hi, x0)

    def c_of(lam):
        if not cmode:
            return np.zeros(B)
        return c_star(kappa + lam * a0, w, cmode, gamma, c_lo, c_hi)

    def g_of(lam, x0):
        p = pi_of(lam, x0)
        c = c_of(lam)
        ca = a0 * c if (cmode and a0 != 0) else 0.0
        return p @ a + ca - beta0, p, c

    lam_cap = np.full(B, np.inf)
    if cmode and a0 < 0:
        lam_cap = kappa / (-a0)
    lam_lo = np.zeros(B)
    lam_hi = np.minimum(np.ones(B), 0.5 * lam_cap)
    x = pi0
    g, p, c = g_of(lam_hi, x)
    for _ in range(2100):
        need = g > 0
        if not need.any():
            break
        lam_lo = np.where(need, lam_hi, lam_lo)
        nxt = np.where(np.isfinite(lam_cap), 0.5 * (lam_hi + lam_cap), 2.0 * lam_hi)
        lam_hi = np.where(need, nxt, lam_hi)
        if np.any(need & ~np.isfinite(lam_hi)):
            raise InfeasibleError("coupling constraint cannot be satisfied")
        g, p, c = g_of(lam_hi, p)
    else:
        raise InfeasibleError("coupling constraint cannot be satisfied")

    p_hi, c_hi_ = p, c
    for _ in range(BISECT_ITERS):
        mid = 0.5 * (lam_lo + lam_hi)
        done = (mid <= lam_lo) | (mid >= lam_hi)
        if done.all():
            break
        gm, pm, cm = g_of(mid, p_hi)
        up = (gm > 0) & ~done
        down = (gm <= 0) & ~done
        lam_lo = np.where(up, mid, lam_lo)
        lam_hi = np.where(down, mid, lam_hi)
        p_hi = np.where(down[:, None], pm, p_hi)
        c_hi_ = np.where(down, cm, c_hi_)
    return p_hi, c_hi_
