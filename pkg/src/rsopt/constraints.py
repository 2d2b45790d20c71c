"""Constraint sets and the pointwise Hamiltonian maximisations.

Every supported family is a special case of

    lo <= pi <= hi,   c_lo <= c <= c_hi,   a'pi + a0 c <= beta0

with at most one coupling half-space.  The exponential modes only see
the projection of the set onto the portfolio coordinates.

The three Hamiltonians share the concave form

    -1/2 pi'A pi + pi'v + w u(c) - kappa c

and are solved in batches by ``rsopt._backend.solve_batch``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from numpy.typing import NDArray

from . import _backend
from .errors import DomainError, InfeasibleError

FAMILIES = ("unconstrained", "no-shorting", "box", "budget-simplex", "half-space")

DEFAULT_EPS = 0.1
C_MIN_FACTOR = 1e-8

CMODE_NONE, CMODE_POWER, CMODE_LOG = 0, 1, 2


@dataclass(frozen=True)
class ConstraintSet:
    """Closed convex set of admissible (pi, c) pairs.

    Build instances with the family constructors (``unconstrained``,
    ``no_shorting``, ``box``, ``budget_simplex``, ``half_space``).  ``eps``
    is the consumption level that must be admissible at ``pi = 0`` in the
    power (gamma < 0) and log modes.
    """

    family: str
    m: int
    lo: NDArray[np.float64]
    hi: NDArray[np.float64]
    c_lo: float = 0.0
    c_hi: float = np.inf
    a: Optional[NDArray[np.float64]] = None
    a0: float = 0.0
    beta0: float = 0.0
    eps: float = DEFAULT_EPS
    params: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "lo", np.asarray(self.lo, dtype=float).reshape(self.m))
        object.__setattr__(self, "hi", np.asarray(self.hi, dtype=float).reshape(self.m))
        if self.a is not None:
            object.__setattr__(self, "a", np.asarray(self.a, dtype=float).reshape(self.m))
        if self.family not in FAMILIES:
            raise DomainError(f"unknown constraint family {self.family!r}")
        if np.any(self.lo > self.hi) or self.c_lo > self.c_hi or self.c_lo < 0:
            raise DomainError("constraint set is empty or allows negative consumption")
        if not self.eps > 0:
            raise DomainError(f"eps must be positive, got {self.eps}")

    # -- constructors -------------------------------------------------------

    @classmethod
    def unconstrained(cls, m: int, eps: float = DEFAULT_EPS) -> "ConstraintSet":
        return cls("unconstrained", m, np.full(m, -np.inf), np.full(m, np.inf), eps=eps)

    @classmethod
    def no_shorting(cls, m: int, eps: float = DEFAULT_EPS) -> "ConstraintSet":
        return cls("no-shorting", m, np.zeros(m), np.full(m, np.inf), eps=eps)

    @classmethod
    def box(cls, d, e, c_lo: float = 0.0, c_hi: float = np.inf, eps: Optional[float] = None) -> "ConstraintSet":
        """Per-asset bounds ``d <= pi <= e`` and ``c_lo <= c <= c_hi``."""
        d = np.atleast_1d(np.asarray(d, dtype=float))
        e = np.atleast_1d(np.asarray(e, dtype=float))
        if eps is None:
            eps = c_lo if c_lo > 0 else min(DEFAULT_EPS, c_hi) if c_hi > 0 else DEFAULT_EPS
        return cls("box", d.size, d, e, c_lo=float(c_lo), c_hi=float(c_hi), eps=eps,
                   params={"d": d.tolist(), "e": e.tolist(), "c_lo": c_lo, "c_hi": c_hi})

    @classmethod
    def budget_simplex(cls, m: int, eps: float = DEFAULT_EPS) -> "ConstraintSet":
        """``sum(pi) + c <= 1`` with ``c >= 0`` (no borrowing)."""
        return cls("budget-simplex", m, np.full(m, -np.inf), np.full(m, np.inf),
                   a=np.ones(m), a0=1.0, beta0=1.0, eps=eps)

    @classmethod
    def half_space(cls, a, a0: float, beta0: float, eps: float = DEFAULT_EPS) -> "ConstraintSet":
        """``a'pi + a0 c <= beta0`` with ``c >= 0``."""
        a = np.atleast_1d(np.asarray(a, dtype=float))
        m = a.size
        return cls("half-space", m, np.full(m, -np.inf), np.full(m, np.inf),
                   a=a, a0=float(a0), beta0=float(beta0), eps=eps,
                   params={"a": a.tolist(), "a0": a0, "beta0": beta0})

    @classmethod
    def from_spec(cls, family: str, m: int, params: Optional[dict] = None, eps: Optional[float] = None):
        """Build from a family name and a parameter mapping (config form)."""
        p = dict(params or {})
        kw = {} if eps is None else {"eps": float(eps)}
        if family == "unconstrained":
            return cls.unconstrained(m, **kw)
        if family in ("no-shorting", "no-shorting-cone"):
            return cls.no_shorting(m, **kw)
        if family == "box":
            d = np.broadcast_to(np.asarray(p.get("d", -np.inf), dtype=float), (m,))
            e = np.broadcast_to(np.asarray(p.get("e", np.inf), dtype=float), (m,))
            return cls.box(d, e, float(p.get("c_lo", 0.0)), float(p.get("c_hi", np.inf)),
                           eps=kw.get("eps"))
        if family == "budget-simplex":
            return cls.budget_simplex(m, **kw)
        if family == "half-space":
            a = np.broadcast_to(np.asarray(p["a"], dtype=float), (m,))
            return cls.half_space(a, float(p.get("a0", 0.0)), float(p["beta0"]), **kw)
        raise DomainError(f"unknown constraint family {family!r}")

    # -- queries --------------------------------------------------------------

    @property
    def has_half(self) -> bool:
        return self.a is not None

    @property
    def c_min(self) -> float:
        """Consumption floor used where utility is singular at zero."""
        return C_MIN_FACTOR * self.eps

    def contains(self, pi, c: float = 0.0, tol: float = 0.0) -> bool:
        pi = np.asarray(pi, dtype=float).reshape(self.m)
        if np.any(pi < self.lo - tol) or np.any(pi > self.hi + tol):
            return False
        if c < self.c_lo - tol or c > self.c_hi + tol:
            return False
        if self.has_half and float(self.a @ pi) + self.a0 * c > self.beta0 + tol:
            return False
        return True

    def contains_many(self, pi, c=0.0, tol: float = 0.0) -> NDArray[np.bool_]:
        """Vectorised ``contains`` over rows of ``pi (K, m)`` and ``c (K,)``."""
        pi = np.asarray(pi, dtype=float).reshape(-1, self.m)
        c = np.broadcast_to(np.asarray(c, dtype=float), pi.shape[:1])
        ok = np.all(pi >= self.lo - tol, axis=1) & np.all(pi <= self.hi + tol, axis=1)
        ok &= (c >= self.c_lo - tol) & (c <= self.c_hi + tol)
        if self.has_half:
            ok &= pi @ self.a + self.a0 * c <= self.beta0 + tol
        return ok

    def portfolio_set(self) -> "ConstraintSet":
        """Projection onto the portfolio coordinates (the exponential-mode set)."""
        if not self.has_half:
            return ConstraintSet(self.family, self.m, self.lo, self.hi, eps=self.eps)
        if self.a0 < 0 and np.isposinf(self.c_hi):
            # consumption can absorb any portfolio position
            return ConstraintSet(self.family, self.m, self.lo, self.hi, eps=self.eps)
        beta = self.beta0 - self.a0 * (self.c_lo if self.a0 >= 0 else self.c_hi)
        return ConstraintSet(self.family, self.m, self.lo, self.hi, a=self.a, a0=0.0,
                             beta0=beta, eps=self.eps)

    def contains_pi(self, pi, tol: float = 0.0) -> bool:
        """Membership of ``pi`` in the portfolio projection."""
        return self.portfolio_set().contains(pi, 0.0, tol)

    def mode_violations(self, mode: str, m: int, gamma: Optional[float] = None) -> list:
        """Messages for each utility-mode requirement the set fails."""
        out = []
        if m != self.m:
            out.append(f"constraint set has dimension {self.m}, model has m={m}")
            return out
        zero = np.zeros(m)
        if mode == "power" and (gamma is None or gamma > 0):
            if not self.contains(zero, 0.0):
                out.append("power utility with 0 < gamma < 1 needs (0, 0) in the constraint set")
        if (mode == "power" and gamma is not None and gamma < 0) or mode == "log":
            if not self.contains(zero, self.eps):
                out.append(f"{mode} utility needs (0, eps) in the constraint set, eps={self.eps:g}")
        if mode.startswith("exp") and not self.contains_pi(zero):
            out.append("exponential utility needs 0 in the portfolio set")
        return out

    def to_dict(self) -> dict:
        d = {"family": self.family, "m": self.m, "eps": self.eps}
        d.update(self.params)
        return d


@dataclass(frozen=True)
class HamiltonianResult:
    value: float
    argmax_pi: NDArray[np.float64]
    argmax_c: Optional[float]


@dataclass(frozen=True)
class HamiltonianBatch:
    value: NDArray[np.float64]
    pi: NDArray[np.float64]
    c: NDArray[np.float64]


def check_gamma(gamma: float) -> None:
    if not (gamma < 1 and gamma != 0 and np.isfinite(gamma)):
        raise DomainError(f"gamma must lie in (-inf, 0) or (0, 1), got {gamma}")


def _run(theta: ConstraintSet, A, v, w, kappa, cmode, gamma, c_lo, c_hi, portfolio_only=False):
    s = theta.portfolio_set() if portfolio_only else theta
    if c_lo > c_hi:
        raise InfeasibleError(f"consumption interval [{c_lo:g}, {c_hi:g}] is empty")
    a = s.a if s.has_half else np.zeros(s.m)
    pi, c, obj = _backend.solve_batch(A, v, w, kappa, s.lo, s.hi, c_lo, c_hi, a,
                                      s.a0, s.beta0, s.has_half, cmode, gamma)
    return pi, c, obj


def _gram(sigma):
    return np.einsum("...ik,...jk->...ij", sigma, sigma)


def power_batch(theta: ConstraintSet, gamma: float, P, Lam, sigma, b, gram=None) -> HamiltonianBatch:
    """Batched power Hamiltonian ``f(P, Lambda)``.

    Shapes: ``P (B,)``, ``Lam (B, n)``, ``sigma (B, m, n)``, ``b (B, m)``.
    ``gram`` optionally supplies ``sigma sigma'`` to skip recomputing it.
    """
    check_gamma(gamma)
    P = np.asarray(P, dtype=float)
    if not np.all(P > 0):
        raise DomainError("power Hamiltonian needs P > 0")
    A = (1.0 - gamma) * P[:, None, None] * (_gram(sigma) if gram is None else gram)
    v = P[:, None] * b + np.einsum("bij,bj->bi", sigma, Lam)
    c_lo = max(theta.c_lo, theta.c_min) if gamma < 0 else theta.c_lo
    pi, c, obj = _run(theta, A, v, 1.0, P, CMODE_POWER, gamma, c_lo, theta.c_hi)
    return HamiltonianBatch(gamma * obj, pi, c)


def power_logform_batch(theta: ConstraintSet, gamma: float, Y, Z, sigma, b, gram=None) -> HamiltonianBatch:
    """Batched ``F(Y, Z) = f(e^Y, e^Y Z) / e^Y`` used by the log-transformed system."""
    check_gamma(gamma)
    Y = np.asarray(Y, dtype=float)
    A = (1.0 - gamma) * (_gram(sigma) if gram is None else gram)
    v = b + np.einsum("bij,bj->bi", sigma, Z)
    c_lo = max(theta.c_lo, theta.c_min) if gamma < 0 else theta.c_lo
    pi, c, obj = _run(theta, A, v, np.exp(-Y), 1.0, CMODE_POWER, gamma, c_lo, theta.c_hi)
    return HamiltonianBatch(gamma * obj, pi, c)


def log_batch(theta: ConstraintSet, h, eta, sigma, b, gram=None) -> HamiltonianBatch:
    """Batched log Hamiltonian; shapes as in ``power_batch`` with ``h`` for ``P``."""
    h = np.asarray(h, dtype=float)
    if not np.all(h > 0):
        raise DomainError("log Hamiltonian needs h > 0")
    A = h[:, None, None] * (_gram(sigma) if gram is None else gram)
    v = h[:, None] * b + np.einsum("bij,bj->bi", sigma, eta)
    c_lo = max(theta.c_lo, theta.c_min)
    pi, c, obj = _run(theta, A, v, 1.0, h, CMODE_LOG, 0.0, c_lo, theta.c_hi)
    return HamiltonianBatch(obj, pi, c)


def exp_batch(Pi: ConstraintSet, beta: float, h, z, sigma, b, gram=None) -> HamiltonianBatch:
    """Batched exponential Hamiltonian ``F(z)``; ``c`` in the result is zero."""
    if not beta > 0:
        raise DomainError(f"beta must be positive, got {beta}")
    h = np.asarray(h, dtype=float)
    if not np.all(h > 0):
        raise DomainError("exponential Hamiltonian needs h > 0")
    A = beta * h[:, None, None] * (_gram(sigma) if gram is None else gram)
    v = b - beta * np.einsum("bij,bj->bi", sigma, z)
    pi, c, obj = _run(Pi, A, v, 1.0, 0.0, CMODE_NONE, 0.0, 0.0, 0.0, portfolio_only=True)
    return HamiltonianBatch(h * obj, pi, c)


def _single(batch: HamiltonianBatch, with_c=True) -> HamiltonianResult:
    return HamiltonianResult(
        value=float(batch.value[0]),
        argmax_pi=batch.pi[0].copy(),
        argmax_c=float(batch.c[0]) if with_c else None,
    )


def power_hamiltonian(theta: ConstraintSet, gamma: float, P: float, Lambda, coeffs) -> HamiltonianResult:
    """``gamma * sup`` of the power-utility Hamiltonian at one point.

    Parameters
    ----------
    theta : ConstraintSet
    gamma : float
        Risk aversion parameter in (-inf, 0) or (0, 1).
    P : float
        Positive scalar state.
    Lambda : array_like, shape (n,)
    coeffs : CoefficientSet
    """
    sigma = np.atleast_2d(coeffs.sigma)
    batch = power_batch(theta, gamma, np.array([P], dtype=float),
                        np.asarray(Lambda, dtype=float).reshape(1, -1),
                        sigma[None], np.atleast_1d(coeffs.b)[None])
    return _single(batch)


def log_hamiltonian(theta: ConstraintSet, h: float, eta, coeffs) -> HamiltonianResult:
    sigma = np.atleast_2d(coeffs.sigma)
    batch = log_batch(theta, np.array([h], dtype=float),
                      np.asarray(eta, dtype=float).reshape(1, -1),
                      sigma[None], np.atleast_1d(coeffs.b)[None])
    return _single(batch)


def exp_hamiltonian(Pi: ConstraintSet, beta: float, h: float, z, coeffs) -> HamiltonianResult:
    sigma = np.atleast_2d(coeffs.sigma)
    batch = exp_batch(Pi, beta, np.array([h], dtype=float),
                      np.asarray(z, dtype=float).reshape(1, -1),
                      sigma[None], np.atleast_1d(coeffs.b)[None])
    return _single(batch, with_c=False)


def power_objective(gamma, P, Lambda, coeffs, pi, c) -> float:
    """The bracketed power objective at ``(pi, c)`` (before the gamma factor)."""
    pi = np.atleast_1d(pi)
    s = pi @ np.atleast_2d(coeffs.sigma)
    return float(-0.5 * (1 - gamma) * P * s @ s + pi @ (P * np.atleast_1d(coeffs.b))
                 + s @ np.asarray(Lambda) + c**gamma / gamma - P * c)


def log_objective(h, eta, coeffs, pi, c) -> float:
    pi = np.atleast_1d(pi)
    s = pi @ np.atleast_2d(coeffs.sigma)
    return float(-0.5 * h * s @ s + pi @ (h * np.atleast_1d(coeffs.b)) + s @ np.asarray(eta)
                 + np.log(c) - h * c)


def exp_objective(beta, h, z, coeffs, pi) -> float:
    pi = np.atleast_1d(pi)
    s = pi @ np.atleast_2d(coeffs.sigma)
    return float(-0.5 * beta * h * s @ s + pi @ np.atleast_1d(coeffs.b) - beta * s @ np.asarray(z))
