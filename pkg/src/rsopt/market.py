"""Regime-switching market model: generator, coefficient curves, factor.

Coefficients are deterministic per regime, optionally affine in a
one-dimensional mean-reverting factor

    dx = kappa (theta - x) dt + vol' dW .

Only ``r`` and ``mu`` may depend on the factor; ``sigma`` and ``rho`` are
functions of (t, regime) only.  Regimes are 0-based in the Python API and
1-based in every human-readable message.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from numpy.typing import NDArray

from .errors import DomainError

ROW_SUM_TOL = 1e-12

MODES = ("power", "log", "exp-deterministic", "exp-random")


@dataclass(frozen=True)
class RegimeGenerator:
    """Generator matrix ``q`` of the regime chain (rates per unit time)."""

    q: NDArray[np.float64]

    def __post_init__(self):
        object.__setattr__(self, "q", np.atleast_2d(np.asarray(self.q, dtype=float)))

    @property
    def ell(self) -> int:
        return self.q.shape[0]


@dataclass(frozen=True)
class CoefficientCurve:
    """Right-continuous step curves in time, one set of values per regime.

    Shapes: ``breakpoints (K,)``, ``r (ell, K)``, ``mu (ell, K, m)``,
    ``sigma (ell, K, m, n)``, ``rho (ell, K)``.  ``r_slope (ell,)`` and
    ``mu_slope (ell, m)`` are the factor sensitivities.
    """

    breakpoints: NDArray[np.float64]
    r: NDArray[np.float64]
    mu: NDArray[np.float64]
    sigma: NDArray[np.float64]
    rho: NDArray[np.float64]
    r_slope: Optional[NDArray[np.float64]] = None
    mu_slope: Optional[NDArray[np.float64]] = None

    def __post_init__(self):
        r = np.asarray(self.r, dtype=float)
        ell, _ = r.shape
        m = np.asarray(self.mu).shape[2]
        object.__setattr__(self, "breakpoints", np.asarray(self.breakpoints, dtype=float))
        object.__setattr__(self, "r", r)
        object.__setattr__(self, "mu", np.asarray(self.mu, dtype=float))
        object.__setattr__(self, "sigma", np.asarray(self.sigma, dtype=float))
        object.__setattr__(self, "rho", np.asarray(self.rho, dtype=float))
        rs = np.zeros(ell) if self.r_slope is None else np.asarray(self.r_slope, dtype=float)
        ms = np.zeros((ell, m)) if self.mu_slope is None else np.asarray(self.mu_slope, dtype=float)
        object.__setattr__(self, "r_slope", rs)
        object.__setattr__(self, "mu_slope", ms)

    @property
    def kind(self) -> str:
        if np.any(self.r_slope != 0) or np.any(self.mu_slope != 0):
            return "affine-in-factor"
        return "piecewise-constant-in-time"

    def piece(self, t) -> NDArray[np.intp]:
        """Index of the step containing ``t`` (right-continuous)."""
        idx = np.searchsorted(self.breakpoints, t, side="right") - 1
        return np.clip(idx, 0, len(self.breakpoints) - 1)

    @classmethod
    def constant(cls, r, mu, sigma, rho, r_slope=None, mu_slope=None) -> "CoefficientCurve":
        """Time-constant curves; arguments are per-regime values."""
        r = np.asarray(r, dtype=float)
        ell = r.shape[0]
        mu = np.asarray(mu, dtype=float).reshape(ell, -1)
        m = mu.shape[1]
        sigma = np.asarray(sigma, dtype=float).reshape(ell, m, -1)
        rho = np.asarray(rho, dtype=float).reshape(ell)
        return cls(
            breakpoints=np.array([0.0]),
            r=r[:, None],
            mu=mu[:, None, :],
            sigma=sigma[:, None, :, :],
            rho=rho[:, None],
            r_slope=r_slope,
            mu_slope=mu_slope,
        )


@dataclass(frozen=True)
class FactorSpec:
    enabled: bool = False
    kappa: float = 0.0
    theta: float = 0.0
    vol: NDArray[np.float64] = field(default_factory=lambda: np.zeros(1))
    x0: float = 0.0
    x_min: float = -1.0
    x_max: float = 1.0
    nodes: int = 51

    def __post_init__(self):
        object.__setattr__(self, "vol", np.atleast_1d(np.asarray(self.vol, dtype=float)))

    def grid(self) -> NDArray[np.float64]:
        return np.linspace(self.x_min, self.x_max, self.nodes)

    def drift(self, x):
        return self.kappa * (self.theta - x)


@dataclass(frozen=True)
class MarketModel:
    generator: RegimeGenerator
    m: int
    n: int
    coefficients: CoefficientCurve
    horizon: float
    delta_floor: float = 1e-8
    factor: FactorSpec = field(default_factory=FactorSpec)

    @property
    def ell(self) -> int:
        return self.generator.ell

    @property
    def q(self) -> NDArray[np.float64]:
        return self.generator.q


@dataclass(frozen=True)
class CoefficientSet:
    r: float
    mu: NDArray[np.float64]
    sigma: NDArray[np.float64]
    rho: float

    @property
    def b(self) -> NDArray[np.float64]:
        return self.mu - self.r


@dataclass
class Violation:
    message: str
    regime: Optional[int] = None  # 1-based
    time: Optional[float] = None

    def __str__(self):
        where = []
        if self.regime is not None:
            where.append(f"regime {self.regime}")
        if self.time is not None:
            where.append(f"t={self.time:g}")
        return self.message + (f" [{', '.join(where)}]" if where else "")


@dataclass
class ValidationReport:
    mode: str
    violations: list = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations

    def add(self, message, regime=None, time=None):
        self.violations.append(Violation(message, regime, time))

    def __contains__(self, text: str) -> bool:
        return any(text in str(v) for v in self.violations)

    def __iter__(self):
        return iter(self.violations)

    def __len__(self):
        return len(self.violations)

    def to_dict(self) -> dict:
        return {
            "mode": self.mode,
            "ok": self.ok,
            "violations": [
                {"message": v.message, "regime": v.regime, "time": v.time} for v in self.violations
            ],
        }


def coeff_at(model: MarketModel, t: float, regime: int, x: Optional[float] = None) -> CoefficientSet:
    """Coefficients at ``(t, regime[, x])``; ``regime`` is 0-based."""
    if not 0 <= regime < model.ell:
        raise DomainError(f"regime index {regime} outside 0..{model.ell - 1}")
    if not 0.0 <= t <= model.horizon:
        raise DomainError(f"t={t} outside [0, {model.horizon}]")
    if model.factor.enabled and x is None:
        raise DomainError("factor value required when the factor is enabled")
    if not model.factor.enabled and x is not None:
        raise DomainError("factor value given but the factor is disabled")
    c = model.coefficients
    k = int(c.piece(t))
    xv = 0.0 if x is None else float(x)
    r = c.r[regime, k] + c.r_slope[regime] * xv
    mu = c.mu[regime, k] + c.mu_slope[regime] * xv
    return CoefficientSet(r=float(r), mu=mu.copy(), sigma=c.sigma[regime, k].copy(), rho=float(c.rho[regime, k]))


@dataclass(frozen=True)
class CoefficientArrays:
    """Coefficients tabulated on times x regimes (x factor nodes).

    ``r, b (…, ell, nx[, m])`` carry the factor axis (``nx = 1`` without a
    factor); ``sigma (T, ell, m, n)`` and ``rho (T, ell)`` do not.
    """

    r: NDArray[np.float64]
    mu: NDArray[np.float64]
    sigma: NDArray[np.float64]
    rho: NDArray[np.float64]

    @property
    def b(self) -> NDArray[np.float64]:
        return self.mu - self.r[..., None]


def coeff_arrays(model: MarketModel, times, x_nodes=None) -> CoefficientArrays:
    c = model.coefficients
    k = c.piece(np.asarray(times, dtype=float))
    x = np.zeros(1) if x_nodes is None else np.asarray(x_nodes, dtype=float)
    r = c.r[:, k].T[:, :, None] + c.r_slope[None, :, None] * x[None, None, :]
    mu = (
        np.transpose(c.mu[:, k, :], (1, 0, 2))[:, :, None, :]
        + c.mu_slope[None, :, None, :] * x[None, None, :, None]
    )
    sigma = np.transpose(c.sigma[:, k], (1, 0, 2, 3))
    rho = c.rho[:, k].T
    return CoefficientArrays(r=r, mu=mu, sigma=sigma, rho=rho)


def validate_model(model: MarketModel, mode: str = "power", constraints=None,
                   gamma: Optional[float] = None) -> ValidationReport:
    """Check the standing assumptions for ``mode``; never raises.

    ``mode`` is one of ``power``, ``log``, ``exp-deterministic`` or
    ``exp-random``.  When ``constraints`` is given its mode-specific
    membership requirement is checked as well; ``gamma`` selects between
    the two power-utility requirements.
    """
    rep = ValidationReport(mode=mode)
    if mode not in MODES:
        rep.add(f"unknown mode {mode!r}")
        return rep

    q = np.asarray(model.q, dtype=float)
    ell = q.shape[0]
    if q.ndim != 2 or q.shape[1] != ell:
        rep.add(f"generator must be square, got shape {q.shape}")
        return rep
    if not np.all(np.isfinite(q)):
        rep.add("generator has non-finite entries")
    for i in range(ell):
        s = q[i].sum()
        if abs(s) > ROW_SUM_TOL:
            rep.add(f"row sum ≠ 0 at regime {i + 1} (row sum {s:g})", regime=i + 1)
        for j in range(ell):
            if i != j and q[i, j] < 0:
                rep.add(f"negative off-diagonal rate q[{i + 1},{j + 1}]={q[i, j]:g}", regime=i + 1)

    if not (np.isfinite(model.horizon) and model.horizon > 0):
        rep.add(f"horizon must be positive, got {model.horizon}")
    if model.m < 1 or model.n < model.m:
        rep.add(f"need 1 <= m <= n, got m={model.m}, n={model.n}")
    if not model.delta_floor > 0:
        rep.add(f"ellipticity constant must be positive, got {model.delta_floor}")

    c = model.coefficients
    bp = c.breakpoints
    K = len(bp)
    expected = {
        "r": (ell, K),
        "mu": (ell, K, model.m),
        "sigma": (ell, K, model.m, model.n),
        "rho": (ell, K),
        "r_slope": (ell,),
        "mu_slope": (ell, model.m),
    }
    shapes_ok = True
    for name, shape in expected.items():
        arr = getattr(c, name)
        if arr.shape != shape:
            rep.add(f"coefficient {name} has shape {arr.shape}, expected {shape}")
            shapes_ok = False
        elif not np.all(np.isfinite(arr)):
            rep.add(f"coefficient {name} has non-finite values")
    if K == 0 or bp[0] != 0.0:
        rep.add("breakpoints must start at t=0")
    if np.any(np.diff(bp) <= 0):
        rep.add("breakpoints must be strictly increasing")
    if K and bp[-1] >= model.horizon:
        rep.add("last breakpoint must lie before the horizon")
    if not shapes_ok:
        return rep

    for i in range(ell):
        for k in range(K):
            s = c.sigma[i, k]
            if not np.all(np.isfinite(s)):
                continue
            lam = np.linalg.eigvalsh(s @ s.T).min()
            if lam < model.delta_floor:
                rep.add(
                    f"σσ′ eigenvalue {lam:g} < δ at regime {i + 1}",
                    regime=i + 1,
                    time=float(bp[k]),
                )

    f = model.factor
    if f.enabled:
        if f.vol.shape != (model.n,) or not np.all(np.isfinite(f.vol)):
            rep.add(f"factor volatility must be a finite vector of length {model.n}")
        if not (f.x_min < f.x0 < f.x_max):
            rep.add(f"factor x0={f.x0} not inside ({f.x_min}, {f.x_max})")
        if f.nodes < 3:
            rep.add("factor grid needs at least 3 nodes")
        if not (np.isfinite(f.kappa) and np.isfinite(f.theta)):
            rep.add("factor drift parameters must be finite")
    elif np.any(c.r_slope != 0) or np.any(c.mu_slope != 0):
        rep.add("factor sensitivities given but the factor is disabled")

    if mode in ("exp-deterministic", "exp-random"):
        if np.any(c.r_slope != 0) and mode == "exp-deterministic":
            rep.add("exponential utility with deterministic rate needs r independent of the factor")
        if ell > 1 and (np.ptp(c.r, axis=0).max() > 0 or np.ptp(c.r_slope) > 0):
            rep.add("exponential utility needs a regime-independent interest rate")
    if mode == "exp-random":
        if model.m != model.n:
            rep.add(f"random-rate exponential case needs m = n, got m={model.m}, n={model.n}")
        if ell > 1:
            if np.ptp(c.mu, axis=0).max() > 0 or np.ptp(c.mu_slope, axis=0).max() > 0:
                rep.add("random-rate exponential case needs regime-independent mu")
            if np.ptp(c.sigma, axis=0).max() > 0:
                rep.add("random-rate exponential case needs regime-independent sigma")

    if constraints is not None:
        for msg in constraints.mode_violations(mode, model.m, gamma):
            rep.add(msg)
    return rep


def constant_model(q, r, mu, sigma, rho, horizon: float, delta_floor: float = 1e-8,
                   factor: Optional[FactorSpec] = None, r_slope=None, mu_slope=None) -> MarketModel:
    """Model with time-constant coefficients.

    ``r`` and ``rho`` are scalars or ``(ell,)``.  ``mu`` is a scalar, an
    ``(m,)`` vector shared by all regimes or ``(ell, m)``; ``sigma`` is a
    scalar, ``(m, n)`` shared, or ``(ell, m, n)``.
    """
    q = np.atleast_2d(np.asarray(q, dtype=float))
    ell = q.shape[0]
    r = np.broadcast_to(np.asarray(r, dtype=float), (ell,))
    rho = np.broadcast_to(np.asarray(rho, dtype=float), (ell,))
    mu = np.asarray(mu, dtype=float)
    mu = np.broadcast_to(mu.reshape(1, 1) if mu.ndim == 0 else mu, (ell, max(mu.shape[-1:] or (1,))))
    sigma = np.asarray(sigma, dtype=float)
    if sigma.ndim == 0:
        sigma = sigma.reshape(1, 1)
    sigma = np.broadcast_to(sigma, (ell,) + sigma.shape[-2:])
    m, n = sigma.shape[-2:]
    curve = CoefficientCurve.constant(r, mu, sigma, rho, r_slope=r_slope, mu_slope=mu_slope)
    return MarketModel(RegimeGenerator(q), m, n, curve, float(horizon), delta_floor,
                       factor if factor is not None else FactorSpec())
