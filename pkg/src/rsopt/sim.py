"""Monte Carlo simulation of the regime chain, factor and wealth.

Every path owns a Philox generator keyed by ``(seed, path index)``.  It
first yields the Brownian increments on the uniform grid (a block of fixed
size), then the regime clocks, then the bridge normals used at jump times.
Path sets are therefore identical for any chunking or worker count, and
arms simulated with the same seed share their noise (common random numbers).
"""

from __future__ import annotations

import csv
import io
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from numpy.typing import NDArray

from .errors import ConfigurationError, DomainError, InfeasibleError
from .market import MarketModel, RegimeGenerator
from .strategy import FeedbackStrategy

Z99 = 2.5758293035489004
ALIGN_TOL = 1e-9


@dataclass(frozen=True)
class SimConfig:
    n_paths: int
    seed: int = 0
    dt: float = 1e-3
    antithetic: bool = False
    chunk: int = 5000
    workers: int = 1

    def __post_init__(self):
        if int(self.n_paths) < 1:
            raise DomainError("n_paths must be at least 1")
        if not self.dt > 0:
            raise DomainError("dt must be positive")
        if not 0 <= int(self.seed) < 2**64:
            raise DomainError("seed must be a 64-bit unsigned integer")
        if self.antithetic and self.n_paths % 2:
            raise DomainError("antithetic sampling needs an even number of paths")
        if self.chunk < 2 or self.workers < 1:
            raise DomainError("chunk must be >= 2 and workers >= 1")


@dataclass(frozen=True)
class RegimePath:
    """Jump times and the states entered; ``states[0]`` is the initial regime."""

    jump_times: NDArray[np.float64]
    states: NDArray[np.intp]
    T: float

    @property
    def n_jumps(self) -> int:
        return self.jump_times.size

    def state_at(self, t: float) -> int:
        return int(self.states[np.searchsorted(self.jump_times, t, side="right")])

    def occupation(self) -> NDArray[np.float64]:
        """Fraction of ``[0, T]`` spent in each visited state index."""
        edges = np.concatenate([[0.0], self.jump_times, [self.T]])
        occ = np.zeros(int(self.states.max()) + 1)
        np.add.at(occ, self.states, np.diff(edges))
        return occ / self.T


def simulate_chain(Q, i0: int, T: float, rng: np.random.Generator) -> RegimePath:
    """Exact simulation by exponential holding times."""
    q = Q.q if isinstance(Q, RegimeGenerator) else np.asarray(Q, dtype=float)
    times, states = [], [int(i0)]
    t, i = 0.0, int(i0)
    while True:
        rate = -q[i, i]
        if rate <= 0:
            break
        t += rng.exponential(1.0 / rate)
        if t >= T:
            break
        w = np.clip(q[i], 0.0, None)
        w[i] = 0.0
        j = int(np.searchsorted(np.cumsum(w), rng.random() * rate, side="right"))
        i = min(j, q.shape[0] - 1)
        times.append(t)
        states.append(i)
    return RegimePath(np.asarray(times, dtype=float), np.asarray(states, dtype=np.intp), T)


def path_rng(seed: int, key: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(key=int(seed) | (int(key) << 64)))


@dataclass
class SimResult:
    utility: str
    label: str
    n_paths: int
    n_used: int
    n_excluded: int
    mean: float
    se: float
    ci99: tuple
    wealth: dict
    max_abs_c: float
    n_nonpositive_wealth: Optional[int] = None
    class_d_max: Optional[float] = None
    seed: int = 0
    dt: float = 0.0
    antithetic: bool = False
    path_values: NDArray[np.float64] = field(default=None, repr=False, compare=False)

    def to_dict(self) -> dict:
        return {
            "utility": self.utility, "label": self.label, "n_paths": self.n_paths,
            "n_used": self.n_used, "n_excluded": self.n_excluded, "mean": self.mean,
            "se": self.se, "ci99": list(self.ci99), "wealth": self.wealth,
            "max_abs_c": self.max_abs_c, "n_nonpositive_wealth": self.n_nonpositive_wealth,
            "class_d_max": self.class_d_max, "seed": self.seed, "dt": self.dt,
            "antithetic": self.antithetic,
        }


@dataclass(frozen=True)
class _Context:
    model: MarketModel
    strategies: tuple
    x0: float
    i0: int
    cfg: SimConfig
    ratio: int


def _check_inputs(model: MarketModel, strategy: FeedbackStrategy, x0: float, i0: int, cfg: SimConfig) -> int:
    g = strategy.grid
    if abs(g.T - model.horizon) > ALIGN_TOL * model.horizon:
        raise ConfigurationError("strategy grid horizon differs from the model horizon")
    ratio = g.dt / cfg.dt
    R = int(round(ratio))
    if R < 1 or abs(ratio - R) > ALIGN_TOL * ratio:
        raise ConfigurationError(f"sim dt {cfg.dt:g} does not divide the strategy grid step {g.dt:g}")
    if strategy.pi0.shape[1] != model.ell or strategy.pi0.shape[-1] != model.m:
        raise ConfigurationError("strategy shape does not match the model")
    if (strategy.x_nodes is not None) != model.factor.enabled:
        raise ConfigurationError("strategy and model disagree on factor mode")
    if not 0 <= i0 < model.ell:
        raise DomainError(f"initial regime {i0} outside 0..{model.ell - 1}")
    if strategy.proportional and not x0 > 0:
        raise DomainError("initial wealth must be positive for power/log utility")
    return R


class _Paths:
    """State of one chunk of paths."""

    def __init__(self, ctx: _Context, strategy: FeedbackStrategy, P: int):
        model = ctx.model
        self.ctx = ctx
        self.s = strategy
        self.reg = np.full(P, ctx.i0, dtype=np.intp)
        self.fx = np.full(P, model.factor.x0) if model.factor.enabled else None
        self.logdisc = np.zeros(P)
        self.util = np.zeros(P)
        if strategy.proportional:
            self.state = np.full(P, math.log(ctx.x0))
        else:
            self.state = np.full(P, float(ctx.x0))
        self.nonpos = np.zeros(P, dtype=bool)
        self.max_c = 0.0
        self.class_d = 0.0

    def wealth(self, idx=slice(None)):
        return np.exp(self.state[idx]) if self.s.proportional else self.state[idx]

    def controls(self, k: int, idx=slice(None)):
        s = self.s
        fx = None if self.fx is None else self.fx[idx]
        p0, p1, c0, c1 = s.tables_at(k, self.reg[idx], fx)
        if s.proportional:
            return p0, c0, c1
        X = self.state[idx]
        return p0 + p1 * X[:, None], c0 + c1 * X, c1

    def advance(self, k: int, t, dt, dW, idx=slice(None)):
        """One Euler step of length ``dt`` starting at time ``t`` for paths ``idx``."""
        ctx = self.ctx
        s = self.s
        C = ctx.model.coefficients
        reg = self.reg[idx]
        kc = C.piece(t)
        r = C.r[reg, kc] + C.r_slope[reg] * (0.0 if self.fx is None else self.fx[idx])
        mu = C.mu[reg, kc]
        if self.fx is not None:
            mu = mu + C.mu_slope[reg] * self.fx[idx][:, None]
        b = mu - r[:, None]
        sig = C.sigma[reg, kc]
        rho = C.rho[reg, kc]
        pi, c, c1 = self.controls(k, idx)
        sv = np.einsum("pij,pi->pj", sig, pi)
        noise = (sv * dW).sum(-1)
        drift_pb = (pi * b).sum(-1)
        disc = np.exp(self.logdisc[idx])
        self.max_c = max(self.max_c, float(np.max(np.abs(c))))
        if s.proportional:
            lx = self.state[idx]
            if s.utility == "power":
                g = s.gamma
                flow = c**g * np.exp(g * lx) / g
            else:
                flow = np.log(c) + lx
            self.state[idx] = lx + (r + drift_pb - c - 0.5 * (sv * sv).sum(-1)) * dt + noise
        else:
            X = self.state[idx]
            beta = s.beta
            flow = -np.exp(-beta * c)
            self.class_d = max(self.class_d, float(np.max(np.exp(-beta * c1 * X))))
            Xn = X + (r * X + drift_pb - c) * dt + noise
            self.state[idx] = Xn
            self.nonpos[idx] |= Xn <= 0
        self.util[idx] += disc * flow * dt
        self.logdisc[idx] -= rho * dt
        if self.fx is not None:
            f = ctx.model.factor
            fxi = self.fx[idx]
            self.fx[idx] = fxi + f.drift(fxi) * dt + dW @ f.vol

    def terminal(self):
        s = self.s
        disc = np.exp(self.logdisc)
        if s.utility == "power":
            term = np.exp(s.gamma * self.state) / s.gamma
        elif s.utility == "log":
            term = self.state.copy()
        else:
            term = -np.exp(-s.beta * self.state)
        return self.util + disc * term


def _draw(ctx: _Context, paths: Sequence[int], n_steps: int):
    """Brownian increments and regime paths for ``paths`` (global indices)."""
    cfg, model = ctx.cfg, ctx.model
    P, n = len(paths), model.n
    dW = np.empty((P, n_steps, n))
    jp, jt, js, jz = [], [], [], []
    for a, p in enumerate(paths):
        key, sign = (p // 2, -1.0 if p % 2 else 1.0) if cfg.antithetic else (p, 1.0)
        gc = path_rng(cfg.seed, key)
        dW[a] = gc.standard_normal((n_steps, n))
        if sign < 0:
            dW[a] *= -1.0
        rp = simulate_chain(model.q, ctx.i0, model.horizon, gc)
        if rp.n_jumps:
            jp.append(np.full(rp.n_jumps, a))
            jt.append(rp.jump_times)
            js.append(rp.states[1:])
            jz.append(sign * gc.standard_normal((rp.n_jumps, n)))
    dW *= math.sqrt(cfg.dt)
    if jp:
        jumps = (np.concatenate(jp), np.concatenate(jt), np.concatenate(js), np.concatenate(jz))
    else:
        jumps = (np.zeros(0, np.intp), np.zeros(0), np.zeros(0, np.intp), np.zeros((0, n)))
    return dW, jumps


def _integrate(ctx: _Context, strategy: FeedbackStrategy, dW, jumps, record: bool = False):
    """Step one strategy through a chunk's pre-drawn noise."""
    jp, jt, js, jz, bounds = jumps
    grid = strategy.grid
    n_steps = dW.shape[1]
    dt = ctx.cfg.dt
    times = grid.T * np.arange(n_steps + 1) / n_steps
    P = dW.shape[0]
    st = _Paths(ctx, strategy, P)
    rec = [] if record else None
    for j in range(n_steps):
        k = j // ctx.ratio
        t0, t1 = times[j], times[j + 1]
        if record:
            pi, c, _ = st.controls(k)
            rec.append((t0, st.reg.copy(), st.wealth().copy(), pi.copy(), np.array(c, dtype=float)))
        lo, hi = bounds[j], bounds[j + 1]
        if lo == hi:
            st.advance(k, t0, dt, dW[:, j])
            continue
        # paths jumping inside this step take sub-steps through each jump time,
        # splitting the step increment by a Brownian bridge
        pos = np.full(P, t0)
        rem = dW[:, j].copy()
        ep = jp[lo:hi]
        first = np.r_[True, ep[1:] != ep[:-1]]
        start = np.maximum.accumulate(np.where(first, np.arange(ep.size), 0))
        rank = np.arange(ep.size) - start
        for rr in range(int(rank.max()) + 1):
            sel = np.nonzero(rank == rr)[0] + lo
            idx = jp[sel]
            h = jt[sel] - pos[idx]
            L = t1 - pos[idx]
            dW1 = (h / L)[:, None] * rem[idx] + np.sqrt(h * (L - h) / L)[:, None] * jz[sel]
            st.advance(k, pos[idx], h, dW1, idx)
            rem[idx] -= dW1
            pos[idx] = jt[sel]
            st.reg[idx] = js[sel]
        st.advance(k, pos, t1 - pos, rem)
    values = st.terminal()
    XT = st.wealth()
    if record:
        return values, XT, st, rec
    return values, XT, st.nonpos, st.max_c, st.class_d


def _run_chunk(ctx: _Context, paths: Sequence[int], record: bool = False):
    """Draw the noise for ``paths`` once and integrate every strategy on it."""
    grid = ctx.strategies[0].grid
    n_steps = grid.N * ctx.ratio
    times = grid.T * np.arange(n_steps + 1) / n_steps
    dW, (jp, jt, js, jz) = _draw(ctx, paths, n_steps)
    jstep = np.clip(np.searchsorted(times, jt, side="right") - 1, 0, n_steps - 1)
    order = np.lexsort((jt, jp, jstep))
    jp, jt, js, jz, jstep = jp[order], jt[order], js[order], jz[order], jstep[order]
    jumps = (jp, jt, js, jz, np.searchsorted(jstep, np.arange(n_steps + 1)))
    return [_integrate(ctx, s, dW, jumps, record) for s in ctx.strategies]


def _summary(x: NDArray[np.float64]) -> dict:
    if x.size == 0:
        return {}
    q = np.quantile(x, [0.01, 0.5, 0.99])
    return {"mean": float(np.mean(x)), "std": float(np.std(x)), "min": float(np.min(x)),
            "max": float(np.max(x)), "q01": float(q[0]), "q50": float(q[1]), "q99": float(q[2])}


def _chunks(cfg: SimConfig):
    step = cfg.chunk - (cfg.chunk % 2)
    return [list(range(a, min(a + step, cfg.n_paths))) for a in range(0, cfg.n_paths, step)]


def _result(strategy: FeedbackStrategy, cfg: SimConfig, parts) -> SimResult:
    values = np.concatenate([p[0] for p in parts])
    XT = np.concatenate([p[1] for p in parts])
    nonpos = np.concatenate([p[2] for p in parts])
    max_c = max(p[3] for p in parts)
    class_d = max(p[4] for p in parts)
    ok = np.isfinite(values)
    if cfg.antithetic:
        pair_ok = ok[0::2] & ok[1::2]
        y = 0.5 * (values[0::2] + values[1::2])[pair_ok]
        used = 2 * int(pair_ok.sum())
    else:
        y = values[ok]
        used = int(ok.sum())
    mean = float(np.mean(y)) if y.size else float("nan")
    se = float(np.std(y, ddof=1) / math.sqrt(y.size)) if y.size > 1 else 0.0
    expo = not strategy.proportional
    return SimResult(
        utility=strategy.utility, label=strategy.label, n_paths=cfg.n_paths, n_used=used,
        n_excluded=cfg.n_paths - used, mean=mean, se=se,
        ci99=(mean - Z99 * se, mean + Z99 * se), wealth=_summary(XT[np.isfinite(XT)]),
        max_abs_c=float(max_c), n_nonpositive_wealth=int(nonpos.sum()) if expo else None,
        class_d_max=float(class_d) if expo else None, seed=int(cfg.seed), dt=float(cfg.dt),
        antithetic=bool(cfg.antithetic), path_values=values,
    )


def simulate_many(model: MarketModel, strategies: Sequence[FeedbackStrategy], x0: float, i0: int,
                  cfg: SimConfig) -> list:
    """Simulate several strategies on the same paths (common random numbers)."""
    strategies = tuple(strategies)
    if not strategies:
        return []
    ratios = {_check_inputs(model, s, x0, i0, cfg) for s in strategies}
    if len(ratios) != 1 or len({s.grid for s in strategies}) != 1:
        raise ConfigurationError("strategies simulated together must share one grid")
    ctx = _Context(model, strategies, float(x0), int(i0), cfg, ratios.pop())
    chunks = _chunks(cfg)
    if cfg.workers > 1 and len(chunks) > 1:
        with ProcessPoolExecutor(max_workers=cfg.workers) as ex:
            parts = list(ex.map(_run_chunk, [ctx] * len(chunks), chunks))
    else:
        parts = [_run_chunk(ctx, ch) for ch in chunks]
    return [_result(s, cfg, [p[a] for p in parts]) for a, s in enumerate(strategies)]


def simulate_wealth(model: MarketModel, strategy: FeedbackStrategy, x0: float, i0: int,
                    cfg: SimConfig) -> SimResult:
    """Realised discounted utility of ``strategy`` from wealth ``x0`` in regime ``i0``."""
    return simulate_many(model, [strategy], x0, i0, cfg)[0]


def dump_paths(model: MarketModel, strategy: FeedbackStrategy, x0: float, i0: int, cfg: SimConfig,
               path_ids: Sequence[int], path=None) -> str:
    """Per-node CSV ``path_id, t, regime, X, pi_*, c`` for selected paths."""
    R = _check_inputs(model, strategy, x0, i0, cfg)
    ctx = _Context(model, (strategy,), float(x0), int(i0), cfg, R)
    ids = [int(p) for p in path_ids]
    if cfg.antithetic:
        raise ConfigurationError("path dumps are drawn without antithetic pairing")
    _, XT, st, rec = _run_chunk(ctx, ids, record=True)[0]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["path_id", "t", "regime", "X"] + [f"pi_{j + 1}" for j in range(model.m)] + ["c"])
    fmt = "%.17g"
    for a, pid in enumerate(ids):
        for t, reg, X, pi, c in rec:
            w.writerow([pid, fmt % t, int(reg[a]) + 1, fmt % X[a]] + [fmt % v for v in pi[a]] + [fmt % c[a]])
        w.writerow([pid, fmt % model.horizon, int(st.reg[a]) + 1, fmt % XT[a]] + [""] * model.m + [""])
    text = buf.getvalue()
    if path is not None:
        with open(path, "w", newline="") as fh:
            fh.write(text)
    return text


@dataclass(frozen=True)
class PerturbationOutcome:
    label: str
    mean: float
    diff: float
    se_diff: float

    @property
    def not_better(self) -> bool:
        """Perturbed value does not exceed the candidate beyond 3 SE."""
        return self.diff <= 3 * self.se_diff

    @property
    def strictly_lower(self) -> bool:
        return self.diff < -3 * self.se_diff

    def to_dict(self) -> dict:
        return {"label": self.label, "mean": self.mean, "diff": self.diff, "se_diff": self.se_diff,
                "not_better": self.not_better, "strictly_lower": self.strictly_lower}


@dataclass
class PerturbationReport:
    candidate: SimResult
    outcomes: list

    @property
    def ok(self) -> bool:
        return all(o.not_better for o in self.outcomes)

    def to_dict(self) -> dict:
        return {"candidate": self.candidate.to_dict(), "outcomes": [o.to_dict() for o in self.outcomes],
                "ok": self.ok}


def _paired(a: SimResult, b: SimResult, antithetic: bool):
    d = b.path_values - a.path_values
    if antithetic:
        d = 0.5 * (d[0::2] + d[1::2])
    d = d[np.isfinite(d)]
    se = float(np.std(d, ddof=1) / math.sqrt(d.size)) if d.size > 1 else 0.0
    return float(np.mean(d)), se


def perturbation_test(model: MarketModel, strategy: FeedbackStrategy,
                      perturbations: Sequence[FeedbackStrategy], cfg: SimConfig,
                      x0: float = 1.0, i0: int = 0) -> PerturbationReport:
    """Compare perturbed strategies with the candidate under common random numbers."""
    for p in perturbations:
        if p.utility != strategy.utility or p.grid != strategy.grid:
            raise ConfigurationError(f"perturbation {p.label!r} does not match the candidate")
        if not p.feasible():
            raise InfeasibleError(f"perturbation {p.label!r} leaves the constraint set")
    base, *arms = simulate_many(model, [strategy, *perturbations], x0, i0, cfg)
    outcomes = []
    for p, res in zip(perturbations, arms):
        diff, se = _paired(base, res, cfg.antithetic)
        outcomes.append(PerturbationOutcome(p.label, res.mean, diff, se))
    return PerturbationReport(base, outcomes)


def random_feasible_strategy(template: FeedbackStrategy, seed: int, scale: float = 2.0,
                             label: str = "random") -> FeedbackStrategy:
    """Regime-dependent constant controls drawn uniformly from the constraint set.

    Rejection sampling inside the box ``[-scale, scale]^m`` clipped to the set's
    own bounds; consumption is drawn from ``[c_min, scale]`` for power/log and
    from ``[-scale, scale]`` (amounts) for exponential utility.
    """
    from dataclasses import replace

    rng = np.random.default_rng(seed)
    th = template.theta
    N1, ell, nx, m = template.pi0.shape
    lo = np.maximum(th.lo, -scale)
    hi = np.minimum(th.hi, scale)
    pis, cs = np.empty((ell, m)), np.empty(ell)
    for i in range(ell):
        for _ in range(100000):
            pi = lo + (hi - lo) * rng.random(m)
            if template.proportional:
                c_lo = max(th.c_lo, th.c_min)
                c = c_lo + (min(th.c_hi, scale) - c_lo) * rng.random()
                if th.contains(pi, c):
                    break
            else:
                c = -scale + 2 * scale * rng.random()
                if th.contains_pi(pi):
                    break
        else:
            raise InfeasibleError("could not sample a feasible control")
        pis[i], cs[i] = pi, c
    pi0 = np.broadcast_to(pis[None, :, None, :], template.pi0.shape).copy()
    c0 = np.broadcast_to(cs[None, :, None], template.c0.shape).copy()
    return replace(template, pi0=pi0, pi1=np.zeros_like(pi0), c0=c0, c1=np.zeros_like(c0), label=label)


def weak_duality_check(model: MarketModel, strategies: Sequence[FeedbackStrategy], value: float,
                       cfg: SimConfig, x0: float = 1.0, i0: int = 0) -> list:
    """``(label, mean, se, ok)`` with ``ok`` meaning mean <= value + 3 SE."""
    for s in strategies:
        if not s.feasible():
            raise InfeasibleError(f"strategy {s.label!r} leaves the constraint set")
    results = simulate_many(model, strategies, x0, i0, cfg)
    return [(r.label, r.mean, r.se, r.mean <= value + 3 * r.se) for r in results]
