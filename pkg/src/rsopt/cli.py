"""Command-line entry point.

Commands::

    rsopt solve    --model M.json --out DIR [options]
    rsopt simulate --model M.json --out DIR [options]
    rsopt verify   --model M.json --out DIR [options]
    rsopt sweep    --model M.json --out DIR --sweep gamma=0.3,0.5 [options]

Exit codes: 0 success, 1 internal error, 2 parse failure, 3 validation
failure, 4 solver failure, 5 verification failure.  Artifacts are staged in memory and
written by temp file plus rename; a run that fails before its artifacts
are complete writes nothing.  ``verify`` writes its complete report even
when a check fails.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import tempfile
import time
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from . import bsde
from .bsde.grid import RegimeField, TimeGrid
from .bsde.hcurve import HCurve
from .config import RunSpec, load_document, merge_run, model_from_dict, model_hash
from .constraints import ConstraintSet
from .errors import (ConfigurationError, DomainError, InfeasibleError, ParseError,
                     PreconditionError, SolverError)
from .market import MarketModel, validate_model
from .sim import SimConfig, perturbation_test, simulate_wealth
from .strategy import FeedbackStrategy, extract_strategy, value_at

EXIT_OK, EXIT_PARSE, EXIT_VALIDATION, EXIT_SOLVER, EXIT_VERIFY = 0, 2, 3, 4, 5
FMT = "%.17g"
TRANSFORM_TOL = 1e-5
BOUND_SLACK = 1e-6


class ValidationFailure(Exception):
    def __init__(self, lines):
        super().__init__("\n".join(lines))
        self.lines = list(lines)


@dataclass
class Solved:
    mode: str
    theta: ConstraintSet
    grid: TimeGrid
    fields: dict
    bounds: object
    value: object
    strategy: FeedbackStrategy
    extra: dict = field(default_factory=dict)


# -- artifacts ------------------------------------------------------------------


class Artifacts:
    """In-memory output files, committed together at the end of a run."""

    def __init__(self):
        self.files: dict[str, str] = {}

    def add(self, name: str, text: str):
        self.files[name] = text

    def add_json(self, name: str, obj):
        self.add(name, json.dumps(_jsonable(obj), indent=2, sort_keys=True) + "\n")

    def commit(self, out_dir: str):
        """Write every file to a temp name, then rename; roll back on any failure."""
        created = not os.path.isdir(out_dir)
        os.makedirs(out_dir, exist_ok=True)
        staged, landed = [], []
        try:
            for name in sorted(self.files):
                fd, tmp = tempfile.mkstemp(prefix=f".{name}.", dir=out_dir)
                staged.append((tmp, os.path.join(out_dir, name)))
                with os.fdopen(fd, "w", newline="") as fh:
                    fh.write(self.files[name])
            for tmp, dest in staged:
                old = None
                if os.path.exists(dest):
                    with open(dest, "rb") as fh:
                        old = fh.read()
                os.replace(tmp, dest)
                landed.append((dest, old))
        except BaseException:
            for tmp, _ in staged:
                if os.path.exists(tmp):
                    os.unlink(tmp)
            for dest, old in landed:
                if old is None:
                    os.unlink(dest)
                else:
                    with open(dest, "wb") as fh:
                        fh.write(old)
            if created and not os.listdir(out_dir):
                os.rmdir(out_dir)
            raise


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if np.isfinite(v) else str(v)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    return obj


def _hcurve_csv(h: HCurve, grid: TimeGrid) -> str:
    t = grid.nodes
    rows = ["t,h"] + [f"{FMT % a},{FMT % b}" for a, b in zip(t, h(t))]
    return "\n".join(rows) + "\n"


# -- pipeline -------------------------------------------------------------------


def resolve_mode(spec: RunSpec, model: MarketModel) -> str:
    if spec.utility != "exp":
        return spec.utility
    c = model.coefficients
    return "exp-random" if np.any(c.r_slope != 0) else "exp-deterministic"


def build_constraints(spec: RunSpec, m: int) -> ConstraintSet:
    try:
        return ConstraintSet.from_spec(spec.constraints, m, spec.constraint_params, spec.eps)
    except (DomainError, InfeasibleError, TypeError, KeyError) as exc:
        raise ValidationFailure([f"constraints: {exc}"]) from None


def prepare(spec: RunSpec):
    """Load and parse the model document; returns ``(doc, model)``."""
    doc = load_document(spec.model)
    model = model_from_dict(doc)
    return doc, model


def check(spec: RunSpec, model: MarketModel):
    problems = spec.validate()
    if problems:
        raise ValidationFailure([f"run: {p}" for p in problems])
    if spec.factor_nodes is not None and model.factor.enabled:
        model = replace(model, factor=replace(model.factor, nodes=int(spec.factor_nodes)))
    mode = resolve_mode(spec, model)
    theta = build_constraints(spec, model.m)
    gamma = spec.gamma if mode == "power" else None
    rep = validate_model(model, mode, theta, gamma)
    if not rep.ok:
        raise ValidationFailure([str(v) for v in rep])
    if not 1 <= spec.regime <= model.ell:
        raise ValidationFailure([f"run: regime {spec.regime} outside 1..{model.ell}"])
    return model, mode, theta


def solve(spec: RunSpec, model: MarketModel, mode: str, theta: ConstraintSet) -> Solved:
    grid = TimeGrid(model.horizon, int(spec.grid_n))
    i0 = spec.regime - 1
    fx0 = model.factor.x0 if model.factor.enabled else None
    if mode == "power":
        P = bsde.solve_power(model, spec.gamma, theta, grid, spec.picard)
        fields = {"P": P}
        bounds = P.aux["bounds"]
        strat = extract_strategy(model, "power", fields, theta, gamma=spec.gamma)
        value = value_at("power", spec.x0, i0, fields, gamma=spec.gamma, factor0=fx0)
    elif mode == "log":
        h = bsde.solve_log_h(model, grid)
        P = bsde.solve_log_P(model, theta, h, grid, spec.picard)
        fields = {"h": h, "P": P}
        bounds = bsde.compute_bounds(model, "log", grid=grid)
        strat = extract_strategy(model, "log", fields, theta)
        value = value_at("log", spec.x0, i0, fields, factor0=fx0)
    elif mode == "exp-deterministic":
        Pi = theta.portfolio_set()
        hc = bsde.solve_exp_h_deterministic(model, grid)
        Y = bsde.solve_exp_Y(model, Pi, spec.beta, hc, grid, "Y", spec.picard)
        fields = {"h": hc, "Y": Y}
        bounds = Y.aux["bounds"]
        strat = extract_strategy(model, mode, fields, theta, beta=spec.beta)
        value = value_at(mode, spec.x0, i0, fields, beta=spec.beta, factor0=fx0)
    else:
        h = bsde.solve_exp_h_random(model, grid, spec.picard)
        P = bsde.solve_exp_P_random(model, spec.beta, h, grid, spec.picard)
        fields = {"h": h, "Y": P.aux["Y"]}
        bounds = P.aux["bounds"]
        strat = extract_strategy(model, mode, fields, theta, beta=spec.beta)
        value = value_at(mode, spec.x0, i0, fields, beta=spec.beta, factor0=fx0)
        fields = {"h": h, "P": P, "Y": P.aux["Y"]}
    return Solved(mode, theta, grid, fields, bounds, value, strat)


def solve_artifacts(spec: RunSpec, doc: dict, model: MarketModel, s: Solved, art: Artifacts) -> dict:
    for name, f in s.fields.items():
        if isinstance(f, RegimeField):
            art.add(f"field_{name}.csv", f.to_csv())
        elif isinstance(f, HCurve):
            art.add(f"field_{name}.csv", _hcurve_csv(f, s.grid))
    art.add_json("bounds.json", s.bounds.to_dict())
    art.add("strategy.csv", s.strategy.to_csv())
    rows = ["regime,x,value"]
    fx0 = model.factor.x0 if model.factor.enabled else None
    for i in range(model.ell):
        v = value_at(s.strategy.utility, spec.x0, i, s.fields, gamma=spec.gamma, beta=spec.beta, factor0=fx0)
        rows.append(f"{i + 1},{FMT % spec.x0},{FMT % v.value}")
    art.add("value.csv", "\n".join(rows) + "\n")
    art.add_json("value.json", s.value.to_dict())
    return {
        "command": spec.command, "model_hash": model_hash(doc), "utility": s.mode,
        "gamma": spec.gamma if s.mode == "power" else None,
        "beta": spec.beta if s.mode.startswith("exp") else None,
        "constraints": s.theta.to_dict(), "grid_n": s.grid.N, "regime": spec.regime,
        "x0": spec.x0, "value": s.value.value, "value_components": s.value.components,
        "bounds": s.bounds.to_dict(),
    }


def sim_config(spec: RunSpec, grid: TimeGrid, paths: Optional[int] = None) -> SimConfig:
    return SimConfig(n_paths=int(paths or spec.paths), seed=int(spec.seed), dt=spec.dt or grid.dt,
                     antithetic=bool(spec.antithetic), workers=int(spec.workers))


# -- verification -----------------------------------------------------------------


def _check(name: str, ok: bool, **detail) -> dict:
    return {"name": name, "ok": bool(ok), **detail}


def bound_checks(s: Solved, beta: Optional[float]) -> list:
    b = s.bounds
    if s.mode == "power":
        vals = s.fields["P"].values
    elif s.mode == "log":
        vals = s.fields["h"].values
    elif s.mode == "exp-deterministic":
        vals = np.exp(-beta * s.fields["Y"].values)
    else:
        vals = s.fields["P"].values
    lo, hi = float(np.min(vals)), float(np.max(vals))
    ok = b.contains(vals, BOUND_SLACK)
    return [_check("bound sandwich", ok, case=b.case, field_min=lo, field_max=hi,
                   lower=b.lower, upper=b.upper)]


def transform_checks(spec: RunSpec, model: MarketModel, s: Solved) -> list:
    g = s.grid
    if s.mode == "power":
        Y = bsde.solve_power_logform(model, spec.gamma, s.theta, g, spec.picard)
        gap = float(np.max(np.abs(np.exp(Y.values) - s.fields["P"].values)))
        return [_check("transform exp(Y) = P", gap <= TRANSFORM_TOL, max_gap=gap)]
    if s.mode == "exp-deterministic":
        P = bsde.solve_exp_Y(model, s.theta.portfolio_set(), spec.beta, s.fields["h"], g, "P", spec.picard)
        gap = float(np.max(np.abs(np.exp(-spec.beta * s.fields["Y"].values) - P.values)))
        return [_check("transform exp(-beta Y) = P", gap <= TRANSFORM_TOL, max_gap=gap)]
    if s.mode == "exp-random":
        h = s.fields["h"]
        hp = float(np.max(np.abs(h.values * h.aux["p"].values - 1.0)))
        Ygap = float(np.max(np.abs(s.fields["Y"].values - h.values * s.fields["P"].values)))
        return [_check("transform h p = 1", hp <= TRANSFORM_TOL, max_gap=hp),
                _check("transform Y = h P", Ygap <= TRANSFORM_TOL, max_gap=Ygap)]
    h = s.fields["h"]
    ok = bool(np.all(h.values > 0) and np.all(np.isfinite(s.fields["P"].values)))
    return [_check("log fields finite with h > 0", ok)]


def perturbations(s: Solved, i0: int, x0: float) -> list:
    """Portfolio scaled by 0.8, and consumption frozen at its initial value."""
    st = s.strategy
    mid = st.c0.shape[2] // 2
    c_bar = float(st.c0[0, i0, mid] + st.c1[0, i0, mid] * x0)
    return [st.scaled(0.8), st.with_constant_c(c_bar)]


def mc_checks(spec: RunSpec, model: MarketModel, s: Solved) -> tuple:
    cfg = sim_config(spec, s.grid)
    i0 = spec.regime - 1
    arms, skipped = [], []
    for p in perturbations(s, i0, spec.x0):
        (arms if p.feasible() else skipped).append(p)
    rep = perturbation_test(model, s.strategy, arms, cfg, spec.x0, i0)
    res = rep.candidate
    V = s.value.value
    z = (res.mean - V) / res.se if res.se > 0 else (0.0 if res.mean == V else np.inf)
    checks = [
        _check("strategy feasibility", s.strategy.feasible()),
        _check("MC within 3 SE of analytic value", abs(z) <= 3.0 and res.n_excluded == 0,
               mc_mean=res.mean, se=res.se, value=V, z=float(z), excluded=res.n_excluded),
    ]
    for o in rep.outcomes:
        checks.append(_check(f"perturbation {o.label}", o.not_better, **o.to_dict()))
    for p in skipped:
        checks.append(_check(f"perturbation {p.label}", True, skipped="leaves the constraint set"))
    return checks, res, rep


# -- commands ---------------------------------------------------------------------


def run(spec: RunSpec, given: set) -> int:
    t_start = time.perf_counter()
    art = Artifacts()
    try:
        doc, model = prepare(spec)
        spec = merge_run(spec, doc.get("run"), given)
        model, mode, theta = check(spec, model)
    except ParseError as exc:
        print(f"parse error: {exc}", file=sys.stderr)
        return EXIT_PARSE
    except ValidationFailure as exc:
        print("validation failed:", file=sys.stderr)
        for line in exc.lines:
            print(f"  {line}", file=sys.stderr)
        return EXIT_VALIDATION

    try:
        if spec.command == "sweep":
            summary = sweep(spec, doc, model, mode, theta, art)
            status = EXIT_OK
        else:
            s = solve(spec, model, mode, theta)
            summary = solve_artifacts(spec, doc, model, s, art)
            status = EXIT_OK
            if spec.command == "simulate":
                res = simulate_wealth(model, s.strategy, spec.x0, spec.regime - 1, sim_config(spec, s.grid))
                art.add_json("sim.json", res.to_dict())
                summary["sim"] = res.to_dict()
            elif spec.command == "verify":
                checks = bound_checks(s, spec.beta) + transform_checks(spec, model, s)
                mc, res, rep = mc_checks(spec, model, s)
                checks += mc
                ok = all(c["ok"] for c in checks)
                art.add_json("verify.json", {"ok": ok, "checks": checks})
                art.add_json("sim.json", res.to_dict())
                summary["sim"] = res.to_dict()
                summary["verify_ok"] = ok
                status = EXIT_OK if ok else EXIT_VERIFY
                if not ok:
                    for c in checks:
                        if not c["ok"]:
                            print(f"verification failed: {c['name']}", file=sys.stderr)
    except (ConfigurationError, DomainError) as exc:
        print(f"validation failed:\n  {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (SolverError, InfeasibleError, PreconditionError, FloatingPointError) as exc:
        print(f"solver failure: {exc}", file=sys.stderr)
        return EXIT_SOLVER

    if spec.wall_time:
        summary["wall_time"] = time.perf_counter() - t_start
    art.add_json("summary.json", summary)
    art.commit(spec.out)
    return status


SWEEPABLE = {"gamma", "beta", "eps", "grid_n", "x0"}


def sweep(spec: RunSpec, doc: dict, model: MarketModel, mode: str, theta: ConstraintSet,
          art: Artifacts) -> dict:
    if len(spec.sweep) != 1:
        raise ConfigurationError("sweep needs exactly one parameter list, e.g. --sweep gamma=0.3,0.5")
    (param, values), = spec.sweep.items()
    param = param.replace("-", "_")
    if param not in SWEEPABLE:
        raise ConfigurationError(f"cannot sweep {param!r}; choose from {sorted(SWEEPABLE)}")
    rows = [f"{param},value,lower,upper"]
    points = []
    for v in values:
        sp = replace(spec, **{param: int(v) if param == "grid_n" else float(v)})
        problems = sp.validate()
        if problems:
            raise ConfigurationError(f"sweep point {param}={v}: {'; '.join(problems)}")
        th = build_constraints(sp, model.m) if param == "eps" else theta
        rep = validate_model(model, mode, th, sp.gamma if mode == "power" else None)
        if not rep.ok:
            raise ConfigurationError(f"sweep point {param}={v}: {'; '.join(str(x) for x in rep)}")
        s = solve(sp, model, mode, th)
        rows.append(f"{FMT % float(v)},{FMT % s.value.value},{FMT % s.bounds.lower},{FMT % s.bounds.upper}")
        points.append({param: float(v), "value": s.value.value})
    art.add("sweep.csv", "\n".join(rows) + "\n")
    return {"command": "sweep", "model_hash": model_hash(doc), "utility": mode,
            "constraints": theta.to_dict(), "grid_n": spec.grid_n, "parameter": param, "points": points}


# -- argument parsing ---------------------------------------------------------------


def _sweep_arg(text: str) -> dict:
    try:
        name, vals = text.split("=", 1)
        return {name.strip(): [float(x) for x in vals.split(",") if x.strip()]}
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected name=v1,v2,..., got {text!r}") from None


def _json_arg(text: str) -> dict:
    try:
        out = json.loads(text)
    except json.JSONDecodeError as exc:
        raise argparse.ArgumentTypeError(f"invalid JSON: {exc.msg}") from None
    if not isinstance(out, dict):
        raise argparse.ArgumentTypeError("expected a JSON object")
    return out


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="rsopt", description="Optimal consumption and investment under regime switching.")
    p.add_argument("command", choices=["solve", "simulate", "verify", "sweep"])
    p.add_argument("--model", required=True, help="model config (JSON)")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--utility", choices=["power", "log", "exp", "exp-deterministic", "exp-random"])
    p.add_argument("--gamma", type=float)
    p.add_argument("--beta", type=float)
    p.add_argument("--constraints", help="unconstrained | no-shorting | box | budget-simplex | half-space")
    p.add_argument("--constraint-params", type=_json_arg, help="family parameters as a JSON object")
    p.add_argument("--eps", type=float, help="consumption floor parameter")
    p.add_argument("--grid-n", type=int)
    p.add_argument("--factor-nodes", type=int)
    p.add_argument("--picard", type=int)
    p.add_argument("--paths", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--dt", type=float, help="simulation step (defaults to the solver step)")
    p.add_argument("--antithetic", action="store_true", default=None)
    p.add_argument("--workers", type=int)
    p.add_argument("--x0", type=float, help="initial wealth")
    p.add_argument("--regime", type=int, help="initial regime (1-based)")
    p.add_argument("--sweep", type=_sweep_arg, help="parameter list, e.g. gamma=0.3,0.5")
    p.add_argument("--wall-time", action="store_true", default=None,
                   help="record wall time in summary.json (breaks byte-identical reruns)")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    flags = {k: v for k, v in vars(args).items() if v is not None and k not in ("command", "model", "out")}
    spec = RunSpec(command=args.command, model=args.model, out=args.out)
    spec = replace(spec, **flags)
    try:
        return run(spec, set(flags))
    except Exception as exc:  # anything not classified above is a bug
        print(f"internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
