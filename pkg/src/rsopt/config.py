"""JSON model and run configuration.

Model document::

    {
      "horizon": 1.0,
      "generator": [[-1, 1], [2, -2]],
      "assets": {"m": 1, "n": 1},
      "delta_floor": 1e-8,
      "regimes": [
        {"r":     [{"t_start": 0, "value": 0.02}],
         "mu":    [{"t_start": 0, "value": [0.07]}],
         "sigma": [{"t_start": 0, "value": [[0.2]]}],
         "rho":   [{"t_start": 0, "value": 0.1}],
         "r_slope": 0.0, "mu_slope": [0.0]},
        ...
      ],
      "factor": {"kappa": 1, "theta": 0, "vol": [0.3], "x0": 0,
                 "x_min": -1, "x_max": 1, "nodes": 41},
      "run": {...}
    }

Each coefficient is either a list of ``{t_start, value}`` pieces
(right-continuous steps, the first starting at 0) or a bare value meaning
constant in time.  ``run`` holds defaults for any command-line flag
(same names with dashes replaced by underscores); flags win.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, fields, replace
from typing import Any, Optional

import numpy as np

from .errors import ParseError
from .market import CoefficientCurve, FactorSpec, MarketModel, RegimeGenerator

COEFFS = ("r", "mu", "sigma", "rho")


def _num(x, where: str, shape=None):
    try:
        arr = np.asarray(x, dtype=float)
    except (TypeError, ValueError):
        raise ParseError(f"{where}: expected a number or numeric array, got {x!r}") from None
    if shape is not None and arr.shape != shape:
        raise ParseError(f"{where}: expected shape {shape}, got {arr.shape}")
    return arr


def _pieces(spec, where: str):
    """``[(t_start, value), ...]`` from a coefficient entry."""
    if isinstance(spec, list) and spec and all(isinstance(p, dict) for p in spec):
        out = []
        for j, p in enumerate(spec):
            loc = f"{where}[{j}]"
            if "t_start" not in p or "value" not in p:
                raise ParseError(f"{loc}: each piece needs 't_start' and 'value'")
            out.append((float(_num(p["t_start"], f"{loc}.t_start", ())), p["value"], loc))
        if out[0][0] != 0.0:
            raise ParseError(f"{where}[0].t_start: first piece must start at 0")
        ts = [t for t, _, _ in out]
        if any(b <= a for a, b in zip(ts, ts[1:])):
            raise ParseError(f"{where}: t_start values must be strictly increasing")
        return out
    return [(0.0, spec, where)]


def _sample(pieces, t: float, shape, name: str):
    idx = 0
    for j, (ts, _, _) in enumerate(pieces):
        if ts <= t:
            idx = j
    _, value, loc = pieces[idx]
    return _num(value, f"{loc}.value" if loc.endswith("]") else loc, shape)


def _require(doc: dict, key: str, where: str = ""):
    if key not in doc:
        raise ParseError(f"{where}{key}: missing required entry")
    return doc[key]


def model_from_dict(doc: dict) -> MarketModel:
    """Build a model; raises ``ParseError`` naming the offending entry."""
    if not isinstance(doc, dict):
        raise ParseError("<root>: expected an object")
    horizon = float(_num(_require(doc, "horizon"), "horizon", ()))
    q = _num(_require(doc, "generator"), "generator")
    if q.ndim != 2 or q.shape[0] != q.shape[1]:
        raise ParseError(f"generator: expected a square matrix, got shape {q.shape}")
    ell = q.shape[0]
    assets = _require(doc, "assets")
    try:
        m, n = int(assets["m"]), int(assets["n"])
    except (KeyError, TypeError, ValueError):
        raise ParseError("assets: expected {\"m\": int, \"n\": int}") from None
    regimes = _require(doc, "regimes")
    if not isinstance(regimes, list) or len(regimes) != ell:
        raise ParseError(f"regimes: expected a list of {ell} entries (one per generator row)")

    shapes = {"r": (), "mu": (m,), "sigma": (m, n), "rho": ()}
    parsed = []
    breaks = set()
    for i, reg in enumerate(regimes):
        where = f"regimes[{i}]"
        if not isinstance(reg, dict):
            raise ParseError(f"{where}: expected an object")
        entry = {}
        for name in COEFFS:
            entry[name] = _pieces(_require(reg, name, f"{where}."), f"{where}.{name}")
            breaks.update(t for t, _, _ in entry[name])
        parsed.append(entry)
    bp = np.array(sorted(breaks))
    if bp[-1] >= horizon:
        raise ParseError(f"regimes: breakpoint {bp[-1]:g} not before the horizon {horizon:g}")

    arrays = {name: np.stack([np.stack([_sample(parsed[i][name], t, shapes[name], name) for t in bp])
                              for i in range(ell)]) for name in COEFFS}
    r_slope = np.array([float(_num(reg.get("r_slope", 0.0), f"regimes[{i}].r_slope", ()))
                        for i, reg in enumerate(regimes)])
    mu_slope = np.stack([np.broadcast_to(_num(reg.get("mu_slope", 0.0), f"regimes[{i}].mu_slope"), (m,))
                         for i, reg in enumerate(regimes)])
    curve = CoefficientCurve(bp, arrays["r"], arrays["mu"], arrays["sigma"], arrays["rho"],
                             r_slope=r_slope, mu_slope=mu_slope)

    factor = FactorSpec()
    if doc.get("factor") is not None:
        f = doc["factor"]
        if not isinstance(f, dict):
            raise ParseError("factor: expected an object")
        try:
            factor = FactorSpec(
                enabled=bool(f.get("enabled", True)),
                kappa=float(f.get("kappa", 0.0)), theta=float(f.get("theta", 0.0)),
                vol=_num(f.get("vol", np.zeros(n)), "factor.vol", (n,)),
                x0=float(f.get("x0", 0.0)), x_min=float(f.get("x_min", -1.0)),
                x_max=float(f.get("x_max", 1.0)), nodes=int(f.get("nodes", 51)),
            )
        except (TypeError, ValueError) as exc:
            if isinstance(exc, ParseError):
                raise
            raise ParseError(f"factor: {exc}") from None
    delta = float(_num(doc.get("delta_floor", 1e-8), "delta_floor", ()))
    return MarketModel(RegimeGenerator(q), m, n, curve, horizon, delta, factor)


def load_document(path) -> dict:
    try:
        with open(path) as fh:
            text = fh.read()
    except OSError as exc:
        raise ParseError(f"{path}: {exc.strerror}") from None
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}:{exc.lineno}:{exc.colno}: {exc.msg}") from None


def model_hash(doc: dict) -> str:
    """SHA-256 of the model part of a document in canonical JSON form."""
    core = {k: v for k, v in doc.items() if k != "run"}
    return hashlib.sha256(json.dumps(core, sort_keys=True, separators=(",", ":")).encode()).hexdigest()


@dataclass(frozen=True)
class RunSpec:
    command: str
    model: str
    out: str
    utility: str = "power"
    gamma: Optional[float] = None
    beta: Optional[float] = None
    constraints: str = "unconstrained"
    constraint_params: dict = field(default_factory=dict)
    eps: Optional[float] = None
    grid_n: int = 1000
    factor_nodes: Optional[int] = None
    picard: int = 3
    paths: int = 100000
    seed: int = 0
    dt: Optional[float] = None
    antithetic: bool = False
    workers: int = 1
    x0: float = 1.0
    regime: int = 1
    sweep: dict = field(default_factory=dict)
    wall_time: bool = False

    def validate(self) -> list:
        out = []
        if self.utility not in ("power", "log", "exp", "exp-deterministic", "exp-random"):
            out.append(f"unknown utility {self.utility!r}")
        if self.utility == "power" and (self.gamma is None or self.gamma == 0 or self.gamma >= 1):
            out.append("power utility needs gamma < 1, gamma != 0")
        if self.utility.startswith("exp") and not (self.beta is not None and self.beta > 0):
            out.append("exponential utility needs beta > 0")
        if self.grid_n < 2:
            out.append("grid-n must be at least 2")
        if self.paths < 1:
            out.append("paths must be at least 1")
        if self.picard < 0:
            out.append("picard must be non-negative")
        return out


RUN_FIELDS = {f.name for f in fields(RunSpec)} - {"command", "model"}


def merge_run(spec: RunSpec, doc_run: Optional[dict], given: set) -> RunSpec:
    """Fill fields from the document's ``run`` section unless set by a flag."""
    if not doc_run:
        return spec
    if not isinstance(doc_run, dict):
        raise ParseError("run: expected an object")
    updates: dict[str, Any] = {}
    for key, value in doc_run.items():
        name = key.replace("-", "_")
        if name not in RUN_FIELDS:
            raise ParseError(f"run.{key}: unknown setting")
        if name not in given:
            updates[name] = _coerce(name, value, f"run.{key}")
    return replace(spec, **updates)


FLOATS = {"gamma", "beta", "eps", "dt", "x0"}
INTS = {"grid_n", "factor_nodes", "picard", "paths", "seed", "workers", "regime"}
BOOLS = {"antithetic", "wall_time"}


def _coerce(name: str, value, where: str):
    if value is None:
        return None
    try:
        if name in FLOATS:
            return float(value)
        if name in INTS:
            if isinstance(value, float) and not value.is_integer():
                raise ValueError(value)
            return int(value)
    except (TypeError, ValueError):
        raise ParseError(f"{where}: expected a number, got {value!r}") from None
    if name in BOOLS and not isinstance(value, bool):
        raise ParseError(f"{where}: expected true or false, got {value!r}")
    if name in ("constraint_params", "sweep") and not isinstance(value, dict):
        raise ParseError(f"{where}: expected an object")
    return value
