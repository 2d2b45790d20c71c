"""Uniform time grid and the solved-field container."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from numpy.typing import NDArray

from ..errors import DomainError


@dataclass(frozen=True)
class TimeGrid:
    """``N`` uniform steps on ``[0, T]``."""

    T: float
    N: int

    def __post_init__(self):
        if self.N < 2:
            raise DomainError(f"time grid needs N >= 2, got {self.N}")
        if not self.T > 0:
            raise DomainError(f"horizon must be positive, got {self.T}")

    @property
    def dt(self) -> float:
        return self.T / self.N

    @property
    def nodes(self) -> NDArray[np.float64]:
        return np.linspace(0.0, self.T, self.N + 1)

    @property
    def half_nodes(self) -> NDArray[np.float64]:
        """Nodes and midpoints, ``2N + 1`` points (RK4 stage times)."""
        return np.linspace(0.0, self.T, 2 * self.N + 1)

    def index(self, t) -> NDArray[np.intp]:
        """Left node index of ``t`` (piecewise-constant lookup)."""
        k = np.floor(np.asarray(t, dtype=float) / self.dt + 1e-9).astype(np.intp)
        return np.clip(k, 0, self.N)


@dataclass
class RegimeField:
    """One scalar field per regime on the time (x factor) grid.

    ``values`` has shape ``(N + 1, ell, nx)`` and ``gradients``
    ``(N + 1, ell, nx, n)``; ``nx = 1`` and ``x_nodes is None`` in ODE mode,
    where the gradients are identically zero.
    """

    name: str
    grid: TimeGrid
    values: NDArray[np.float64]
    gradients: NDArray[np.float64]
    x_nodes: Optional[NDArray[np.float64]] = None
    terminal: float = 0.0
    aux: dict = field(default_factory=dict, repr=False)

    @property
    def ell(self) -> int:
        return self.values.shape[1]

    @property
    def nx(self) -> int:
        return self.values.shape[2]

    @property
    def factor_mode(self) -> bool:
        return self.x_nodes is not None

    def value(self, t_index: int, regime: int, x: Optional[float] = None) -> float:
        row = self.values[t_index, regime]
        if not self.factor_mode:
            return float(row[0])
        return float(np.interp(x, self.x_nodes, row))

    def gradient(self, t_index: int, regime: int, x: Optional[float] = None) -> NDArray[np.float64]:
        g = self.gradients[t_index, regime]
        if not self.factor_mode:
            return g[0].copy()
        return np.array([np.interp(x, self.x_nodes, g[:, j]) for j in range(g.shape[1])])

    def initial(self, regime: int, x0: Optional[float] = None) -> float:
        return self.value(0, regime, x0)

    def map(self, name: str, fn, dfn=None) -> "RegimeField":
        """Pointwise transform; gradients follow the chain rule when ``dfn`` is given."""
        v = fn(self.values)
        g = np.zeros_like(self.gradients) if dfn is None else dfn(self.values)[..., None] * self.gradients
        return RegimeField(name, self.grid, v, g, self.x_nodes, float(fn(np.float64(self.terminal))))

    def to_csv(self, path=None) -> str:
        """CSV with columns ``t, regime, [x], value, grad_1..grad_n`` (regimes 1-based)."""
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        n = self.gradients.shape[-1]
        head = ["t", "regime"] + (["x"] if self.factor_mode else []) + ["value"]
        w.writerow(head + [f"grad_{j + 1}" for j in range(n)])
        t = self.grid.nodes
        fmt = "%.17g"
        for k in range(self.grid.N + 1):
            for i in range(self.ell):
                for ix in range(self.nx):
                    row = [fmt % t[k], str(i + 1)]
                    if self.factor_mode:
                        row.append(fmt % self.x_nodes[ix])
                    row.append(fmt % self.values[k, i, ix])
                    row.extend(fmt % g for g in self.gradients[k, i, ix])
                    w.writerow(row)
        text = buf.getvalue()
        if path is not None:
            with open(path, "w", newline="") as fh:
                fh.write(text)
        return text

    @classmethod
    def from_csv(cls, path, name: str = "field", terminal: float = 0.0) -> "RegimeField":
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        head, body = rows[0], np.array(rows[1:], dtype=float)
        has_x = "x" in head
        n = sum(h.startswith("grad_") for h in head)
        t = np.unique(body[:, 0])
        ell = int(body[:, 1].max())
        xs = np.unique(body[:, 2]) if has_x else None
        nx = len(xs) if has_x else 1
        col = 3 if has_x else 2
        values = body[:, col].reshape(len(t), ell, nx)
        grads = body[:, col + 1:col + 1 + n].reshape(len(t), ell, nx, n)
        grid = TimeGrid(float(t[-1]), len(t) - 1)
        return cls(name, grid, values, grads, xs, terminal)
