"""Risky-asset dynamics, volatility models, time grids and discounting.

All rate-like inputs are piecewise-constant ``Schedule`` objects so that
integrals over time are exact bucket sums.
"""

from __future__ import annotations

import bisect
import math
from dataclasses import dataclass
from typing import Callable, Iterable

import numpy as np
from scipy.special import ndtri

from .errors import DomainError

_UINT64 = (1 << 64) - 1
# half an ulp of the 53-bit uniform lattice; keeps uniforms strictly inside (0, 1)
_HALF_ULP = 2.0**-54


@dataclass(frozen=True)
class Schedule:
    """Right-continuous piecewise-constant function of time.

    ``values[i]`` applies on ``[starts[i], starts[i+1])``; the last bucket
    extends to infinity.
    """

    starts: tuple[float, ...]
    values: tuple[float, ...]

    def __post_init__(self):
        starts = tuple(float(x) for x in self.starts)
        values = tuple(float(x) for x in self.values)
        if not starts or len(starts) != len(values):
            raise ValueError("schedule needs matching, non-empty starts and values")
        if starts[0] != 0.0:
            raise ValueError(f"first bucket must start at 0, got {starts[0]}")
        if any(b <= a for a, b in zip(starts, starts[1:])):
            raise ValueError("bucket starts must be strictly increasing")
        if not all(math.isfinite(v) for v in values):
            raise ValueError("schedule values must be finite")
        object.__setattr__(self, "starts", starts)
        object.__setattr__(self, "values", values)

    @classmethod
    def constant(cls, value: float) -> "Schedule":
        return cls((0.0,), (value,))

    @classmethod
    def from_pairs(cls, pairs: Iterable[tuple[float, float]]) -> "Schedule":
        pairs = list(pairs)
        return cls(tuple(p[0] for p in pairs), tuple(p[1] for p in pairs))

    def to_pairs(self) -> list[tuple[float, float]]:
        return list(zip(self.starts, self.values))

    def __call__(self, t: float) -> float:
        if t < 0.0:
            raise DomainError(f"schedule queried at negative time {t}")
        return self.values[bisect.bisect_right(self.starts, t) - 1]

    def at(self, t) -> np.ndarray:
        t = np.asarray(t, dtype=float)
        if np.any(t < 0.0):
            raise DomainError("schedule queried at negative time")
        idx = np.searchsorted(self.starts, t, side="right") - 1
        return np.asarray(self.values)[idx]

    def integral(self, t1: float, t2: float) -> float:
        """Exact integral over ``[t1, t2]``."""
        if t1 > t2:
            raise DomainError(f"invalid interval [{t1}, {t2}]")
        if t1 < 0.0:
            raise DomainError(f"schedule integrated from negative time {t1}")
        total = 0.0
        edges = self.starts[1:] + (math.inf,)
        for start, end, value in zip(self.starts, edges, self.values):
            lo, hi = max(start, t1), min(end, t2)
            if hi > lo:
                total += value * (hi - lo)
        return total

    def is_constant(self) -> bool:
        return all(v == self.values[0] for v in self.values)

    def sup_abs(self) -> float:
        return max(abs(v) for v in self.values)

    def min(self) -> float:
        return min(self.values)

    def max(self) -> float:
        return max(self.values)

    def combine(self, other: "Schedule", op: Callable[[float, float], float]) -> "Schedule":
        starts = sorted(set(self.starts) | set(other.starts))
        return Schedule(tuple(starts), tuple(op(self(t), other(t)) for t in starts))

    def __add__(self, other: "Schedule") -> "Schedule":
        return self.combine(other, lambda a, b: a + b)

    def __sub__(self, other: "Schedule") -> "Schedule":
        return self.combine(other, lambda a, b: a - b)

    def map(self, fn: Callable[[float], float]) -> "Schedule":
        return Schedule(self.starts, tuple(fn(v) for v in self.values))


ZERO = Schedule.constant(0.0)


@dataclass(frozen=True)
class TimeGrid:
    t0: float
    T: float
    n_steps: int

    def __post_init__(self):
        if not self.T > self.t0:
            raise ValueError(f"need T > t0, got t0={self.t0}, T={self.T}")
        if int(self.n_steps) != self.n_steps or self.n_steps < 1:
            raise ValueError(f"n_steps must be a positive integer, got {self.n_steps}")

    @property
    def dt(self) -> float:
        return (self.T - self.t0) / self.n_steps

    @property
    def nodes(self) -> np.ndarray:
        return np.linspace(self.t0, self.T, self.n_steps + 1)


VOL_KINDS = ("constant", "proportional", "term-structure")


@dataclass(frozen=True)
class VolModel:
    """Diffusion coefficient sigma(t, s).

    ``constant`` and ``term-structure`` are absolute volatilities (currency per
    sqrt-year); ``proportional`` returns ``level(t) * s``.
    """

    kind: str
    levels: Schedule

    def __post_init__(self):
        if self.kind not in VOL_KINDS:
            raise ValueError(f"unknown vol kind {self.kind!r}; expected one of {VOL_KINDS}")
        if isinstance(self.levels, (int, float)):
            object.__setattr__(self, "levels", Schedule.constant(float(self.levels)))
        if self.levels.min() < 0.0:
            raise ValueError("volatility levels must be non-negative")
        if self.kind == "constant" and not self.levels.is_constant():
            raise ValueError("constant vol takes a single level")

    @classmethod
    def constant(cls, sigma: float) -> "VolModel":
        return cls("constant", Schedule.constant(sigma))

    @classmethod
    def proportional(cls, level) -> "VolModel":
        levels = level if isinstance(level, Schedule) else Schedule.constant(level)
        return cls("proportional", levels)

    @classmethod
    def term_structure(cls, levels: Schedule) -> "VolModel":
        return cls("term-structure", levels)

    @property
    def is_proportional(self) -> bool:
        return self.kind == "proportional"

    def level(self, t: float) -> float:
        return self.levels(t)

    def max_level(self) -> float:
        return self.levels.max()

    def min_level(self) -> float:
        return self.levels.min()


def sigma_eval(vol: VolModel, t: float, s):
    """Evaluate sigma(t, s); vectorised over ``s``."""
    s_arr = np.asarray(s, dtype=float)
    if np.any(s_arr < 0.0):
        raise DomainError("sigma evaluated at negative price")
    level = vol.level(t)
    if vol.is_proportional:
        out = level * s_arr
    else:
        out = np.full_like(s_arr, level)
    return float(out) if out.ndim == 0 else out


@dataclass(frozen=True)
class MarketSpec:
    s0: float
    r: Schedule
    vol: VolModel

    def __post_init__(self):
        if not self.s0 > 0.0:
            raise ValueError(f"s0 must be positive, got {self.s0}")
        if isinstance(self.r, (int, float)):
            object.__setattr__(self, "r", Schedule.constant(float(self.r)))


def discount(t1: float, t2: float, rate: Schedule) -> float:
    """exp(-integral of ``rate`` over [t1, t2])."""
    if t1 > t2:
        raise DomainError(f"invalid interval: t1={t1} > t2={t2}")
    return math.exp(-rate.integral(t1, t2))


def standard_normals(seed: int, step: int, n_paths: int) -> np.ndarray:
    """Normals for one time step, one per path.

    Counter-based: the draw for (seed, step, path) is the ``path``-th output of
    a Philox stream keyed by (seed, step), so it depends on neither the number
    of paths requested nor the order in which steps are generated.
    """
    key = np.array([seed & _UINT64, step & _UINT64], dtype=np.uint64)
    u = np.random.Generator(np.random.Philox(key=key)).random(n_paths)
    return ndtri(u + _HALF_ULP)


def brownian_increments(seed: int, grid: TimeGrid, n_paths: int) -> np.ndarray:
    """Matrix of dW, shape (n_paths, n_steps)."""
    sqdt = math.sqrt(grid.dt)
    out = np.empty((n_paths, grid.n_steps))
    for k in range(grid.n_steps):
        out[:, k] = sqdt * standard_normals(seed, k, n_paths)
    return out


def simulate_paths(
    market: MarketSpec,
    drift: Schedule,
    grid: TimeGrid,
    n_paths: int,
    seed: int,
) -> np.ndarray:
    """Simulate S under ``dS = drift(t) S dt + sigma(t, S) dW``.

    Proportional vol steps exactly in log space (bucket integrals of drift
    and variance); absolute vol uses exponential Euler in level space, which
    reproduces the deterministic growth exactly when sigma vanishes.
    """
    if n_paths < 1:
        raise ValueError("n_paths must be >= 1")
    nodes = grid.nodes
    paths = np.empty((n_paths, grid.n_steps + 1))
    paths[:, 0] = market.s0
    vol = market.vol
    for k in range(grid.n_steps):
        ta, tb = nodes[k], nodes[k + 1]
        dw = math.sqrt(tb - ta) * standard_normals(seed, k, n_paths)
        growth = drift.integral(ta, tb)
        if vol.is_proportional:
            var = vol.levels.map(lambda x: x * x).integral(ta, tb)
            paths[:, k + 1] = paths[:, k] * np.exp(
                growth - 0.5 * var + math.sqrt(var / (tb - ta)) * dw
            )
        else:
            paths[:, k + 1] = paths[:, k] * math.exp(growth) + vol.level(ta) * dw
    return paths
