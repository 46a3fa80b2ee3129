"""Finite-difference solver for the semilinear valuation PDEs.

Backward theta-scheme on a uniform (t, s) grid, central differences in s,
Rannacher start-up (fully implicit first steps) and a Picard fixed-point
iteration per time step for the nonlinear source.

Boundaries: with proportional vol and ``s_min == 0`` the PDE degenerates at
the lower node into the ODE du/dt + B(t, 0, u) = 0, which the scheme handles
without special casing since both diffusion and advection coefficients vanish
there. Every other boundary uses the linearity condition d2u/ds2 = 0.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Callable

import numpy as np
from scipy.interpolate import RectBivariateSpline
from scipy.linalg import solve_banded
from scipy.special import ndtr

from .deal_spec import DealSpec
from .driver import DriverContext, HedgeRule, driver_B, driver_Bprime
from .errors import ExtrapolationError, NumericalError, PicardConvergenceError
from .market_model import MarketSpec, TimeGrid, VolModel, sigma_eval

_HULL_TOL = 1e-12


@dataclass(frozen=True)
class SpatialGrid:
    s_min: float
    s_max: float
    n_space: int

    def __post_init__(self):
        if self.n_space < 3:
            raise ValueError("n_space must be >= 3")
        if not 0.0 <= self.s_min < self.s_max:
            raise ValueError(f"need 0 <= s_min < s_max, got [{self.s_min}, {self.s_max}]")

    @property
    def ds(self) -> float:
        return (self.s_max - self.s_min) / (self.n_space - 1)

    @property
    def nodes(self) -> np.ndarray:
        return np.linspace(self.s_min, self.s_max, self.n_space)

    @classmethod
    def around(
        cls,
        s0: float,
        vol: VolModel,
        T: float,
        n_space: int,
        s_min: float = 0.0,
        width: float = 5.0,
        s_max: float | None = None,
    ) -> "SpatialGrid":
        """Grid on [s_min, ~s_max] with the spacing adjusted so s0 is a node.

        ``s_max`` defaults to ``s0 exp(width sigma sqrt(T))`` with sigma the
        largest proportional level (or absolute level divided by s0).
        """
        if s_max is None:
            level = vol.max_level() if vol.is_proportional else vol.max_level() / s0
            s_max = s0 * math.exp(width * level * math.sqrt(T))
        if not s_min < s0 < s_max:
            raise ValueError("s0 must lie strictly inside the grid")
        ds = (s_max - s_min) / (n_space - 1)
        k = max(1, round((s0 - s_min) / ds))
        ds = (s0 - s_min) / k
        return cls(s_min, s_min + (n_space - 1) * ds, n_space)


@dataclass(frozen=True)
class PdeConfig:
    theta: float = 0.5
    picard_tol: float = 1e-10
    picard_max_iter: int = 50
    rannacher_steps: int = 2

    def __post_init__(self):
        if not 0.0 <= self.theta <= 1.0:
            raise ValueError("theta must lie in [0, 1]")
        if not self.picard_tol > 0.0:
            raise ValueError("picard_tol must be positive")
        if self.picard_max_iter < 1:
            raise ValueError("picard_max_iter must be >= 1")
        if self.rannacher_steps < 0:
            raise ValueError("rannacher_steps must be >= 0")


def _first_derivative(u: np.ndarray, ds: float) -> np.ndarray:
    return np.gradient(u, ds, axis=-1, edge_order=2)


def _second_derivative(u: np.ndarray, ds: float) -> np.ndarray:
    g = np.empty_like(u)
    g[..., 1:-1] = (u[..., 2:] - 2.0 * u[..., 1:-1] + u[..., :-2]) / (ds * ds)
    g[..., 0] = g[..., 1]
    g[..., -1] = g[..., -2]
    return g


@dataclass(frozen=True, eq=False)
class ValueSurface:
    """u(t, s) on the grid, with delta = du/ds and z = sigma(t, s) du/ds."""

    times: np.ndarray
    s: np.ndarray
    u: np.ndarray
    vol: VolModel
    picard_iterations: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))

    @cached_property
    def delta(self) -> np.ndarray:
        return _first_derivative(self.u, self.s[1] - self.s[0])

    @cached_property
    def gamma(self) -> np.ndarray:
        return _second_derivative(self.u, self.s[1] - self.s[0])

    @cached_property
    def z(self) -> np.ndarray:
        sig = np.vstack([sigma_eval(self.vol, t, self.s) for t in self.times])
        return sig * self.delta

    @cached_property
    def _spline(self) -> RectBivariateSpline:
        return RectBivariateSpline(self.times, self.s, self.u, kx=1, ky=3, s=0)

    @property
    def t0(self) -> float:
        return float(self.times[0])

    def _check_hull(self, t, s):
        t = np.asarray(t, dtype=float)
        s = np.asarray(s, dtype=float)
        if np.any(t < self.times[0] - _HULL_TOL) or np.any(t > self.times[-1] + _HULL_TOL):
            raise ExtrapolationError("time outside surface hull")
        if np.any(s < self.s[0] - _HULL_TOL) or np.any(s > self.s[-1] + _HULL_TOL):
            raise ExtrapolationError(
                f"price outside surface hull [{self.s[0]}, {self.s[-1]}]"
            )
        return np.clip(t, self.times[0], self.times[-1]), np.clip(s, self.s[0], self.s[-1])

    def _bilinear(self, field_: np.ndarray, t, s):
        t, s = self._check_hull(t, s)
        t, s = np.broadcast_arrays(t, s)
        ti = np.clip(np.searchsorted(self.times, t, side="right") - 1, 0, len(self.times) - 2)
        si = np.clip(np.searchsorted(self.s, s, side="right") - 1, 0, len(self.s) - 2)
        wt = (t - self.times[ti]) / (self.times[ti + 1] - self.times[ti])
        ws = (s - self.s[si]) / (self.s[si + 1] - self.s[si])
        f00 = field_[ti, si]
        f01 = field_[ti, si + 1]
        f10 = field_[ti + 1, si]
        f11 = field_[ti + 1, si + 1]
        out = (1 - wt) * ((1 - ws) * f00 + ws * f01) + wt * ((1 - ws) * f10 + ws * f11)
        return float(out) if out.ndim == 0 else out

    def value_at(self, t, s):
        """u(t, s): cubic spline in s, linear in t."""
        t, s = self._check_hull(t, s)
        t, s = np.broadcast_arrays(t, s)
        out = self._spline(t, s, grid=False)
        return float(out) if np.ndim(out) == 0 else out

    def spline_at(self, t, s, order: int = 0):
        """``order``-th s-derivative of the cubic-in-s interpolant.

        Value, delta and gamma from this method belong to one smooth function,
        which the ledger replay relies on for its Taylor identities.
        """
        if order not in (0, 1, 2):
            raise ValueError("order must be 0, 1 or 2")
        t, s = self._check_hull(t, s)
        t, s = np.broadcast_arrays(t, s)
        out = self._spline(t, s, dy=order, grid=False)
        return float(out) if np.ndim(out) == 0 else out

    def gamma_at(self, t, s):
        return self._bilinear(self.gamma, t, s)

    def z_at(self, t, s):
        return self._bilinear(self.z, t, s)

    def to_csv(self, u_path, z_path) -> None:
        """Write u and z: header of s nodes, one row per time node."""
        for path, data in ((u_path, self.u), (z_path, self.z)):
            with open(path, "w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow(["t"] + [f"{x:.12g}" for x in self.s])
                for t, row in zip(self.times, data):
                    w.writerow([f"{t:.12g}"] + [f"{x:.12g}" for x in row])


def extract_delta(surface: ValueSurface, t, s):
    """du/ds at (t, s) by bilinear interpolation of z / sigma on the grid."""
    return surface._bilinear(surface.delta, t, s)


def bs_closed_form(s: float, k: float, T: float, rate: float, sigma_prop: float) -> float:
    """Black-Scholes call with flat rate and proportional vol."""
    if T <= 0.0:
        return max(s - k, 0.0)
    df = math.exp(-rate * T)
    if sigma_prop <= 0.0:
        return max(s - k * df, 0.0)
    if s <= 0.0:
        return 0.0
    sd = sigma_prop * math.sqrt(T)
    d1 = (math.log(s / k) + (rate + 0.5 * sigma_prop**2) * T) / sd
    return float(s * ndtr(d1) - k * df * ndtr(d1 - sd))


def bs_delta(s: float, k: float, T: float, rate: float, sigma_prop: float) -> float:
    sd = sigma_prop * math.sqrt(T)
    return float(ndtr((math.log(s / k) + (rate + 0.5 * sigma_prop**2) * T) / sd))


DriftFn = Callable[[float, np.ndarray], "np.ndarray | float"]
SourceFn = Callable[[float, np.ndarray, np.ndarray], np.ndarray]


def _march(
    terminal: np.ndarray,
    grid: TimeGrid,
    sgrid: SpatialGrid,
    vol: VolModel,
    drift: DriftFn,
    source: SourceFn,
    config: PdeConfig,
) -> ValueSurface:
    s = sgrid.nodes
    ds = sgrid.ds
    times = grid.nodes
    nt = grid.n_steps
    n = s.size
    degenerate_lower = vol.is_proportional and sgrid.s_min == 0.0

    u = np.empty((nt + 1, n))
    u[nt] = terminal
    iters = np.zeros(nt, dtype=int)

    def operator(t_rate, t_sig, delta):
        # coefficients of L u_i = lo_i u_{i-1} + di_i u_i + up_i u_{i+1}
        a = 0.5 * sigma_eval(vol, t_sig, s) ** 2 / (ds * ds)
        b = np.asarray(drift(t_rate, delta)) * s / (2.0 * ds)
        return a - b, -2.0 * a, a + b

    def apply(lo, di, up, v):
        out = di * v
        out[1:] += lo[1:] * v[:-1]
        out[:-1] += up[:-1] * v[1:]
        return out

    for k in range(nt - 1, -1, -1):
        t_lo, t_hi = times[k], times[k + 1]
        dt = t_hi - t_lo
        t_rate = 0.5 * (t_lo + t_hi)
        theta = 1.0 if (nt - 1 - k) < config.rannacher_steps else config.theta

        known = u[k + 1]
        rhs_known = known.copy()
        if theta < 1.0:
            d_known = _first_derivative(known, ds)
            lo, di, up = operator(t_rate, t_hi, d_known)
            rhs_known += (1.0 - theta) * dt * (apply(lo, di, up, known) + source(t_rate, known, d_known))

        guess = known
        residual = math.inf
        for it in range(1, config.picard_max_iter + 1):
            d_guess = _first_derivative(guess, ds)
            lo, di, up = operator(t_rate, t_lo, d_guess)
            rhs = rhs_known + theta * dt * source(t_rate, guess, d_guess)
            new = _solve_step(lo, di, up, theta * dt, rhs, degenerate_lower)
            residual = float(np.max(np.abs(new - guess)))
            guess = new
            if not np.isfinite(residual):
                raise NumericalError(f"non-finite values at time step {k}", step=k)
            if residual < config.picard_tol:
                break
        else:
            raise PicardConvergenceError(
                f"Picard iteration did not converge at step {k} (t={t_lo:.6g}); "
                f"last max-norm change {residual:.3e}",
                residual=residual,
                step=k,
            )
        u[k] = guess
        iters[k] = it

    return ValueSurface(times=times, s=s, u=u, vol=vol, picard_iterations=iters)


def _solve_step(lo, di, up, w, rhs, degenerate_lower):
    """Solve (I - w L) x = rhs with linear extrapolation at non-ODE boundaries."""
    n = rhs.size
    sub = -w * lo
    diag = 1.0 - w * di
    sup = -w * up
    # upper node: x_{n-1} = 2 x_{n-2} - x_{n-3}, folded into row n-2
    diag[n - 2] += 2.0 * sup[n - 2]
    sub[n - 2] -= sup[n - 2]
    first = 0
    if not degenerate_lower:
        # lower node: x_0 = 2 x_1 - x_2, folded into row 1
        diag[1] += 2.0 * sub[1]
        sup[1] -= sub[1]
        first = 1
    last = n - 1  # exclusive end of the solved block
    m = last - first
    ab = np.zeros((3, m))
    ab[0, 1:] = sup[first:last - 1]
    ab[1] = diag[first:last]
    ab[2, :-1] = sub[first + 1:last]
    x = np.empty(n)
    x[first:last] = solve_banded((1, 1), ab, rhs[first:last], check_finite=False)
    x[n - 1] = 2.0 * x[n - 2] - x[n - 3]
    if not degenerate_lower:
        x[0] = 2.0 * x[1] - x[2]
    return x


def _check_grid(deal: DealSpec, grid: TimeGrid):
    if abs(grid.T - deal.maturity) > 1e-12:
        raise ValueError(f"time grid ends at {grid.T}, deal matures at {deal.maturity}")


def solve_independent(
    deal: DealSpec,
    vol: VolModel,
    grids: tuple[TimeGrid, SpatialGrid],
    config: PdeConfig = PdeConfig(),
) -> ValueSurface:
    """Solve the repo-drift PDE with the r-free driver B'.

    With h+ != h- the advection rate at each node follows the sign of the
    current Picard iterate's delta.
    """
    grid, sgrid = grids
    _check_grid(deal, grid)
    ctx = DriverContext(deal)
    leg_h = deal.leg_h
    s = sgrid.nodes

    if leg_h.symmetric:
        def drift(t, delta):
            return leg_h.plus(t)
    else:
        def drift(t, delta):
            return np.where(delta > 0.0, leg_h.plus(t), leg_h.minus(t))

    def source(t, v, delta):
        return driver_Bprime(ctx, t, s, v)

    return _march(deal.payoff(s), grid, sgrid, vol, drift, source, config)


def solve_dependent(
    deal: DealSpec,
    market: MarketSpec,
    grids: tuple[TimeGrid, SpatialGrid],
    config: PdeConfig = PdeConfig(),
    hedge_mode: "str | HedgeRule" = "delta",
) -> ValueSurface:
    """Solve the r-drift PDE whose driver B carries the -(r - h) H term.

    z in the source is the lagged central difference of the Picard iterate.
    """
    grid, sgrid = grids
    _check_grid(deal, grid)
    hedge = hedge_mode if isinstance(hedge_mode, HedgeRule) else HedgeRule(hedge_mode)
    ctx = DriverContext(deal, r=market.r)
    vol = market.vol
    s = sgrid.nodes

    def drift(t, delta):
        return market.r(t)

    def source(t, v, delta):
        z = sigma_eval(vol, t, s) * delta
        return driver_B(ctx, t, s, v, z, hedge(t, s, v, z, vol))

    return _march(deal.payoff(s), grid, sgrid, vol, drift, source, config)
