"""Backward regression Monte Carlo for the valuation FBSDE.

Forward paths come from ``simulate_paths``; the backward pass regresses the
pathwise future cash flow on monomials of S to get the continuation value and
Z, solves the implicit driver step by fixed-point iteration, and accumulates
the driver along each path. The estimate is the path average of

    Y_0 = Phi(S_T) + sum_i dt * B(t_i, S_i, V_i, Z_i)

with (V_i, Z_i) the regression estimates, so the standard error is a plain
sample standard error.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

from .deal_spec import DealSpec
from .driver import DriverContext, HedgeRule, closeout_theta_tilde, driver_B, driver_Bprime
from .errors import NumericalError
from .market_model import MarketSpec, TimeGrid, simulate_paths, standard_normals
from .pde_engine import ValueSurface


@dataclass(frozen=True)
class McConfig:
    n_paths: int = 100_000
    n_steps: int = 100
    seed: int = 0
    basis_degree: int = 4
    picard_inner: int = 3
    cond_threshold: float = 1e10

    def __post_init__(self):
        if self.basis_degree < 1:
            raise ValueError("basis_degree must be >= 1")
        if self.n_paths < self.basis_degree + 1:
            raise ValueError("need n_paths >= basis_degree + 1")
        if self.n_steps < 1 or self.picard_inner < 1:
            raise ValueError("n_steps and picard_inner must be >= 1")


@dataclass(frozen=True)
class McEstimate:
    value: float
    std_error: float
    n_paths: int
    n_steps: int
    seed: int
    condition_numbers: tuple[float, ...] = ()
    warnings: tuple[str, ...] = ()
    label: str = ""

    CSV_HEADER = ("label", "value", "std_error", "n_paths", "n_steps", "seed")

    def csv_row(self) -> list[str]:
        return [
            self.label,
            f"{self.value:.12g}",
            f"{self.std_error:.12g}",
            str(self.n_paths),
            str(self.n_steps),
            str(self.seed),
        ]


def _basis(s: np.ndarray, scale: float, degree: int) -> np.ndarray:
    x = s / scale
    return np.vander(x, degree + 1, increasing=True)


def solve_backward(
    deal: DealSpec,
    market: MarketSpec,
    drift_choice: str,
    config: McConfig = McConfig(),
    hedge_mode: "str | HedgeRule" = "delta",
) -> McEstimate:
    """Estimate V_0 under drift ``r`` (driver B) or ``h`` (driver B').

    For ``h`` with h+ != h-, paths are simulated at the h+ leg and the
    difference ``(h(z) - h+) s z / sigma`` is carried in the driver, which
    selects the repo leg per step from the sign of the regressed Z.
    """
    if drift_choice not in ("r", "h"):
        raise ValueError(f"drift_choice must be 'r' or 'h', got {drift_choice!r}")
    grid = TimeGrid(0.0, deal.maturity, config.n_steps)
    times = grid.nodes
    dt = grid.dt
    vol = market.vol
    leg_h = deal.leg_h

    if drift_choice == "r":
        ctx = DriverContext(deal, r=market.r)
        hedge = hedge_mode if isinstance(hedge_mode, HedgeRule) else HedgeRule(hedge_mode)
        drift = market.r

        def drv(t, s, v, z):
            return driver_B(ctx, t, s, v, z, hedge(t, s, v, z, vol))
    else:
        ctx = DriverContext(deal)
        drift = leg_h.plus
        delta_hedge = HedgeRule("delta")

        def drv(t, s, v, z):
            out = driver_Bprime(ctx, t, s, v)
            if not leg_h.symmetric:
                h_sel = np.where(z > 0.0, leg_h.plus(t), leg_h.minus(t))
                out = out + (h_sel - leg_h.plus(t)) * delta_hedge(t, s, v, z, vol)
            return out

    paths = simulate_paths(market, drift, grid, config.n_paths, config.seed)
    y = np.asarray(deal.payoff(paths[:, -1]), dtype=float).copy()
    conds: list[float] = []
    notes: list[str] = []

    for i in range(config.n_steps - 1, -1, -1):
        t = times[i]
        s = paths[:, i]
        dw = math.sqrt(times[i + 1] - t) * standard_normals(config.seed, i, config.n_paths)
        targets = np.column_stack([y, y * dw / dt])
        if i == 0:
            cont, z = targets.mean(axis=0)
            cont = np.full_like(s, cont)
            z = np.full_like(s, z)
        else:
            X = _basis(s, market.s0, config.basis_degree)
            coef, _, _, sv = np.linalg.lstsq(X, targets, rcond=None)
            cond = float(sv[0] / sv[-1]) if sv[-1] > 0 else math.inf
            conds.append(cond)
            if cond > config.cond_threshold:
                msg = f"regression condition number {cond:.3e} at step {i}"
                notes.append(msg)
                warnings.warn(msg, RuntimeWarning, stacklevel=2)
            fitted = X @ coef
            cont, z = fitted[:, 0], fitted[:, 1]
        v = cont
        for _ in range(config.picard_inner):
            v = cont + dt * drv(t, s, v, z)
        y = y + dt * drv(t, s, v, z)
        if not np.all(np.isfinite(y)):
            raise NumericalError(f"non-finite values at step {i}", step=i)

    conds.reverse()
    return McEstimate(
        value=float(y.mean()),
        std_error=float(y.std(ddof=1) / math.sqrt(config.n_paths)),
        n_paths=config.n_paths,
        n_steps=config.n_steps,
        seed=config.seed,
        condition_numbers=tuple(conds),
        warnings=tuple(notes),
        label=f"fbsde-{drift_choice}",
    )


@dataclass(frozen=True)
class RepresentationReport:
    mean: float
    std_error: float
    pde_value: float
    n_clipped: int

    @property
    def residual(self) -> float:
        return self.mean - self.pde_value

    @property
    def z_score(self) -> float:
        if self.std_error == 0.0:
            return 0.0 if self.residual == 0.0 else math.inf
        return abs(self.residual) / self.std_error


def representation_check(
    surface: ValueSurface,
    deal: DealSpec,
    market: MarketSpec,
    config: McConfig = McConfig(),
) -> RepresentationReport:
    """Re-price u(0, s0) as an f-discounted expectation under repo drift.

    Along h-drift paths (repo leg picked from the sign of the surface's z)
    accumulate D(0, t; f) [pi + theta~ - lambda V + (f - c) C] dt with
    V = u(t, S_t), then add the f-discounted terminal payoff.
    """
    if abs(surface.times[-1] - deal.maturity) > 1e-12 or surface.t0 != 0.0:
        raise ValueError("surface time range does not match the deal")
    if not np.allclose(surface.u[-1], deal.payoff(surface.s), rtol=0.0, atol=1e-12):
        raise ValueError("surface terminal row does not match the deal payoff")

    grid = TimeGrid(0.0, deal.maturity, config.n_steps)
    times = grid.nodes
    ctx = DriverContext(deal)
    vol = market.vol
    leg_h, leg_f, leg_c = deal.leg_h, deal.leg_f, deal.leg_c
    lo, hi = surface.s[0], surface.s[-1]

    n = config.n_paths
    s = np.full(n, market.s0)
    disc = np.ones(n)
    acc = np.zeros(n)
    clipped = np.zeros(n, dtype=bool)
    for i in range(config.n_steps):
        t, t_next = times[i], times[i + 1]
        dt = t_next - t
        out = (s < lo) | (s > hi)
        clipped |= out
        sq = np.clip(s, lo, hi)
        v = surface.value_at(t, sq)
        a = deal.alpha(t)
        f = np.where((1.0 - a) * v > 0.0, leg_f.plus(t), leg_f.minus(t))
        c = np.where(a * v > 0.0, leg_c.plus(t), leg_c.minus(t))
        integrand = (
            deal.dividend(t, s)
            + closeout_theta_tilde(ctx, t, v)
            - ctx.lam(t) * v
            + (f - c) * a * v
        )
        acc += disc * integrand * dt
        disc *= np.exp(-f * dt)

        if leg_h.symmetric:
            h = leg_h.plus(t)
        else:
            h = np.where(surface.z_at(t, sq) > 0.0, leg_h.plus(t), leg_h.minus(t))
        dw = math.sqrt(dt) * standard_normals(config.seed, i, n)
        if vol.is_proportional:
            sig = vol.level(t)
            s = s * np.exp((h - 0.5 * sig * sig) * dt + sig * dw)
        else:
            s = s * np.exp(h * dt) + vol.level(t) * dw

    clipped |= (s < lo) | (s > hi)
    y = acc + disc * np.asarray(deal.payoff(np.maximum(s, 0.0)), dtype=float)
    return RepresentationReport(
        mean=float(y.mean()),
        std_error=float(y.std(ddof=1) / math.sqrt(n)),
        pde_value=float(surface.value_at(0.0, market.s0)),
        n_clipped=int(clipped.sum()),
    )

