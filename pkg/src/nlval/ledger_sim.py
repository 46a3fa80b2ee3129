"""Replay of the desk funding protocol over a discrete price path.

Each interval [t, t + dt] runs the trader's sixteen operations literally:
borrow V - C from the treasury, repo-borrow delta units of stock against
cash H, sell them, and at t + dt buy them back, unwind the repo, sell the
derivative and repay the treasury with interest. The net cash of those
operations is compared with what the continuous-time model expects to
accrue over the interval; the difference is the per-step residual.

With u solving the h-drift PDE the model accrual per interval is

    -(pi + theta~ - lambda V) dt + 1/2 gamma (dS^2 - sigma^2 dt),

the second part being the realized gamma P&L of a discrete delta hedge.
Equivalently it is (dphi_formula - dphi_model) dt plus the gamma term, where
dphi_model = r V + B is the funding dividend implied by the model value
under r-drift. Only rehypothecated collateral is supported.
"""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass, fields

import numpy as np

from .deal_spec import DealSpec
from .driver import DriverContext, closeout_theta_tilde, driver_B, funding_account
from .market_model import MarketSpec, sigma_eval
from .pde_engine import ValueSurface

_PATH_TOL = 1e-9


def dphi(H, F, C, h, f, c, r):
    """Funding dividend rate (h - f) H + (r - f) F + (r - c) C."""
    return (h - f) * H + (r - f) * F + (r - c) * C


@dataclass(frozen=True)
class LedgerStep:
    t: float
    s: float
    s_next: float
    V: float
    C: float
    H: float
    F: float
    delta: float
    gamma: float
    h: float
    f: float
    c: float
    repo_net: float
    treasury_net: float
    collateral_net: float
    derivative_net: float
    flow_total: float
    accrual: float
    residual: float

    @classmethod
    def columns(cls) -> tuple[str, ...]:
        return tuple(fl.name for fl in fields(cls))


@dataclass(frozen=True)
class LedgerReport:
    """Replay of one path. Residual statistics are over the steps."""

    steps: tuple[LedgerStep, ...]
    dt: float
    notional: float

    @property
    def residuals(self) -> np.ndarray:
        return np.array([st.residual for st in self.steps])

    @property
    def max_abs_residual(self) -> float:
        return float(np.max(np.abs(self.residuals))) if self.steps else 0.0

    @property
    def mean_abs_residual(self) -> float:
        return float(np.mean(np.abs(self.residuals))) if self.steps else 0.0

    @property
    def total_residual(self) -> float:
        return float(np.sum(self.residuals))

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(LedgerStep.columns())
            for st in self.steps:
                w.writerow([f"{getattr(st, name):.12g}" for name in LedgerStep.columns()])


@dataclass
class _Desk:
    cash: float = 0.0
    treasury_debt: float = 0.0
    stock: float = 0.0
    repo_posted: float = 0.0
    deal_units: float = 0.0


@dataclass(frozen=True)
class _Protocol:
    repo_net: float
    treasury_net: float
    collateral_net: float
    derivative_net: float
    equity: float


def _close(a: float, b: float, scale: float) -> bool:
    return abs(a - b) <= 1e-10 * (1.0 + scale)


def _execute_interval(V, V_next, C, delta, s, s_next, h, f, c, dt) -> _Protocol:
    """Book every operation of one interval and return the net flows."""
    d = _Desk()
    H = delta * s
    scale = abs(V) + abs(V_next) + abs(H) + abs(delta * s_next) + abs(C)
    # time t: borrow V from the treasury
    d.treasury_debt += V
    d.cash += V
    # buy the deal
    d.cash -= V
    d.deal_units += 1.0
    # collateral in, passed on
    d.cash += C
    d.cash -= C
    d.treasury_debt -= C
    # borrow H for the repo
    d.treasury_debt += H
    d.cash += H
    # repo-borrow delta stock
    d.cash -= H
    d.repo_posted += H
    d.stock += delta
    # sell it
    d.stock -= delta
    d.cash += delta * s
    # return H to the treasury
    d.cash -= H
    d.treasury_debt -= H
    if not _close(d.treasury_debt, V - C, scale) or not _close(d.cash, 0.0, scale):
        raise RuntimeError("opening balances do not match V - C")
    # time t + dt: borrow to rebuy the stock
    d.treasury_debt += delta * s_next
    d.cash += delta * s_next
    # buy the stock
    d.cash -= delta * s_next
    d.stock += delta
    # deliver it, closing the repo
    d.stock -= delta
    d.repo_posted -= H
    d.cash += H * (1.0 + h * dt)
    # repo cash back to the treasury
    d.cash -= H
    d.treasury_debt -= H
    repo_net = H * (1.0 + h * dt) - delta * s_next
    # sell the deal
    d.cash += V_next
    d.deal_units -= 1.0
    # fund the collateral repayment, then interest on the funded V - C
    d.treasury_debt += C * (1.0 + c * dt)
    d.treasury_debt += (V - C) * f * dt
    owed = V * (1.0 + f * dt) + C * (c - f) * dt
    if not _close(d.treasury_debt - (delta * s_next - H), owed, scale):
        raise RuntimeError("treasury balance differs from V(1 + f dt) + C(c - f)dt")
    # repay with the sale proceeds
    d.cash -= V_next
    d.treasury_debt -= V_next
    treasury_net = V_next - V * (1.0 + f * dt) - C * (c - f) * dt
    equity = d.cash - d.treasury_debt
    if d.stock != 0.0 or not _close(d.repo_posted, 0.0, scale) or d.deal_units != 0.0:
        raise RuntimeError("positions do not close flat")
    if not _close(equity, repo_net + treasury_net, scale):
        raise RuntimeError("desk equity differs from repo plus treasury net")
    return _Protocol(
        repo_net=repo_net,
        treasury_net=treasury_net,
        collateral_net=-C * c * dt,
        derivative_net=V_next - V,
        equity=equity,
    )


def replay(
    path,
    surface: ValueSurface,
    deal: DealSpec,
    market: MarketSpec,
    dt: float,
    t0: float = 0.0,
    notional: float | None = None,
) -> LedgerReport:
    """Run the funding protocol along ``path`` sampled every ``dt`` from ``t0``.

    V, delta and gamma come from the surface's spline in s, so they are
    mutually consistent. The hedge is H = delta S; the repo rate is picked
    on the sign of H, funding on V - C, collateral on C.
    """
    if not deal.rehypothecation:
        raise ValueError("ledger replay supports rehypothecated collateral only")
    path = np.asarray(path, dtype=float)
    if path.ndim != 1 or path.size < 2:
        raise ValueError("path must be a 1-d series with at least two points")
    if not dt > 0.0:
        raise ValueError("dt must be positive")
    n = path.size - 1
    if t0 + n * dt > deal.maturity * (1.0 + _PATH_TOL) + _PATH_TOL:
        raise ValueError("path extends beyond the deal maturity")
    times = t0 + dt * np.arange(n + 1)
    times[-1] = min(times[-1], deal.maturity)

    V = surface.spline_at(times, path, 0)
    D = surface.spline_at(times, path, 1)
    G = surface.spline_at(times, path, 2)
    ctx = DriverContext(deal, r=market.r)

    steps = []
    for k in range(n):
        t, s, s_next = float(times[k]), float(path[k]), float(path[k + 1])
        v, v_next, delta, gamma = float(V[k]), float(V[k + 1]), float(D[k]), float(G[k])
        a = deal.alpha(t)
        C = a * v
        H = delta * s
        F = funding_account(deal, v, H, C)
        h = deal.leg_h.plus(t) if H > 0.0 else deal.leg_h.minus(t)
        f = deal.leg_f.plus(t) if v - C > 0.0 else deal.leg_f.minus(t)
        c = deal.leg_c.plus(t) if C > 0.0 else deal.leg_c.minus(t)
        r = market.r(t)
        step_dt = float(times[k + 1] - times[k])
        proto = _execute_interval(v, v_next, C, delta, s, s_next, h, f, c, step_dt)

        sig = float(sigma_eval(market.vol, t, max(s, 0.0)))
        z = sig * delta
        # model funding dividend r V + B, with B the r-drift driver at the hedge
        dphi_model = r * v + float(driver_B(ctx, t, s, v, z, H))
        dphi_gap = dphi(H, F, C, h, f, c, r) - dphi_model
        dphi_gap_check = -(
            float(deal.dividend(t, s))
            + float(closeout_theta_tilde(ctx, t, v))
            - ctx.lam(t) * v
        )
        if abs(dphi_gap - dphi_gap_check) > 1e-9 * (1.0 + abs(v) + abs(H)):
            raise RuntimeError("model dividend does not reduce to the closeout flow")
        ds = s_next - s
        accrual = dphi_gap * step_dt + 0.5 * gamma * (ds * ds - sig * sig * step_dt)
        flow_total = proto.repo_net + proto.treasury_net
        steps.append(
            LedgerStep(
                t=t, s=s, s_next=s_next, V=v, C=C, H=H, F=F, delta=delta, gamma=gamma,
                h=h, f=f, c=c,
                repo_net=proto.repo_net,
                treasury_net=proto.treasury_net,
                collateral_net=proto.collateral_net,
                derivative_net=proto.derivative_net,
                flow_total=flow_total,
                accrual=accrual,
                residual=flow_total - accrual,
            )
        )
    return LedgerReport(
        steps=tuple(steps),
        dt=dt,
        notional=market.s0 if notional is None else notional,
    )


def replay_many(paths, surface, deal, market, dt, t0: float = 0.0) -> list[LedgerReport]:
    return [replay(p, surface, deal, market, dt, t0) for p in np.asarray(paths)]


def _metric(reports: list[LedgerReport], metric: str) -> float:
    if metric == "max":
        return max(rep.max_abs_residual for rep in reports)
    if metric == "mean":
        return float(np.mean([rep.mean_abs_residual for rep in reports]))
    if metric == "total":
        return float(np.mean([abs(rep.total_residual) for rep in reports]))
    raise ValueError(f"unknown metric {metric!r}")


def convergence_order(
    levels: dict[float, "LedgerReport | list[LedgerReport]"],
    metric: str = "max",
) -> float:
    """Least-squares slope of log(residual) against log(dt).

    ``levels`` maps dt to one report or a list of reports (one per path).
    ``metric`` picks the residual summary: ``max`` (largest |step residual|),
    ``mean`` (average |step residual|) or ``total`` (average |sum over the
    path|). Returns nan with a warning when a level has zero residual.
    """
    if len(levels) < 3:
        raise ValueError("need at least 3 dt levels")
    dts = sorted(levels)
    vals = []
    for dt in dts:
        reps = levels[dt]
        reps = [reps] if isinstance(reps, LedgerReport) else list(reps)
        vals.append(_metric(reps, metric))
    vals = np.array(vals)
    if np.any(vals <= 0.0):
        warnings.warn("zero residual at some level; order undefined", RuntimeWarning, stacklevel=2)
        return math.nan
    if np.any(np.diff(vals) < 0.0):
        warnings.warn("residuals are not monotone in dt", RuntimeWarning, stacklevel=2)
    slope, _ = np.polyfit(np.log(dts), np.log(vals), 1)
    return float(slope)
