"""Nonlinear driver mathematics.

Everything here is vectorised over the state arguments (``s``, ``v``, ``z``,
hedge) for a scalar time ``t``. Sign conventions for two-sided rates: the plus
leg applies when the switching quantity is strictly positive, the minus leg
otherwise (zero included).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .deal_spec import DealSpec, RateLeg, alpha_eval
from .errors import DomainError
from .market_model import Schedule, VolModel, ZERO, sigma_eval


def _out(x):
    x = np.asarray(x)
    return float(x) if x.ndim == 0 else x


@dataclass(frozen=True)
class DriverContext:
    deal: DealSpec
    r: Schedule = ZERO
    lam: Schedule = field(init=False)

    def __post_init__(self):
        lam = self.deal.credit.lam
        if lam.min() < 0.0:
            raise ValueError("total default intensity must be non-negative")
        object.__setattr__(self, "lam", lam)


def select_rate(leg: RateLeg, t: float, indicator):
    return _out(np.where(np.asarray(indicator) > 0.0, leg.plus(t), leg.minus(t)))


def collateral(deal: DealSpec, t: float, v):
    return _out(alpha_eval(deal, t) * np.asarray(v, dtype=float))


def closeout_theta_tilde(ctx: DriverContext, t: float, v):
    """Default-free flow of the replacement closeout, lambda-weighted."""
    credit = ctx.deal.credit
    v = np.asarray(v, dtype=float)
    exposure = (1.0 - alpha_eval(ctx.deal, t)) * v  # closeout minus collateral
    return _out(
        ctx.lam(t) * v
        - credit.lgd_C * credit.lambda_C(t) * np.maximum(exposure, 0.0)
        + credit.lgd_I * credit.lambda_I(t) * np.minimum(exposure, 0.0)
    )


def effective_rates(ctx: DriverContext, t: float, v, z):
    """(c, f, h) selected by the signs of C, V - C and the hedge (via z)."""
    deal = ctx.deal
    a = alpha_eval(deal, t)
    v = np.asarray(v, dtype=float)
    c = select_rate(deal.leg_c, t, a * v)
    f = select_rate(deal.leg_f, t, (1.0 - a) * v)
    h = select_rate(deal.leg_h, t, z)
    return c, f, h


def _funding_collateral_terms(ctx: DriverContext, t: float, v):
    deal = ctx.deal
    a = alpha_eval(deal, t)
    v = np.asarray(v, dtype=float)
    c = np.where(a * v > 0.0, deal.leg_c.plus(t), deal.leg_c.minus(t))
    f = np.where((1.0 - a) * v > 0.0, deal.leg_f.plus(t), deal.leg_f.minus(t))
    return a, c, f


def _core_driver(ctx: DriverContext, t: float, s, v):
    # dividends + closeout flow + funding and collateral carry, rehypothecated
    a, c, f = _funding_collateral_terms(ctx, t, v)
    v = np.asarray(v, dtype=float)
    core = (
        ctx.deal.dividend(t, s)
        + closeout_theta_tilde(ctx, t, v)
        - ctx.lam(t) * v
        + f * v * (a - 1.0)
        - c * a * v
    )
    return core, a, f


def driver_B(ctx: DriverContext, t: float, s, v, z, hedge):
    """Driver of the r-drift backward equation.

    ``z`` only enters through ``hedge``; the repo rate is switched on the sign
    of the hedge itself, which equals the sign of z under delta hedging.
    Without rehypothecation the collateral carry is paid against r instead of
    the funding rate.
    """
    deal = ctx.deal
    core, a, f = _core_driver(ctx, t, s, v)
    hedge = np.asarray(hedge, dtype=float)
    h = np.where(hedge > 0.0, deal.leg_h.plus(t), deal.leg_h.minus(t))
    r = ctx.r(t)
    if not deal.rehypothecation:
        core = core + (r - f) * a * np.asarray(v, dtype=float)
    return _out(core - (r - h) * hedge)


def driver_Bprime(ctx: DriverContext, t: float, s, v):
    """Driver of the h-drift backward equation; free of r and z."""
    if not ctx.deal.rehypothecation:
        raise ValueError("the r-free driver requires rehypothecated collateral")
    return _out(_core_driver(ctx, t, s, v)[0])


def delta_hedge(s, z, sigma):
    """Hedge position s z / sigma implied by delta hedging."""
    sigma = np.asarray(sigma, dtype=float)
    if np.any(sigma <= 0.0):
        raise DomainError("delta hedge needs sigma > 0")
    return _out(np.asarray(s, dtype=float) * np.asarray(z, dtype=float) / sigma)


def _safe_delta_hedge(s, z, sigma):
    # sigma vanishes only where s does under proportional vol; the hedge is 0 there
    s = np.asarray(s, dtype=float)
    z = np.asarray(z, dtype=float)
    sigma = np.broadcast_to(np.asarray(sigma, dtype=float), np.broadcast(s, z).shape)
    out = np.zeros(sigma.shape)
    np.divide(s * z, sigma, out=out, where=sigma > 0.0)
    return out


@dataclass(frozen=True)
class HedgeRule:
    """Hedge position H(t, s, v, z).

    ``mode`` is ``delta`` (H = s z / sigma), ``none`` (H = 0) or ``custom``
    with a user function ``fn(t, s, v, z)`` and its Lipschitz constant in z.
    """

    mode: str = "delta"
    fn: Callable | None = None
    z_lipschitz: float = 0.0

    def __post_init__(self):
        if self.mode not in ("delta", "none", "custom"):
            raise ValueError(f"unknown hedge mode {self.mode!r}")
        if self.mode == "custom" and self.fn is None:
            raise ValueError("custom hedge needs fn")

    def __call__(self, t: float, s, v, z, vol: VolModel):
        if self.mode == "none":
            return np.zeros(np.broadcast(np.asarray(s), np.asarray(z)).shape)
        if self.mode == "delta":
            return _safe_delta_hedge(s, z, sigma_eval(vol, t, np.maximum(s, 0.0)))
        return np.asarray(self.fn(t, s, v, z), dtype=float)


def delta_hedge_z_lipschitz(vol: VolModel, s_max: float | None = None) -> float:
    """sup over s of s / sigma(t, s): the Lipschitz constant of s z / sigma in z."""
    if vol.min_level() <= 0.0:
        raise ValueError("delta hedge is unbounded in z when volatility can vanish")
    if vol.is_proportional:
        return 1.0 / vol.min_level()
    if s_max is None:
        raise ValueError("absolute volatility needs a bounded price domain (s_max)")
    return s_max / vol.min_level()


def funding_account(deal: DealSpec, v, hedge, collateral):
    """Treasury account F from the replication identity V = F + H (+ C)."""
    if deal.rehypothecation:
        return _out(np.asarray(v) - np.asarray(hedge) - np.asarray(collateral))
    return _out(np.asarray(v) - np.asarray(hedge))


def lipschitz_bound(ctx: DriverContext, hedge_z_lipschitz: float = 0.0) -> float:
    """Conservative constant K with |B(v, z) - B(v', z')| <= K (|v - v'| + |z - z'|).

    K = sup|lambda| + sup|f| (1 + sup alpha) + sup|c| sup alpha
        + sup(lambda_C lgd_C + lambda_I lgd_I) (1 + sup alpha)
        + sup|r - h| * hedge_z_lipschitz
    plus sup|r| sup alpha when collateral is not rehypothecated.
    """
    deal = ctx.deal
    credit = deal.credit
    if deal.alpha.min() < 0.0 or deal.alpha.max() > 1.0:
        raise ValueError("alpha outside [0, 1]")
    if not np.isfinite(hedge_z_lipschitz) or hedge_z_lipschitz < 0.0:
        raise ValueError("hedge Lipschitz constant must be finite and non-negative")
    a_sup = deal.alpha.max()
    loss = (credit.lambda_C.map(lambda x: x * credit.lgd_C)
            + credit.lambda_I.map(lambda x: x * credit.lgd_I)).sup_abs()
    r_minus_h = max((ctx.r - deal.leg_h.plus).sup_abs(), (ctx.r - deal.leg_h.minus).sup_abs())
    k = (
        ctx.lam.sup_abs()
        + deal.leg_f.sup_abs() * (1.0 + a_sup)
        + deal.leg_c.sup_abs() * a_sup
        + loss * (1.0 + a_sup)
        + r_minus_h * hedge_z_lipschitz
    )
    if not deal.rehypothecation:
        k += ctx.r.sup_abs() * a_sup
    return k
