import pytest

from nlval.deal_spec import CreditSpec, DealSpec, Payoff, RateLeg
from nlval.market_model import MarketSpec, Schedule, VolModel

# Black-Scholes call, s = K = 100, T = 1, r = 0.02, vol 0.2, from math.erf by hand
BS_CALL_ATM = 8.916037278572539
BS_DELTA_ATM = 0.579259709439103


def flat(x):
    return Schedule.constant(x)


def make_market(r=0.02, vol=0.2, s0=100.0):
    return MarketSpec(s0, flat(r), VolModel.proportional(vol))


def linear_call_deal():
    return DealSpec(
        Payoff("call", 100.0),
        1.0,
        leg_c=RateLeg.flat(0.02),
        leg_f=RateLeg.flat(0.02),
        leg_h=RateLeg.flat(0.02),
    )


def straddle_deal(payoff=None, **overrides):
    kw = dict(
        alpha=0.5,
        credit=CreditSpec(flat(0.01), flat(0.01), 0.6, 0.6),
        leg_c=RateLeg.of(0.02, 0.005),
        leg_f=RateLeg.of(0.04, 0.01),
        leg_h=RateLeg.flat(0.025),
    )
    kw.update(overrides)
    return DealSpec(payoff or Payoff("straddle", 100.0), 1.0, **kw)


@pytest.fixture
def market():
    return make_market()


@pytest.fixture
def linear_deal():
    return linear_call_deal()


@pytest.fixture
def nonlinear_deal():
    return straddle_deal()
