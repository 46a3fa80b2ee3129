import numpy as np
import pytest
from hypothesis import given, strategies as st

from nlval.deal_spec import (
    CreditSpec,
    DealSpec,
    Dividend,
    Payoff,
    RateLeg,
    alpha_eval,
    dividend_eval,
    payoff_eval,
    validate,
)
from nlval.errors import DomainError
from nlval.market_model import MarketSpec, Schedule, VolModel

from conftest import make_market


def test_payoff_examples():
    deal = DealSpec(Payoff("call", 100.0), 1.0)
    assert payoff_eval(deal, 100.0) == 0.0
    assert payoff_eval(deal, 130.0) == 30.0
    assert Payoff("straddle", 100.0)(80.0) == 20.0
    assert Payoff("put", 100.0)(80.0) == 20.0
    assert Payoff("forward", 100.0)(80.0) == -20.0
    assert Payoff("constant", amount=3.5)(12.0) == 3.5


def test_payoff_vectorised_and_table():
    tab = Payoff("table", points=((0.0, 0.0), (100.0, 0.0), (200.0, 50.0)))
    assert np.allclose(tab(np.array([50.0, 150.0, 300.0])), [0.0, 25.0, 50.0])
    assert tab.lipschitz() == 0.5
    with pytest.raises(ValueError):
        Payoff("table", points=((0.0, 0.0), (0.0, 1.0)))
    with pytest.raises(ValueError):
        Payoff("digital", 100.0)


def test_payoff_negative_price():
    with pytest.raises(DomainError):
        payoff_eval(DealSpec(Payoff("call", 100.0), 1.0), -1.0)


def test_alpha_and_dividend_eval():
    deal = DealSpec(Payoff("call", 100.0), 1.0, alpha=0.8, dividend=Dividend("proportional", 0.01))
    assert alpha_eval(deal, 0.5) == 0.8
    assert dividend_eval(deal, 0.5, 200.0) == pytest.approx(2.0)
    with pytest.raises(DomainError):
        alpha_eval(deal, 1.5)
    with pytest.raises(DomainError):
        dividend_eval(deal, -0.1, 100.0)


def test_validate_rate_bound():
    market = MarketSpec(100.0, Schedule.constant(-0.01), VolModel.proportional(0.2))
    deal = DealSpec(
        Payoff("call", 100.0), 1.0,
        leg_f=RateLeg.of(0.05, 0.01), leg_c=RateLeg.of(0.0, -0.01), leg_h=RateLeg.flat(0.02),
        credit=CreditSpec(Schedule.constant(0.03), Schedule.constant(0.01), 0.6, 0.6),
    )
    assert validate(deal, market).rate_bound == 0.05


def test_validate_asymmetric_h_flags_viscosity_regime():
    deal = DealSpec(Payoff("call", 100.0), 1.0, leg_h=RateLeg.of(0.02, 0.01))
    rep = validate(deal, make_market())
    assert not rep.classical_regime
    assert any("viscosity" in w for w in rep.warnings)
    assert rep.ok


def test_validate_call_lipschitz():
    rep = validate(DealSpec(Payoff("call", 100.0), 1.0), make_market())
    assert rep.payoff_lipschitz == pytest.approx(1.0, abs=1e-12)
    assert rep.classical_regime


def test_validate_collects_failures():
    deal = DealSpec(
        Payoff("call", 100.0), 1.0, alpha=1.2,
        credit=CreditSpec(Schedule.constant(-0.01), Schedule.constant(0.0), 1.5, 0.5),
    )
    rep = validate(deal, make_market())
    assert len(rep.failures) == 3
    assert not rep.ok


def test_validate_is_idempotent():
    deal = DealSpec(Payoff("straddle", 100.0), 1.0, alpha=0.5, leg_h=RateLeg.of(0.03, 0.01))
    market = make_market()
    assert validate(deal, market) == validate(deal, market)


@given(st.sampled_from(["call", "put", "forward", "straddle"]), st.floats(1.0, 300.0))
def test_sampled_lipschitz_bounded_by_analytic(kind, strike):
    deal = DealSpec(Payoff(kind, strike), 1.0)
    rep = validate(deal, make_market())
    assert rep.payoff_lipschitz <= deal.payoff.lipschitz() + 1e-9


def test_with_plus_legs():
    deal = DealSpec(Payoff("call", 100.0), 1.0, leg_f=RateLeg.of(0.04, 0.01))
    plus = deal.with_plus_legs()
    assert plus.leg_f.symmetric and plus.leg_f.plus(0.0) == 0.04
    assert deal.leg_f.minus(0.0) == 0.01


def test_deal_validation():
    with pytest.raises(ValueError):
        DealSpec(Payoff("call", 100.0), 0.0)
    with pytest.raises(ValueError):
        Dividend("lumpy")
