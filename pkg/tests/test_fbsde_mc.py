import csv
import io
import math
import warnings

import numpy as np
import pytest

from nlval.deal_spec import DealSpec, Payoff, RateLeg
from nlval.errors import NumericalError
from nlval.fbsde_mc import McConfig, McEstimate, representation_check, solve_backward
from nlval.market_model import TimeGrid, VolModel
from nlval.pde_engine import SpatialGrid, solve_independent

from conftest import BS_CALL_ATM, linear_call_deal, make_market, straddle_deal

VOL = VolModel.proportional(0.2)


def pde_value(deal, n=300):
    g = (TimeGrid(0.0, deal.maturity, n), SpatialGrid.around(100.0, VOL, deal.maturity, n))
    return solve_independent(deal, VOL, g)


def test_zero_deal():
    deal = straddle_deal(payoff=Payoff("constant", amount=0.0))
    est = solve_backward(deal, make_market(), "h", McConfig(n_paths=1000, n_steps=10))
    assert est.value == 0.0 and est.std_error == 0.0


def test_linear_limit_black_scholes():
    est = solve_backward(linear_call_deal(), make_market(), "h", McConfig(seed=1))
    assert abs(est.value - BS_CALL_ATM) < 3 * est.std_error
    assert est.std_error < 0.05


def test_deterministic_given_seed():
    cfg = McConfig(n_paths=3000, n_steps=20, seed=8)
    a = solve_backward(straddle_deal(), make_market(), "r", cfg)
    b = solve_backward(straddle_deal(), make_market(), "r", cfg)
    assert a == b


def test_std_error_scaling():
    ratios = []
    for seed in range(5):
        small = solve_backward(linear_call_deal(), make_market(), "h", McConfig(5000, 20, seed))
        big = solve_backward(linear_call_deal(), make_market(), "h", McConfig(20000, 20, seed))
        ratios.append(small.std_error / big.std_error)
    assert all(abs(q - 2.0) < 0.4 for q in ratios), ratios


def test_r_and_h_drift_agree():
    deal = straddle_deal()
    cfg = McConfig(n_paths=20000, n_steps=50, seed=4)
    a = solve_backward(deal, make_market(r=0.07), "r", cfg)
    b = solve_backward(deal, make_market(r=0.07), "h", cfg)
    assert abs(a.value - b.value) < 3 * math.hypot(a.std_error, b.std_error)


def test_basis_degree_adequacy():
    ests = [
        solve_backward(linear_call_deal(), make_market(), "h", McConfig(20000, 50, 2, basis_degree=d))
        for d in (3, 5)
    ]
    assert abs(ests[0].value - ests[1].value) < ests[1].std_error


def test_sign_changing_payoff_matches_pde():
    # a forward changes sign, so the f and c legs switch along the paths
    deal = straddle_deal(payoff=Payoff("forward", 100.0))
    surf = pde_value(deal)
    est = solve_backward(deal, make_market(), "h", McConfig(40000, 50, 3))
    assert abs(est.value - surf.value_at(0.0, 100.0)) < 3 * est.std_error


def test_asymmetric_repo_matches_pde():
    deal = straddle_deal(leg_h=RateLeg.of(0.03, 0.01))
    surf = pde_value(deal)
    est = solve_backward(deal, make_market(), "h", McConfig(40000, 50, 6))
    assert abs(est.value - surf.value_at(0.0, 100.0)) < 3 * est.std_error


def test_condition_number_warning():
    cfg = McConfig(n_paths=2000, n_steps=5, cond_threshold=1.0)
    with pytest.warns(RuntimeWarning, match="condition number"):
        est = solve_backward(linear_call_deal(), make_market(), "h", cfg)
    assert len(est.warnings) == 4
    assert len(est.condition_numbers) == 4


def test_non_finite_raises():
    deal = DealSpec(Payoff("constant", amount=math.inf), 1.0)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        with pytest.raises(NumericalError):
            solve_backward(deal, make_market(), "h", McConfig(n_paths=100, n_steps=5))


def test_config_validation():
    with pytest.raises(ValueError):
        McConfig(n_paths=3, basis_degree=4)
    with pytest.raises(ValueError):
        McConfig(basis_degree=0)
    with pytest.raises(ValueError):
        solve_backward(linear_call_deal(), make_market(), "q", McConfig(100, 5))


def test_csv_row():
    est = McEstimate(1.0 / 3.0, 0.01, 100, 10, 7, label="fbsde-h")
    buf = io.StringIO()
    csv.writer(buf).writerows([McEstimate.CSV_HEADER, est.csv_row()])
    rows = list(csv.reader(io.StringIO(buf.getvalue())))
    assert rows[0] == ["label", "value", "std_error", "n_paths", "n_steps", "seed"]
    assert rows[1] == ["fbsde-h", "0.333333333333", "0.01", "100", "10", "7"]


def test_representation_zero_deal():
    deal = straddle_deal(payoff=Payoff("constant", amount=0.0))
    surf = pde_value(deal, 60)
    rep = representation_check(surf, deal, make_market(), McConfig(1000, 10))
    assert rep.residual == 0.0 and rep.z_score == 0.0


def test_representation_sign_changing_payoff():
    deal = straddle_deal(payoff=Payoff("forward", 100.0))
    surf = pde_value(deal)
    rep = representation_check(surf, deal, make_market(), McConfig(40000, 100, 1))
    assert rep.z_score < 3.0


def test_representation_rejects_mismatched_surface():
    surf = pde_value(linear_call_deal(), 60)
    with pytest.raises(ValueError):
        representation_check(surf, straddle_deal(), make_market(), McConfig(100, 5))
    short = DealSpec(Payoff("call", 100.0), 0.5)
    with pytest.raises(ValueError):
        representation_check(surf, short, make_market(), McConfig(100, 5))
