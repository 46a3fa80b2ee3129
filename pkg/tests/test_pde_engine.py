import csv
import math
import time
from dataclasses import replace

import numpy as np
import pytest

from nlval.deal_spec import CreditSpec, DealSpec, Payoff, RateLeg
from nlval.errors import ExtrapolationError, NumericalError, PicardConvergenceError
from nlval.market_model import Schedule, TimeGrid, VolModel
from nlval.pde_engine import (
    PdeConfig,
    SpatialGrid,
    ValueSurface,
    bs_closed_form,
    bs_delta,
    extract_delta,
    solve_dependent,
    solve_independent,
)

from conftest import BS_CALL_ATM, BS_DELTA_ATM, linear_call_deal, make_market, straddle_deal

VOL = VolModel.proportional(0.2)


def grids(n_space, n_time, T=1.0):
    return TimeGrid(0.0, T, n_time), SpatialGrid.around(100.0, VOL, T, n_space)


def test_bs_closed_form_examples():
    assert bs_closed_form(100.0, 100.0, 1.0, 0.02, 0.2) == pytest.approx(BS_CALL_ATM, abs=1e-10)
    assert bs_delta(100.0, 100.0, 1.0, 0.02, 0.2) == pytest.approx(BS_DELTA_ATM, abs=1e-12)
    assert bs_closed_form(120.0, 100.0, 0.0, 0.02, 0.2) == 20.0
    assert bs_closed_form(120.0, 100.0, 1e-12, 0.02, 0.2) == pytest.approx(20.0, abs=1e-8)
    assert bs_closed_form(100.0, 100.0, 1.0, 0.02, 0.0) == pytest.approx(100.0 - 100.0 * math.exp(-0.02))
    assert bs_closed_form(90.0, 100.0, 1.0, 0.02, 0.0) == 0.0


def test_spatial_grid_snaps_s0():
    g = SpatialGrid.around(100.0, VOL, 1.0, 400)
    assert np.min(np.abs(g.nodes - 100.0)) < 1e-9
    assert g.s_max == pytest.approx(100.0 * math.exp(1.0), rel=0.01)
    with pytest.raises(ValueError):
        SpatialGrid(10.0, 5.0, 10)


def test_zero_deal_gives_zero_surface():
    deal = straddle_deal(payoff=Payoff("constant", amount=0.0))
    surf = solve_independent(deal, VOL, grids(60, 20))
    assert np.all(surf.u == 0.0)


def test_linear_limit_matches_black_scholes():
    surf = solve_independent(linear_call_deal(), VOL, grids(200, 200))
    assert surf.value_at(0.0, 100.0) == pytest.approx(BS_CALL_ATM, rel=1e-3)


def test_second_order_convergence():
    errors = []
    for n in (100, 200, 400):
        surf = solve_independent(linear_call_deal(), VOL, grids(n, n))
        errors.append(abs(surf.value_at(0.0, 100.0) - BS_CALL_ATM))
    ratios = [errors[0] / errors[1], errors[1] / errors[2]]
    assert all(3.5 < q < 4.5 for q in ratios), ratios


def test_full_collateral_reduces_to_linear_pde():
    # alpha = 1: B' = -c v, so u = exp((h - c) T) * BS(s; rate h)
    deal = DealSpec(
        Payoff("call", 100.0), 1.0, alpha=1.0,
        credit=CreditSpec(Schedule.constant(0.02), Schedule.constant(0.01), 0.6, 0.6),
        leg_c=RateLeg.flat(0.01), leg_f=RateLeg.of(0.05, 0.0), leg_h=RateLeg.flat(0.03),
    )
    surf = solve_independent(deal, VOL, grids(300, 300))
    expected = math.exp(0.02) * bs_closed_form(100.0, 100.0, 1.0, 0.03, 0.2)
    assert surf.value_at(0.0, 100.0) == pytest.approx(expected, rel=5e-4)


def test_terminal_row_is_payoff():
    deal = straddle_deal()
    surf = solve_independent(deal, VOL, grids(80, 40))
    assert np.array_equal(surf.u[-1], deal.payoff(surf.s))


def test_solver_is_deterministic():
    deal = straddle_deal(leg_h=RateLeg.of(0.03, 0.01))
    a = solve_independent(deal, VOL, grids(120, 60))
    b = solve_independent(deal, VOL, grids(120, 60))
    assert np.array_equal(a.u, b.u)


def test_comparison_principle():
    lo = solve_independent(straddle_deal(payoff=Payoff("call", 110.0)), VOL, grids(150, 100))
    hi = solve_independent(straddle_deal(payoff=Payoff("call", 100.0)), VOL, grids(150, 100))
    assert np.all(lo.u[0] <= hi.u[0] + 1e-8)
    put = solve_independent(straddle_deal(payoff=Payoff("put", 100.0)), VOL, grids(150, 100))
    strad = solve_independent(straddle_deal(), VOL, grids(150, 100))
    assert np.all(put.u[0] <= strad.u[0] + 1e-8)


def test_extract_delta_linear_surface():
    times = np.linspace(0.0, 1.0, 5)
    s = np.linspace(0.0, 200.0, 21)
    surf = ValueSurface(times, s, np.tile(s, (5, 1)), VOL)
    assert extract_delta(surf, 0.3, 57.0) == pytest.approx(1.0, abs=1e-12)
    assert surf.z_at(0.3, 50.0) == pytest.approx(0.2 * 50.0)
    with pytest.raises(ExtrapolationError):
        extract_delta(surf, 0.3, 250.0)
    with pytest.raises(ExtrapolationError):
        surf.value_at(1.5, 50.0)


def test_extract_delta_itm_otm_near_maturity():
    surf = solve_independent(linear_call_deal(), VOL, grids(300, 300))
    t = 0.98
    assert extract_delta(surf, t, 160.0) == pytest.approx(bs_delta(160.0, 100.0, 1 - t, 0.02, 0.2), abs=1e-3)
    assert extract_delta(surf, t, 160.0) > 0.999
    assert extract_delta(surf, t, 60.0) < 1e-3
    assert extract_delta(surf, 0.0, 100.0) == pytest.approx(BS_DELTA_ATM, abs=2e-3)


def test_dependent_without_hedge_equals_independent_when_r_is_h():
    deal = straddle_deal()
    g = grids(120, 80)
    ref = solve_independent(deal, VOL, g)
    dep = solve_dependent(deal, make_market(r=0.025), g, hedge_mode="none")
    assert np.max(np.abs(dep.u - ref.u)) < 1e-9


def test_dependent_without_hedge_depends_on_r():
    deal = straddle_deal()
    g = grids(200, 200)
    ref = solve_independent(deal, VOL, g)
    coarse = solve_independent(deal, VOL, grids(100, 100))
    grid_err = abs(ref.value_at(0.0, 100.0) - coarse.value_at(0.0, 100.0))
    dep = solve_dependent(deal, make_market(r=0.06), g, hedge_mode="none")
    assert abs(dep.value_at(0.0, 100.0) - ref.value_at(0.0, 100.0)) > 10 * grid_err


@pytest.mark.parametrize("r", [0.0, 0.02, 0.10])
def test_dependent_with_delta_hedge_is_r_free(r):
    deal = straddle_deal()
    g = grids(150, 100)
    ref = solve_independent(deal, VOL, g)
    dep = solve_dependent(deal, make_market(r=r), g, hedge_mode="delta")
    assert np.max(np.abs(dep.u[0] - ref.u[0])) < 1e-8


def test_invariance_gap_shrinks_with_picard_tolerance():
    deal = straddle_deal()
    g = grids(150, 100)
    gaps = []
    for tol in (1e-6, 1e-12):
        cfg = PdeConfig(picard_tol=tol)
        ref = solve_independent(deal, VOL, g, cfg)
        dep = solve_dependent(deal, make_market(r=0.08), g, cfg)
        gaps.append(np.max(np.abs(dep.u[0] - ref.u[0])))
    assert gaps[1] < gaps[0]


def test_picard_non_convergence_raises():
    with pytest.raises(PicardConvergenceError) as info:
        solve_independent(straddle_deal(), VOL, grids(100, 50), PdeConfig(picard_tol=1e-15, picard_max_iter=1))
    assert info.value.residual > 0 and info.value.step is not None


def test_unstable_explicit_scheme_reports_step():
    cfg = PdeConfig(theta=0.0, rannacher_steps=0)
    with np.errstate(all="ignore"), pytest.raises(NumericalError) as info:
        solve_independent(linear_call_deal(), VOL, grids(400, 200), cfg)
    assert info.value.step is not None


def test_grid_must_match_maturity():
    with pytest.raises(ValueError):
        solve_independent(linear_call_deal(), VOL, (TimeGrid(0.0, 2.0, 10), SpatialGrid(0, 300, 50)))


def test_asymmetric_repo_takes_the_favourable_leg():
    # h+ > h- makes h s du/ds the larger of the two legs at every node, so the
    # value dominates both flat-repo solves; swapping the legs reverses it
    base = straddle_deal()
    g = grids(150, 100)

    def value(leg):
        return solve_independent(replace(base, leg_h=leg), VOL, g).value_at(0.0, 100.0)

    lo, hi = value(RateLeg.flat(0.01)), value(RateLeg.flat(0.03))
    assert value(RateLeg.of(0.03, 0.01)) >= max(lo, hi) - 1e-9
    assert value(RateLeg.of(0.01, 0.03)) <= min(lo, hi) + 1e-9


def test_csv_export(tmp_path):
    surf = solve_independent(linear_call_deal(), VOL, grids(20, 5))
    surf.to_csv(tmp_path / "u.csv", tmp_path / "z.csv")
    rows = list(csv.reader(open(tmp_path / "u.csv")))
    assert rows[0][0] == "t" and len(rows[0]) == 21
    assert len(rows) == 7
    assert float(rows[-1][5]) == float(f"{surf.u[-1, 4]:.12g}")
    zrows = list(csv.reader(open(tmp_path / "z.csv")))
    assert float(zrows[1][10]) == float(f"{surf.z[0, 9]:.12g}")


def test_linear_limit_runtime():
    start = time.perf_counter()
    solve_independent(linear_call_deal(), VOL, grids(400, 400))
    assert time.perf_counter() - start < 5.0
