import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from sjrp.bench import (_scan_convex, can_order_levels, can_order_search, independent_ss_search,
                        make_independent_ss, qs_analytic_cost, qs_optimal_basestock, qs_search,
                        qs_window, rs_analytic_cost, rs_basestock_objective, rs_optimal_basestock,
                        rs_search)
from sjrp.core import (ConfigurationError, CostParams, DemandModel, expected_period_cost,
                       weekly_discount)
from sjrp.sim import QsPolicy, RsPolicy, SimConfig

MODEL = DemandModel("nb", [40, 20], 0.5)
PARAMS = CostParams(50, [0.1, 0.4], [2, 2], [50, 50])


def rs_series_cost(R, S, model, params, n_periods=60000):
    """Period-by-period sum of expected discounted costs, truncated far out."""
    g = weekly_discount(params, model.periods_per_year)
    S = np.asarray(S)
    first = params.c0 * (S > 0).any() + float(S @ params.c)
    p_none = np.prod([model.distribution(i, R).pmf(0) for i in range(model.d)])
    stage = [sum(float(expected_period_cost(model, params, i, [S[i]], k)[0])
                 for i in range(model.d)) for k in range(1, R + 1)]
    n = np.arange(n_periods)
    state = np.sum(g**n * np.asarray(stage)[n % R])
    reviews = n[n % R == R - 1] + 1
    orders = np.sum(g**reviews) * (params.c0 * (1 - p_none)
                                   + float(model.weekly_mean @ params.c) * R)
    return first + state + orders


@pytest.mark.parametrize("R,S", [(1, [5, 3]), (4, [47, 23]), (9, [60, 31])])
def test_rs_analytic_matches_term_by_term_sum(R, S):
    want = rs_series_cost(R, S, MODEL, PARAMS)
    assert rs_analytic_cost(RsPolicy(R, S), MODEL, PARAMS) == pytest.approx(want, rel=2e-6)


@given(st.integers(1, 12), st.sampled_from([0, 1]))
def test_rs_basestock_is_the_brute_force_argmin(R, item):
    ys = np.arange(0, 200)
    vals = rs_basestock_objective(R, item, MODEL, PARAMS, ys)
    assert rs_optimal_basestock(R, item, MODEL, PARAMS) == int(ys[np.argmin(vals)])


def test_scan_convex_on_a_parabola():
    assert _scan_convex(lambda ys: (ys - 137.0) ** 2) == 137
    assert _scan_convex(lambda ys: (ys + 5.0) ** 2) == 0


def test_qs_with_zero_quantity_is_rs_with_unit_period():
    S = [3, 2]
    det = qs_analytic_cost(QsPolicy(0, S), MODEL, PARAMS, n_samples=20000, rng=1,
                           return_detail=True)
    want = rs_analytic_cost(RsPolicy(1, S), MODEL, PARAMS)
    assert abs(det.value - want) <= 4 * det.std_error + 1e-9 * want


def test_qs_conventions_differ_only_in_fixed_cost_accounting():
    pol = QsPolicy(40, [57, 28])
    a = qs_analytic_cost(pol, MODEL, PARAMS, n_samples=5000, rng=3, return_detail=True)
    b = qs_analytic_cost(pol, MODEL, PARAMS, n_samples=5000, rng=3, convention="renewal",
                         return_detail=True)
    assert b.value - a.value == pytest.approx(b.fixed - a.fixed, abs=1e-6)
    with pytest.raises(ValueError):
        qs_analytic_cost(pol, MODEL, PARAMS, convention="other")


def test_qs_basestock_needs_enough_samples():
    with pytest.raises(ConfigurationError):
        qs_optimal_basestock(40, 0, MODEL, PARAMS, n_samples=10)
    S = qs_optimal_basestock(40, 0, MODEL, PARAMS, n_samples=2000, rng=0)
    assert S > 0


def test_qs_window_brackets_the_review_period():
    lo, hi = qs_window(37, MODEL)
    m = 60 / 52
    assert lo == int(32 * m) and hi == int(42 * m)


def test_can_order_limits():
    base = make_independent_ss(0.5, MODEL, PARAMS)
    same = can_order_levels(base, 1.0)
    np.testing.assert_array_equal(same.o, base.s)
    full = can_order_levels(base, 0.0)
    np.testing.assert_array_equal(full.o, base.S)
    assert (base.s < base.S).all()


def test_independent_alpha_range():
    with pytest.raises(ConfigurationError):
        make_independent_ss(1.5, MODEL, PARAMS)


def test_larger_fixed_cost_widens_the_band():
    lo = make_independent_ss(0.1, MODEL, PARAMS)
    hi = make_independent_ss(1.0, MODEL, PARAMS)
    assert ((hi.S - hi.s) >= (lo.S - lo.s)).all()


def test_searches_return_their_best_candidate(tmp_path):
    cfg = SimConfig(horizon_periods=300, n_paths=20, seed=0)
    rs = rs_search(MODEL, PARAMS, cfg, R_max=12)
    assert rs.estimate.mean == min(e.mean for _, e in rs.candidates)
    policy, est = rs
    assert policy is rs.policy and est is rs.estimate
    qs = qs_search(MODEL, PARAMS, rs.policy.R, cfg, n_samples=300)
    assert qs.estimate.mean == min(e.mean for _, e in qs.candidates)
    ind = independent_ss_search(MODEL, PARAMS, cfg, alphas=(0.5, 1.0))
    can = can_order_search(MODEL, PARAMS, cfg, alphas=(0.0, 1.0), kappas=(0.0, 1.0))
    assert len(can.candidates) == 4
    # kappa = 1 reproduces the independent policy with the same alpha
    by_key = {(k["alpha"], k["kappa"]): e.mean for k, e in can.candidates}
    ind_by_alpha = {k["alpha"]: e.mean for k, e in ind.candidates}
    assert by_key[(1.0, 1.0)] == pytest.approx(ind_by_alpha[1.0], rel=1e-12)
    path = tmp_path / "s.csv"
    rs.write_csv(path)
    lines = path.read_text().splitlines()
    assert lines[0] == "# sjrp-search v1" and lines[1] == "R,S,mean,std_error"
    assert len(lines) == 2 + 12
