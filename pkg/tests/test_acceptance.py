"""Acceptance gate: one test per headline criterion.

Tests marked ``slow`` need hours to days of CPU and only run with
``SJRP_RUN_SLOW=1``. The rest are part of the default ``pytest`` run.
"""
import csv
import math
from pathlib import Path

import numpy as np
import pytest

from oracles import brute_force_values
from sjrp import cli
from sjrp.bench import (can_order_levels, make_independent_ss, qs_analytic_cost,
                        qs_optimal_basestock, rs_analytic_cost, rs_optimal_basestock)
from sjrp.bsde import ReferencePolicy, euler_maruyama, init_networks, slack
from sjrp.config import load_config
from sjrp.core import CostParams, DemandModel, DiffusionParams
from sjrp.mdp import TruncatedMdpSpec, bellman_residual, policy_iteration
from sjrp.nn import he_init
from sjrp.policy import NeuralPolicy, no_action_value
from sjrp.sim import (CanOrderPolicy, QsPolicy, RsPolicy, SimConfig, simulate_many,
                      simulate_paths)

CONFIGS = Path(__file__).resolve().parent.parent / "configs"

# published Base Case costs
BASE_MDP = 2936.24
BASE_BENCH = {"rs": 4337.42, "qs": 4356.86, "can_order": 2965.83, "independent_ss": 3380.97}


def read_rows(path):
    with open(path) as fh:
        fh.readline()
        return list(csv.DictReader(fh))


def write_variant(src, dst, **sections):
    cfg = load_config(src)
    for name, updates in sections.items():
        cfg.data.setdefault(name, {}).update(updates)
    cfg.save(dst)
    return dst


# --------------------------------------------------------------------------- 1


def test_c1_mdp_base_case_value_and_residual():
    cfg = load_config(CONFIGS / "2d_base.yaml")
    m = cfg.section("mdp")
    spec = TruncatedMdpSpec(m["state_lo"], m["state_hi"], m["action_hi"], cfg.demand_model(),
                            cfg.cost_params(), m["tail"])
    sol = policy_iteration(spec)
    v0 = sol.value_at([0, 0])
    assert abs(v0 - BASE_MDP) / BASE_MDP <= 0.01, v0
    assert bellman_residual(sol, spec) <= 1e-8 * (1 + np.abs(sol.value).max())


# --------------------------------------------------------------------------- 2


@pytest.mark.slow
def test_c2_neural_policy_close_to_mdp_on_base_case(tmp_path):
    cfg = write_variant(CONFIGS / "2d_base.yaml", tmp_path / "base.yaml",
                        evaluation={"n_paths": 1000, "horizon_periods": 5000})
    out = tmp_path / "run"
    for sub in ("mdp", "train", "extract"):
        assert cli.run(sub, cfg, out) == cli.EXIT_OK, sub
    assert cli.run("eval", cfg, out / "eval", policy=[out / "policy_neural.yaml"]) == cli.EXIT_OK
    mdp_value = float(read_rows(out / "mdp_summary.csv")[0]["value_at_zero"])
    nn_value = float(read_rows(out / "eval" / "estimates.csv")[0]["mean"])
    assert abs(nn_value - mdp_value) / mdp_value <= 0.015, (nn_value, mdp_value)


# --------------------------------------------------------------------------- 3


def test_c3_benchmark_searches_reproduce_base_case(tmp_path):
    cfg = load_config(CONFIGS / "2d_base.yaml")
    b = cfg.section("benchmarks")
    assert (b["n_paths"], b["horizon_periods"]) == (10000, 5000)
    out = tmp_path / "bench"
    assert cli.run("bench", CONFIGS / "2d_base.yaml", out) == cli.EXIT_OK
    got = {r["policy"]: float(r["mean"]) for r in read_rows(out / "estimates.csv")}
    misses = {fam: (got[fam], ref) for fam, ref in BASE_BENCH.items()
              if abs(got[fam] - ref) / ref > 0.02}
    assert not misses, misses


# --------------------------------------------------------------------------- 4


@pytest.mark.slow
def test_c4_one_dimensional_networks_match_the_qvi(tmp_path):
    out = tmp_path / "v"
    assert cli.run("validate1d", CONFIGS / "1d_validation.yaml", out) == cli.EXIT_OK
    rep = {r["metric"]: float(r["value"]) for r in read_rows(out / "validate1d.csv")}
    assert rep["value_error"] <= 0.02
    assert rep["gradient_error"] <= 0.05
    assert rep["violation"] < 0.01


# --------------------------------------------------------------------------- 5


def random_instances(n, seed=20261017):
    rng = np.random.default_rng(seed)
    for _ in range(n):
        model = DemandModel("poisson", rng.uniform(10.0, 60.0, 2).round(1), None)
        params = CostParams(round(rng.uniform(10.0, 100.0), 1), rng.uniform(0.1, 1.0, 2).round(2),
                            [round(rng.uniform(1.0, 4.0), 2)] * 2, [round(rng.uniform(10.0, 100.0), 1)] * 2)
        R = int(rng.integers(1, 13))
        Q = int(rng.integers(0, int(R * model.weekly_mean.sum()) + 2))
        yield model, params, R, Q


def test_c5_analytic_benchmark_costs_agree_with_simulation():
    cases = list(random_instances(5))
    assert len(cases) >= 5
    failures = []
    for k, (model, params, R, Q) in enumerate(cases):
        rs = RsPolicy(R, [rs_optimal_basestock(R, i, model, params) for i in range(2)])
        qs = QsPolicy(Q, [qs_optimal_basestock(Q, i, model, params, rng=k) for i in range(2)])
        est_rs, est_qs = simulate_many([rs, qs], model, params, SimConfig(20000, 1000, seed=k))
        a_rs = rs_analytic_cost(rs, model, params)
        a_qs = qs_analytic_cost(qs, model, params, n_samples=100000, rng=100 + k,
                                return_detail=True)
        if abs(a_rs - est_rs.mean) > 3 * est_rs.std_error:
            failures.append(("rs", k, a_rs, est_rs.mean, est_rs.std_error))
        se = math.hypot(a_qs.std_error, est_qs.std_error)
        if abs(a_qs.value - est_qs.mean) > 3 * se:
            failures.append(("qs", k, a_qs.value, est_qs.mean, se))
    assert not failures, failures


# --------------------------------------------------------------------------- 6


def _fd_worst(f, x, analytic, h=1e-6):
    worst = 0.0
    for idx in np.ndindex(x.shape):
        old = x[idx]
        x[idx] = old + h
        up = f()
        x[idx] = old - h
        dn = f()
        x[idx] = old
        fd = (up - dn) / (2 * h)
        worst = max(worst, float(np.max(np.abs(fd - analytic[idx]) / np.maximum(1.0, np.abs(fd)))))
    return worst


def check_finite_differences():
    net = he_init([3, 6, 6, 2], 11)
    rng = np.random.default_rng(4)
    X = rng.normal(size=(5, 3))
    dY = rng.normal(size=(5, 2))
    grads = net.backward(net.forward(X, keep=True)[1], dY)
    for P, G in zip(net.params, grads):
        assert _fd_worst(lambda: float(np.sum(net.forward(X) * dY)), P, G) < 1e-5
    x = rng.normal(size=3)
    J = net.input_jacobian(x)
    for j in range(3):
        e = np.zeros(3)
        e[j] = 1e-6
        fd = (net(x + e) - net(x - e)) / 2e-6
        assert np.max(np.abs(fd - J[:, j]) / np.maximum(1.0, np.abs(fd))) < 1e-5


def check_path_reconstruction():
    diff = DiffusionParams([40.0, 20.0], [20.0, 10.0])
    b = euler_maruyama(ReferencePolicy(4.0, [30.0, 15.0], 0.3, 0.2), diff, 0.5, 0.01,
                       np.zeros(2), 8, K=32)
    X = np.empty_like(b.states)
    X[:, 0] = b.x0
    for n in range(b.N):
        X[:, n + 1] = X[:, n] - diff.mu * b.dt - b.dB[:, n] @ diff.sigma.T + b.dU[:, n]
    np.testing.assert_array_equal(X, b.states)


def check_homogeneity():
    model = DemandModel("negbinomial", [40, 20], 0.5)
    params = CostParams(50, [0.1, 0.4], [2, 2], [50, 50])
    pol = CanOrderPolicy([5, 2], [20, 10], [45, 22])
    cfg = SimConfig(200, 8, seed=3)
    for kappa in (0.01, 0.1, 7.0):
        a = simulate_paths([pol], model, params, cfg)[0]
        b = simulate_paths([pol], model, params.scaled(kappa), cfg)[0]
        np.testing.assert_allclose(b[:, :4], kappa * a[:, :4], rtol=1e-12)
    diff = DiffusionParams([40.0, 20.0], [20.0, 10.0])
    bundle = euler_maruyama(ReferencePolicy(1.0, [35.0, 20.0], 0.2), diff, 0.1, 0.01,
                            np.zeros(2), 5, K=16)
    H, G = init_networks(2, [8, 8], 2)
    for kappa in (0.01, 0.1, 7.0):
        Hk, Gk = H.copy(), G.copy()
        for net in (Hk, Gk):
            net.weights[-1] *= kappa
            net.biases[-1] *= kappa
        np.testing.assert_allclose(slack(Hk, Gk, bundle, params.scaled(kappa), diff),
                                   kappa * slack(H, G, bundle, params, diff),
                                   rtol=1e-10, atol=1e-9 * kappa)


def check_double_enumeration():
    model = DemandModel("poisson", [52.0, 52.0], None)
    params = CostParams(30.0, [2.6, 5.2], [52.0, 26.0], [520.0, 260.0], r=5.2)
    spec = TruncatedMdpSpec([-4, -4], [6, 6], [6, 6], model, params)
    sol = policy_iteration(spec)
    oracle = brute_force_values(-4, 6, 6, model, params, allow_negative_targets=True)
    for x, v in oracle.items():
        assert sol.value_at(x) == pytest.approx(v, rel=1e-8, abs=1e-8), x


def check_qs_zero_is_rs_one():
    model = DemandModel("negbinomial", [40, 20], 0.5)
    params = CostParams(50, [0.1, 0.4], [2, 2], [50, 50])
    cfg = SimConfig(400, 16, seed=6)
    a, b = simulate_paths([QsPolicy(0, [3, 2]), RsPolicy(1, [3, 2])], model, params, cfg)
    np.testing.assert_array_equal(a, b)


def check_can_order_kappa_one():
    model = DemandModel("negbinomial", [40, 20], 0.5)
    params = CostParams(50, [0.1, 0.4], [2, 2], [50, 50])
    base = make_independent_ss(0.5, model, params)
    can = can_order_levels(base, 1.0)
    cfg = SimConfig(400, 16, seed=2)
    a, b = simulate_paths([can, base], model, params, cfg)
    np.testing.assert_array_equal(a, b)


def check_order_up_to():
    params = CostParams(5.0, [0.01, 0.04], [0.2, 0.2], [5.0, 5.0])
    diff = DiffusionParams([40.0, 20.0], [20.0, 10.0])
    H, G = init_networks(2, [8, 8], 5)
    z = np.array([35.0, 20.0])
    x = z - np.random.default_rng(12).integers(0, 60, size=(20, 2))
    vals = no_action_value(H, G, x, params, diff)
    eps = float(np.median(vals))
    pol = NeuralPolicy(H, G, z, eps, params, diff)
    y = pol.decide(x.astype(np.int64), None)
    fire = vals <= eps
    assert fire.any() and not fire.all()
    np.testing.assert_array_equal(x[fire] + y[fire], np.broadcast_to(z, x[fire].shape))
    assert not y[~fire].any()


def test_c6_fast_property_suite():
    check_finite_differences()
    check_path_reconstruction()
    check_homogeneity()
    check_double_enumeration()
    check_qs_zero_is_rs_one()
    check_can_order_kappa_one()
    check_order_up_to()


# --------------------------------------------------------------------------- 7


def scaled_schedule(rows, factor):
    return [[max(1, int(end * factor)), v] for end, v in rows]


def stage_losses_decrease(diag, window=10):
    """Within every beta stage long enough to judge, late losses sit below early ones."""
    stages = {}
    for r in diag:
        stages.setdefault(float(r["beta"]), []).append(float(r["loss"]))
    judged = 0
    for losses in stages.values():
        if len(losses) >= 4 * window:
            judged += 1
            if np.mean(losses[-window:]) >= np.mean(losses[:window]):
                return False
    return judged > 0


@pytest.mark.slow
def test_c7_twelve_item_short_run(tmp_path):
    src = CONFIGS / "12d_poisson_c0_20_p_10.yaml"
    tr = load_config(src).section("training")
    cfg = write_variant(
        src, tmp_path / "12d.yaml",
        benchmarks={"families": ["qs", "independent_ss"], "n_paths": 100, "horizon_periods": 2000},
        training={"M": 4000, "K": 1000, "lr_schedule": scaled_schedule(tr["lr_schedule"], 0.1),
                  "beta_schedule": scaled_schedule(tr["beta_schedule"], 0.1)},
        evaluation={"n_paths": 10, "horizon_periods": 2000})
    out = tmp_path / "run"
    for sub in ("bench", "train", "extract"):
        assert cli.run(sub, cfg, out) == cli.EXIT_OK, sub
    diag = read_rows(out / "diagnostics.csv")
    assert stage_losses_decrease(diag)
    assert np.mean([float(r["violation"]) for r in diag[-50:]]) < 0.05
    pols = [out / "policy_neural.yaml", out / "policies" / "independent_ss.yaml"]
    assert cli.run("eval", cfg, out / "eval", policy=pols) == cli.EXIT_OK
    est = {r["policy"]: r for r in read_rows(out / "eval" / "estimates.csv")}
    ind, nn = est["independent_ss"], est["policy_neural"]
    gap, _ = cli.gap_row(float(ind["mean"]), float(ind["std_error"]),
                         float(nn["mean"]), float(nn["std_error"]))
    assert cli.classify(gap) == "beat", gap
