import math
import os

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from sjrp.bsde import (PathBundle, ReferencePolicy, TrainConfig, TrainingDiverged, euler_maruyama,
                       init_networks, iteration_rng, loss, loss_and_gradients, slack,
                       step_schedule, train, violation_probability)
from sjrp.core import ConfigurationError, CostParams, DiffusionParams
from sjrp.nn import Mlp, load_checkpoint

DIFF = DiffusionParams([40.0, 20.0], [20.0, 10.0])
PARAMS = CostParams(5.0, [0.01, 0.04], [0.2, 0.2], [5.0, 5.0])
POLICY = ReferencePolicy(1.0, [35.0, 20.0], 0.2, 0.0)


def scaled_net(net, kappa):
    return Mlp([W.copy() for W in net.weights[:-1]] + [kappa * net.weights[-1]],
               [b.copy() for b in net.biases[:-1]] + [kappa * net.biases[-1]])


@given(st.integers(0, 10**6), st.floats(0.0, 0.6))
def test_path_recursion_reconstructs_states(seed, alpha):
    pol = ReferencePolicy(4.0, [30.0, 15.0], 0.3, alpha)
    b = euler_maruyama(pol, DIFF, 0.5, 0.01, np.zeros(2), seed, K=16)
    X = np.empty_like(b.states)
    X[:, 0] = b.x0
    for n in range(b.N):
        X[:, n + 1] = X[:, n] - DIFF.mu * b.dt - b.dB[:, n] @ DIFF.sigma.T + b.dU[:, n]
    np.testing.assert_array_equal(X, b.states)
    assert (b.dU >= 0).all()
    assert b.T == pytest.approx(0.5)


def test_orders_jump_to_at_least_the_sampled_target():
    pol = ReferencePolicy(50.0, [30.0, 15.0], 0.0, 0.0)  # nu = 0: Z is exactly E[Z]
    b = euler_maruyama(pol, DIFF, 0.2, 0.01, np.full(2, -5.0), 3, K=64)
    pre = b.states[:, :-1]
    post = pre + b.dU
    raised = b.dU > 0
    target = np.broadcast_to([30.0, 15.0], post.shape)
    np.testing.assert_allclose(post[raised], target[raised])
    assert (pre[raised] < target[raised]).all()
    fired = raised.any(axis=-1)
    assert 0.2 < fired.mean() < 0.8


def test_lognormal_parameters_reproduce_mean_and_cv():
    pol = ReferencePolicy(1.0, [2.0], 0.5)
    m, s = pol.lognormal_params()
    mean = math.exp(m[0] + s**2 / 2)
    var = (math.exp(s**2) - 1) * mean**2
    assert mean == pytest.approx(2.0)
    assert math.sqrt(var) / mean == pytest.approx(0.5)


def test_reference_policy_validation():
    with pytest.raises(ConfigurationError):
        ReferencePolicy(0.0, [1.0])
    with pytest.raises(ConfigurationError):
        ReferencePolicy(1.0, [1.0], alpha=1.0)
    with pytest.raises(ConfigurationError):
        euler_maruyama(ReferencePolicy(200.0, [1.0]), DiffusionParams([1.0], [1.0]), 0.1, 0.01,
                       np.zeros(1), 0)


@given(st.floats(0.01, 50.0), st.integers(0, 999))
def test_slack_is_homogeneous_in_costs(kappa, seed):
    H, G = init_networks(2, [6, 6], seed)
    b = euler_maruyama(POLICY, DIFF, 0.1, 0.01, np.zeros(2), seed, K=8)
    s = slack(H, G, b, PARAMS, DIFF)
    sk = slack(scaled_net(H, kappa), scaled_net(G, kappa), b, PARAMS.scaled(kappa), DIFF)
    np.testing.assert_allclose(sk, kappa * s, rtol=1e-10, atol=1e-10 * kappa)


def test_slack_by_hand_for_a_single_step():
    H, G = init_networks(1, [3], 0)
    diff = DiffusionParams([1.0], [0.5])
    pa = CostParams(2.0, [1.0], [1.0], [3.0], r=0.1)
    X = np.array([[[0.5], [0.2]]])
    dB = np.array([[[0.4]]])
    dU = np.array([[[0.0]]])
    b = PathBundle(X, dB, dU, 0.1)
    want = (H(X[0, :1])[0, 0] - math.exp(-0.01) * H(X[0, 1:])[0, 0]
            - G(X[0, :1])[0, 0] * 0.5 * 0.4 - 0.5 * 0.1)
    assert slack(H, G, b, pa, diff)[0] == pytest.approx(want, rel=1e-12)


def test_loss_gradients_match_finite_differences():
    H, G = init_networks(2, [5], 1)
    b = euler_maruyama(POLICY, DIFF, 0.1, 0.02, np.zeros(2), 1, K=6)
    beta = 3.0
    val, gH, gG, diag = loss_and_gradients(H, G, b, beta, PARAMS, DIFF)
    assert val == pytest.approx(loss(H, G, b, beta, PARAMS, DIFF))
    assert diag["violation"] == violation_probability(H, G, b, PARAMS, DIFF)
    h = 1e-6
    rng = np.random.default_rng(0)
    for net, grads in ((H, gH), (G, gG)):
        for P, g in zip(net.params, grads):
            idx = tuple(rng.integers(0, s) for s in P.shape)
            old = P[idx]
            P[idx] = old + h
            up = loss(H, G, b, beta, PARAMS, DIFF)
            P[idx] = old - h
            dn = loss(H, G, b, beta, PARAMS, DIFF)
            P[idx] = old
            fd = (up - dn) / (2 * h)
            assert abs(fd - g[idx]) <= 1e-5 * max(1.0, abs(fd))


def test_step_schedule():
    at = step_schedule([(10, 1e-3), (20, 1e-4)])
    assert at(1) == 1e-3 and at(10) == 1e-3 and at(11) == 1e-4 and at(99) == 1e-4
    with pytest.raises(ConfigurationError):
        step_schedule([])


def test_train_config_must_cover_all_iterations():
    with pytest.raises(ConfigurationError):
        TrainConfig(T=0.1, N=5, K=4, M=10, lr_schedule=[(5, 1e-3)], beta_schedule=[(10, 1.0)])


def test_iteration_streams_are_distinct_and_repeatable():
    a = iteration_rng(0, 3).random(4)
    np.testing.assert_array_equal(a, iteration_rng(0, 3).random(4))
    assert not np.array_equal(a, iteration_rng(0, 4).random(4))


def small_config(tmp_path, M=6):
    return TrainConfig(T=0.1, N=5, K=16, M=M, lr_schedule=[(M, 1e-3)],
                       beta_schedule=[(M, 10.0)], kappa=0.1, seed=2, hidden=[8, 8],
                       checkpoint_every=3, out_dir=str(tmp_path))


def test_training_artifacts_and_determinism(tmp_path):
    cfg = small_config(tmp_path / "a")
    r1 = train(cfg, POLICY, DIFF, CostParams(50, [0.1, 0.4], [2, 2], [50, 50]), 0.0)
    r2 = train(small_config(tmp_path / "b"), POLICY, DIFF,
               CostParams(50, [0.1, 0.4], [2, 2], [50, 50]), 0.0)
    for a, b in zip(r1.H.params + r1.G.params, r2.H.params + r2.G.params):
        np.testing.assert_array_equal(a, b)
    out = tmp_path / "a"
    assert sorted(os.listdir(out)) == ["ckpt_000003.bin", "ckpt_000006.bin", "diagnostics.csv",
                                       "final.bin"]
    lines = (out / "diagnostics.csv").read_text().splitlines()
    assert lines[0] == "# sjrp-train v1" and len(lines) == 2 + 6
    (H, G), _ = load_checkpoint(out / "final.bin")
    np.testing.assert_array_equal(H.weights[0], r1.H.weights[0])
    assert r1.x_state.shape == (16, 2)


def test_training_divergence_is_reported(tmp_path):
    cfg = TrainConfig(T=0.1, N=5, K=16, M=3, lr_schedule=[(3, 1e-3)], beta_schedule=[(3, 1e300)],
                      hidden=[4], out_dir=None)
    with pytest.raises(TrainingDiverged):
        train(cfg, POLICY, DIFF, CostParams(50, [0.1, 0.4], [2, 2], [50, 50]), 0.0)
