import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from sjrp.nn import (AdamState, Mlp, NonFiniteError, adam_step, elu, elu_grad, he_init,
                     load_checkpoint, loss_gradients, save_checkpoint)


def fd_param_check(net, X, dY, h=1e-6):
    cache = net.forward(X, keep=True)[1]
    grads = net.backward(cache, dY)
    worst = 0.0
    rng = np.random.default_rng(0)
    for P, G in zip(net.params, grads):
        for _ in range(4):
            idx = tuple(rng.integers(0, s) for s in P.shape)
            old = P[idx]
            P[idx] = old + h
            up = float(np.sum(net.forward(X) * dY))
            P[idx] = old - h
            dn = float(np.sum(net.forward(X) * dY))
            P[idx] = old
            fd = (up - dn) / (2 * h)
            worst = max(worst, abs(fd - G[idx]) / max(1.0, abs(fd)))
    return worst


@given(st.lists(st.integers(1, 9), min_size=1, max_size=3), st.integers(1, 4), st.integers(0, 999))
def test_parameter_gradients_match_finite_differences(hidden, d, seed):
    net = he_init([d, *hidden, d], seed)
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(5, d))
    dY = rng.normal(size=(5, d))
    assert fd_param_check(net, X, dY) < 1e-5


@given(st.integers(1, 4), st.integers(0, 999))
def test_input_jacobian_matches_finite_differences(d, seed):
    net = he_init([d, 7, 6, 3], seed)
    x = np.random.default_rng(seed).normal(size=d)
    J = net.input_jacobian(x)
    h = 1e-6
    for j in range(d):
        e = np.zeros(d)
        e[j] = h
        fd = (net(x + e) - net(x - e)) / (2 * h)
        np.testing.assert_allclose(J[:, j], fd, rtol=1e-5, atol=1e-7)
    y, J2 = net.forward_with_jacobian(x)
    np.testing.assert_array_equal(J2, J)
    np.testing.assert_array_equal(y, net(x))


def test_input_gradient_is_jacobian_transpose_product():
    net = he_init([3, 8, 2], 4)
    X = np.random.default_rng(1).normal(size=(6, 3))
    dY = np.random.default_rng(2).normal(size=(6, 2))
    _, cache = net.forward(X, keep=True)
    got = net.input_gradient(cache, dY)
    want = np.einsum("bo,boi->bi", dY, net.input_jacobian(X))
    np.testing.assert_allclose(got, want, rtol=1e-12, atol=1e-12)


def test_elu_and_derivative():
    u = np.array([-2.0, -0.5, 0.0, 0.5, 3.0])
    np.testing.assert_allclose(elu(u), np.where(u > 0, u, np.expm1(u)))
    np.testing.assert_allclose(elu_grad(u), np.where(u >= 0, 1.0, np.exp(u)))


def test_he_init_bounds_and_zero_bias():
    net = he_init([4, 100, 1], 0)
    assert np.abs(net.weights[0]).max() <= np.sqrt(6 / 4)
    assert not net.biases[0].any()
    with pytest.raises(ValueError):
        he_init([3], 0)


def test_shape_checks():
    with pytest.raises(ValueError):
        Mlp([np.zeros((2, 3))], [np.zeros(2)])
    with pytest.raises(ValueError):
        he_init([2, 3, 1], 0)(np.zeros(3))


def test_loss_gradients_sum_shared_networks():
    net = he_init([2, 5, 1], 3)
    X1 = np.ones((3, 2))
    X2 = -np.ones((4, 2))

    def fn(outs):
        return float(outs[0].sum() + 2 * outs[1].sum()), [np.ones((3, 1)), 2 * np.ones((4, 1))]

    _, grads = loss_gradients([(net, X1), (net, X2)], fn)
    _, c1 = net.forward(X1, keep=True)
    _, c2 = net.forward(X2, keep=True)
    want = [a + b for a, b in zip(net.backward(c1, np.ones((3, 1))),
                                  net.backward(c2, 2 * np.ones((4, 1))))]
    for a, b in zip(grads[id(net)], want):
        np.testing.assert_allclose(a, b)
    with pytest.raises(NonFiniteError):
        loss_gradients([(net, X1)], lambda outs: (float("nan"), [np.ones((3, 1))]))


def test_adam_minimizes_a_quadratic():
    x = [np.array([3.0, -2.0])]
    st_ = AdamState(x)
    for _ in range(3000):
        adam_step(x, [2 * x[0]], st_, 1e-2)
    assert np.abs(x[0]).max() < 1e-3
    with pytest.raises(ValueError):
        adam_step(x, [x[0]], st_, 0.0)


def test_adam_first_step_moves_by_learning_rate():
    x = [np.array([1.0, -1.0])]
    adam_step(x, [np.array([0.3, -7.0])], AdamState(x), 0.01)
    np.testing.assert_allclose(x[0], [0.99, -0.99], rtol=1e-6)


def test_checkpoint_round_trip(tmp_path):
    H = he_init([2, 4, 4, 1], 0)
    G = he_init([2, 3, 2], 1)
    path = tmp_path / "ck.bin"
    save_checkpoint(path, [H, G], b"meta")
    (H2, G2), extra = load_checkpoint(path)
    assert extra == b"meta"
    for a, b in zip(H.params + G.params, H2.params + G2.params):
        np.testing.assert_array_equal(a, b)
    path.write_bytes(b"garbage!" + path.read_bytes()[8:])
    with pytest.raises(ValueError):
        load_checkpoint(path)
