import math

import numpy as np
import pytest

from mcarl.diffcore import (
    LSTM, MLP, Affine, LstmState, ParamStore, adam_step, affine_forward, backprop_network, elu_apply,
    elu_grad, finite_diff_check, lstm_step,
)
from mcarl.errors import ConfigError, NumericalError, UsageError


def test_elu_values():
    assert elu_apply(0.0) == 0.0
    assert elu_apply(1.0) == 1.0
    assert abs(elu_apply(-20.0) - (math.exp(-20.0) - 1.0)) < 1e-8
    x = np.linspace(-3, 3, 13)
    np.testing.assert_array_equal(elu_apply(x), np.where(x > 0, x, np.expm1(x)))


def test_elu_grad_matches_branches():
    x = np.array([-2.0, -0.1, 0.0, 0.5, 3.0])
    np.testing.assert_allclose(elu_grad(x), [math.exp(-2.0), math.exp(-0.1), 1.0, 1.0, 1.0])


def test_affine_identity_and_bias():
    x = np.array([0.3, -1.2, 4.0])
    np.testing.assert_array_equal(affine_forward(np.eye(3), np.zeros(3), x), x)
    b = np.array([1.0, 2.0])
    np.testing.assert_array_equal(affine_forward(np.zeros((2, 3)), b, x), b)


def test_affine_hand_product():
    W = np.array([[1.0, 2.0], [3.0, -1.0], [0.5, 0.25]])
    b = np.array([0.1, 0.2, 0.3])
    x = np.array([2.0, -4.0])
    expect = [1 * 2 + 2 * -4 + 0.1, 3 * 2 + -1 * -4 + 0.2, 0.5 * 2 + 0.25 * -4 + 0.3]
    np.testing.assert_allclose(affine_forward(W, b, x), expect, rtol=0, atol=1e-15)


def test_affine_shape_mismatch():
    with pytest.raises(ConfigError):
        affine_forward(np.zeros((2, 3)), np.zeros(2), np.zeros(4))


def test_single_affine_gradient_is_input():
    store = ParamStore()
    net = MLP(store, "lin", (3, 2), np.random.default_rng(0))
    x = np.array([[0.5, -1.0, 2.0]])
    backprop_network(net, x, np.array([[0.0, 1.0]]))
    np.testing.assert_array_equal(store.grads["lin.0.W"][1], x[0])
    np.testing.assert_array_equal(store.grads["lin.0.W"][0], 0.0)
    np.testing.assert_array_equal(store.grads["lin.0.b"], [0.0, 1.0])


def test_zero_upstream_gives_zero_gradients(rng):
    store = ParamStore()
    net = MLP(store, "n", (4, 6, 3), rng)
    backprop_network(net, rng.normal(size=(5, 4)), np.zeros((5, 3)))
    assert all(np.all(g == 0.0) for g in store.grads.values())


def test_backward_without_forward_is_usage_error(rng):
    net = MLP(ParamStore(), "n", (4, 3), rng)
    with pytest.raises(UsageError):
        net.backward(np.zeros((1, 3)))


def test_backprop_additivity(rng):
    store = ParamStore()
    net = MLP(store, "n", (4, 7, 3), rng)
    x = rng.normal(size=(6, 4))
    u1, u2 = rng.normal(size=(6, 3)), rng.normal(size=(6, 3))
    backprop_network(net, x, u1)
    backprop_network(net, x, u2)
    two = {k: g.copy() for k, g in store.grads.items()}
    store.zero_grad()
    backprop_network(net, x, u1 + u2)
    for k in two:
        np.testing.assert_allclose(two[k], store.grads[k], rtol=0, atol=1e-12)


def test_input_gradient_matches_finite_difference(rng):
    store = ParamStore()
    net = MLP(store, "n", (3, 5, 2), rng)
    x = rng.normal(size=(1, 3))
    u = rng.normal(size=(1, 2))
    dx = backprop_network(net, x, u)
    h = 1e-6
    for j in range(3):
        xp, xm = x.copy(), x.copy()
        xp[0, j] += h
        xm[0, j] -= h
        fd = (np.sum(u * net(xp)) - np.sum(u * net(xm))) / (2 * h)
        assert dx[0, j] == pytest.approx(fd, rel=1e-6, abs=1e-9)


def test_two_layer_net_gradient_check(rng):
    store = ParamStore()
    net = MLP(store, "n", (5, 8, 3), rng)
    x = rng.normal(size=(4, 5))
    t = rng.normal(size=(4, 3))

    def loss():
        return float(np.sum((net(x) - t) ** 2))

    def loss_and_grad():
        out = net.forward(x)
        net.backward(2.0 * (out - t))
        return float(np.sum((out - t) ** 2))

    assert finite_diff_check(store, loss, loss_and_grad) < 1e-4


def test_linear_net_quadratic_loss_near_exact(rng):
    store = ParamStore()
    lin = Affine(store, "a", 3, 2, rng)
    x = rng.normal(size=(4, 3))

    def loss():
        return float(0.5 * np.sum(lin.forward(x) ** 2))

    def loss_and_grad():
        y = lin.forward(x)
        lin.backward(x, y)
        return float(0.5 * np.sum(y ** 2))

    assert finite_diff_check(store, loss, loss_and_grad) < 1e-7


def test_lstm_zero_params_zero_state():
    store = ParamStore()
    cell = LSTM(store, "l", 4, 128)
    out, nxt = lstm_step(cell, LstmState.zeros(128), np.ones(4))
    assert out.shape == (128,)
    assert np.all(nxt.hidden == 0.0) and np.all(nxt.cell == 0.0)


def _sig(v):
    return 1.0 / (1.0 + math.exp(-v))


def test_lstm_step_matches_scalar_gates(rng):
    H, D = 3, 2
    store = ParamStore()
    cell = LSTM(store, "l", D, H, rng=rng)
    Wx, Wh, b = store["l.W_x"], store["l.W_h"], store["l.b"]
    x = rng.normal(size=D)
    h0, c0 = rng.normal(size=H), rng.normal(size=H)
    _, nxt = cell.step(LstmState(h0, c0), x)
    for k in range(H):
        z = [sum(Wx[g * H + k, j] * x[j] for j in range(D)) + sum(Wh[g * H + k, j] * h0[j] for j in range(H))
             + b[g * H + k] for g in range(4)]
        i, f, g, o = _sig(z[0]), _sig(z[1]), math.tanh(z[2]), _sig(z[3])
        c = f * c0[k] + i * g
        assert nxt.cell[k] == pytest.approx(c, abs=1e-14)
        assert nxt.hidden[k] == pytest.approx(o * math.tanh(c), abs=1e-14)


def test_lstm_shape_mismatch(rng):
    cell = LSTM(ParamStore(), "l", 3, 4, rng=rng)
    with pytest.raises(ConfigError):
        cell.step(LstmState.zeros(4), np.zeros(5))
    with pytest.raises(ConfigError):
        cell.step(LstmState.zeros(5), np.zeros(3))


def test_lstm_unrolled_gradient_check(rng):
    store = ParamStore()
    cell = LSTM(store, "l", 3, 4, readout_size=2, rng=rng)
    xs = rng.normal(size=(3, 2, 3))
    t = rng.normal(size=(3, 2, 2))
    s0 = LstmState(rng.normal(size=4) * 0.3, rng.normal(size=4) * 0.3)

    def loss():
        out, _ = cell.forward(xs, s0)
        return float(np.sum((out - t) ** 2))

    def loss_and_grad():
        out, _ = cell.forward(xs, s0)
        cell.backward(2.0 * (out - t))
        return float(np.sum((out - t) ** 2))

    assert finite_diff_check(store, loss, loss_and_grad) < 1e-4


def test_adam_first_step_is_signed_lr():
    store = ParamStore()
    store.add("p", np.array([1.0, -2.0, 0.5]))
    store.grads["p"][...] = [0.3, -4.0, 1e-3]
    before = store["p"].copy()
    adam_step(store, 0.01, max_grad_norm=None)
    np.testing.assert_allclose(store["p"] - before, -0.01 * np.sign([0.3, -4.0, 1e-3]), atol=1e-6)
    assert np.all(store.grads["p"] == 0.0)


def test_adam_zero_gradient_no_change():
    store = ParamStore()
    store.add("p", np.array([1.0, 2.0]))
    adam_step(store, 0.1)
    np.testing.assert_array_equal(store["p"], [1.0, 2.0])
    assert all(np.all(np.isfinite(m)) for m in store.m.values())


def test_adam_three_step_recursion():
    store = ParamStore()
    store.add("p", np.array([0.7]))
    grads = [0.5, -0.2, 0.9]
    p, m, v, lr = 0.7, 0.0, 0.0, 0.05
    for t, g in enumerate(grads, start=1):
        store.grads["p"][0] = g
        adam_step(store, lr, max_grad_norm=None)
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        p -= lr * (m / (1 - 0.9 ** t)) / (math.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
    assert store["p"][0] == pytest.approx(p, abs=1e-15)


def test_adam_clips_global_norm():
    store = ParamStore()
    store.add("a", np.zeros(2))
    store.grads["a"][...] = [30.0, 40.0]
    norm = adam_step(store, 0.1, max_grad_norm=1.0)
    assert norm == pytest.approx(50.0)
    np.testing.assert_allclose(store.m["a"], 0.1 * np.array([0.6, 0.8]))


def test_adam_non_finite_gradient_names_parameter():
    store = ParamStore()
    store.add("actor.0.W", np.zeros(2))
    store.grads["actor.0.W"][0] = np.nan
    with pytest.raises(NumericalError, match="actor.0.W"):
        adam_step(store, 0.1)


def test_state_arrays_round_trip(rng):
    a = ParamStore()
    MLP(a, "n", (3, 4, 2), rng)
    a.grads["n.0.W"][...] = 1.0
    adam_step(a, 0.01)
    b = ParamStore()
    MLP(b, "n", (3, 4, 2), np.random.default_rng(99))
    b.load_state_arrays("x", a.state_arrays("x"))
    for k in a.params:
        np.testing.assert_array_equal(a.params[k], b.params[k])
        np.testing.assert_array_equal(a.m[k], b.m[k])
    assert a.step == b.step
