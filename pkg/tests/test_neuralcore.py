import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from atsc_marl.neuralcore import (DenseParams, LstmCarry, LstmParams, RMSProp, RecurrentNet,
                                  ShapeError, bptt, cap_gradients, clip_reward, clip_states,
                                  dense_forward, global_norm, lstm_step, orthogonal_init,
                                  rmsprop_update, softmax)
from oracles import lstm_step_reference, numerical_gradients, random_toy_net, relative_error

finite = st.floats(-50, 50, allow_nan=False)


@pytest.mark.parametrize("rows,cols", [(4, 4), (8, 3), (3, 8), (1, 5)])
def test_orthogonal(rows, cols):
    q = orthogonal_init(rows, cols, 1.0, 0)
    gram = q.T @ q if rows >= cols else q @ q.T
    assert np.abs(gram - np.eye(min(rows, cols))).max() < 1e-6


def test_orthogonal_gain_and_determinism():
    assert not orthogonal_init(3, 3, 0.0, 1).any()
    assert np.array_equal(orthogonal_init(5, 2, 1.0, 9), orthogonal_init(5, 2, 1.0, 9))
    with pytest.raises(ShapeError):
        orthogonal_init(0, 2)


def test_dense_examples():
    p = DenseParams(np.zeros((3, 2)), np.zeros(3))
    assert not dense_forward(p, np.array([1.0, -1.0]), "relu").any()
    assert np.allclose(dense_forward(DenseParams(np.zeros((2, 2)), np.zeros(2)),
                                     np.ones(2), "softmax"), [0.5, 0.5])
    ident = DenseParams(np.eye(2), np.zeros(2))
    assert np.array_equal(dense_forward(ident, np.array([1.0, -2.0])), [1.0, -2.0])
    with pytest.raises(ShapeError):
        dense_forward(ident, np.ones(3))


@settings(max_examples=50)
@given(arrays(float, st.integers(1, 6), elements=finite), finite)
def test_softmax_properties(z, shift):
    p = softmax(z)
    assert np.all(p > 0)
    assert abs(p.sum() - 1) < 1e-12
    assert np.argmax(softmax(z + shift)) == np.argmax(p)


def test_lstm_zero_params():
    H = 3
    p = LstmParams(np.zeros((4 * H, 2)), np.zeros((4 * H, H)), np.zeros(4 * H))
    out, carry = lstm_step(p, np.ones(2), LstmCarry.zeros(H))
    assert not out.any() and not carry.c.any()
    c0 = np.array([1.0, -2.0, 0.5])
    start = LstmCarry(np.zeros(H), c0.copy())
    out, carry = lstm_step(p, np.ones(2), start)
    assert np.allclose(carry.c, 0.5 * c0)
    assert np.allclose(out, 0.5 * np.tanh(0.5 * c0))
    assert np.array_equal(start.c, c0)


def test_lstm_matches_longhand():
    rng = np.random.default_rng(3)
    H, n = 4, 3
    p = LstmParams(rng.normal(size=(4 * H, n)), rng.normal(size=(4 * H, H)), rng.normal(size=4 * H))
    x, h, c = rng.normal(size=n), rng.normal(size=H), rng.normal(size=H)
    out, carry = lstm_step(p, x, LstmCarry(h, c))
    ref_h, ref_c = lstm_step_reference(p.wx, p.wh, p.b, x, h, c)
    assert np.allclose(out, ref_h) and np.allclose(carry.c, ref_c)
    wx_f, _, _ = p.gate("forget")
    assert np.array_equal(wx_f, p.wx[H:2 * H])


def test_lstm_fixed_point():
    rng = np.random.default_rng(0)
    H = 4
    p = LstmParams(0.3 * rng.normal(size=(4 * H, 2)), 0.1 * rng.normal(size=(4 * H, H)),
                   np.zeros(4 * H))
    p.b[H:2 * H] = -2.0  # small forget gate keeps the map contractive
    carry = LstmCarry.zeros(H)
    x = np.array([0.4, -0.2])
    for _ in range(500):
        h_prev = carry.h
        _, carry = lstm_step(p, x, carry)
        if np.linalg.norm(carry.h - h_prev) < 1e-10:
            break
    assert np.linalg.norm(carry.h - h_prev) < 1e-10


def test_clipping_examples():
    assert clip_states(np.array([3.1, -1.0, 0.5])).tolist() == [2.0, 0.0, 0.5]
    assert clip_reward(-5) == -2.0
    g = {"a": np.array([48.0, 64.0])}
    capped, before = cap_gradients(g, 40)
    assert before == 80.0
    assert np.allclose(capped["a"], [24.0, 32.0])
    small = {"a": np.array([3.0, 4.0])}
    assert cap_gradients(small, 40)[0]["a"] is small["a"]


@settings(max_examples=50)
@given(arrays(float, 5, elements=finite), finite)
def test_clip_idempotent(x, r):
    assert np.array_equal(clip_states(clip_states(x)), clip_states(x))
    assert clip_reward(clip_reward(r)) == clip_reward(r)
    g = {"w": x}
    once = cap_gradients(g, 40)[0]
    assert global_norm(once) <= 40 + 1e-9
    assert np.allclose(cap_gradients(once, 40)[0]["w"], once["w"])


def test_rmsprop_zero_gradient():
    params = {"w": np.ones(3)}
    opt = RMSProp(params, 5e-4)
    opt.acc["w"][:] = 2.0
    rmsprop_update(opt, params, {"w": np.zeros(3)})
    assert np.array_equal(params["w"], np.ones(3))
    assert np.allclose(opt.acc["w"], 2.0 * 0.99)


def test_rmsprop_first_step():
    params = {"w": np.zeros(4)}
    g = np.array([1.0, -3.0, 0.5, 10.0])
    opt = RMSProp(params, 5e-4, 0.99, 1e-5)
    opt.update(params, {"w": g})
    expected = -5e-4 * g / (np.abs(g) * np.sqrt(0.01))
    assert np.allclose(params["w"], expected, rtol=5e-3)  # eps makes it approximate
    assert np.all(opt.acc["w"] >= 0)


def test_constant_loss_gives_zero_gradients():
    net = RecurrentNet(3, 2, 2, fc=4, fp_fc=3, hidden=5, rng=0)
    X = np.random.default_rng(1).random((4, 3))
    F = np.full((4, 2), 0.5)
    _, cache, _ = net.forward(X, F, net.initial_carry())
    grads = bptt(net, cache, np.zeros((4, 2)))
    assert all(not g.any() for g in grads.values())
    assert set(grads) == set(net.params)


def test_backward_requires_forward():
    net = RecurrentNet(2, 1, rng=0)
    with pytest.raises(RuntimeError):
        net.backward(None, np.zeros((1, 1)))


def test_single_dense_closed_form():
    # squared loss on a linear layer: gradient 2(Wx+b-y)x^T
    rng = np.random.default_rng(2)
    W, b, x, y = rng.normal(size=(3, 4)), rng.normal(size=3), rng.normal(size=4), rng.normal(size=3)
    resid = W @ x + b - y
    analytic = 2 * np.outer(resid, x)
    h = 1e-6
    num = np.zeros_like(W)
    for idx in np.ndindex(W.shape):
        Wp, Wm = W.copy(), W.copy()
        Wp[idx] += h
        Wm[idx] -= h
        num[idx] = (np.sum((Wp @ x + b - y) ** 2) - np.sum((Wm @ x + b - y) ** 2)) / (2 * h)
    assert relative_error(num, analytic) < 1e-8


@settings(max_examples=8, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_bptt_matches_finite_differences(seed):
    rng = np.random.default_rng(seed)
    net = random_toy_net(rng)
    T = int(rng.integers(1, 6))
    X = rng.random((T, net.n_in)) * 2
    F = rng.random((T, net.n_fp)) if net.n_fp else None
    carry = LstmCarry(0.5 * rng.normal(size=net.hidden), 0.5 * rng.normal(size=net.hidden))
    W = rng.normal(size=(T, net.n_out))
    _, cache, _ = net.forward(X, F, carry)
    grads = net.backward(cache, W)
    num = numerical_gradients(net, X, F, carry, W)
    for k in grads:
        assert relative_error(num[k], grads[k]) < 1e-4, k


def test_shape_errors():
    net = RecurrentNet(3, 2, 2, rng=0)
    with pytest.raises(ShapeError):
        net.step(np.zeros(4), np.zeros(2), net.initial_carry())
    with pytest.raises(ShapeError):
        net.step(np.zeros(3), None, net.initial_carry())


def test_step_matches_forward():
    net = RecurrentNet(3, 2, 4, rng=5)
    rng = np.random.default_rng(0)
    X, F = rng.random((6, 3)), rng.random((6, 4))
    out, _, end = net.forward(X, F, net.initial_carry())
    carry = net.initial_carry()
    for t in range(6):
        o, carry = net.step(X[t], F[t], carry)
        assert np.allclose(o, out[t], atol=1e-12)
    assert np.allclose(carry.h, end.h) and np.allclose(carry.c, end.c)


def test_no_fingerprint_branch_without_fingerprints():
    a = RecurrentNet(3, 2, 0, rng=11)
    assert "fp_w" not in a.params


def test_determinism_of_updates():
    def run():
        net = RecurrentNet(3, 2, 2, rng=4)
        opt = RMSProp(net.params, 5e-4)
        rng = np.random.default_rng(8)
        for _ in range(3):
            X, F = rng.random((5, 3)), rng.random((5, 2))
            _, cache, _ = net.forward(X, F, net.initial_carry())
            g, _ = cap_gradients(net.backward(cache, rng.normal(size=(5, 2))))
            opt.update(net.params, g)
        return net.params

    a, b = run(), run()
    assert all(np.array_equal(a[k], b[k]) for k in a)
