"""Independent reference implementations used by the tests."""

from __future__ import annotations

import numpy as np


def brute_force_returns(rewards, bootstrap, gamma):
    """Double loop over the definition, no recursion."""
    T = len(rewards)
    out = []
    for t in range(T):
        acc = 0.0
        for tau in range(t, T):
            acc += gamma ** (tau - t) * rewards[tau]
        acc += gamma ** (T - t) * bootstrap
        out.append(acc)
    return np.array(out)


def numerical_gradients(net, X, F, carry, weights, h=1e-5):
    """Central differences of sum(weights * net.forward(...)) for every parameter."""
    out = {}
    for k, v in net.params.items():
        num = np.zeros_like(v)
        for idx in np.ndindex(v.shape):
            old = v[idx]
            v[idx] = old + h
            lp = float(np.sum(net.forward(X, F, carry)[0] * weights))
            v[idx] = old - h
            lm = float(np.sum(net.forward(X, F, carry)[0] * weights))
            v[idx] = old
            num[idx] = (lp - lm) / (2 * h)
        out[k] = num
    return out


def relative_error(a, b):
    a, b = np.ravel(a), np.ravel(b)
    denom = np.linalg.norm(a) + np.linalg.norm(b)
    if denom < 1e-12:
        return 0.0
    return float(np.linalg.norm(a - b) / denom)


def random_toy_net(rng, max_in=6, max_hidden=8):
    from atsc_marl.neuralcore import RecurrentNet
    n_in = int(rng.integers(1, max_in + 1))
    n_fp = int(rng.integers(0, 4))
    n_out = int(rng.integers(1, 4))
    net = RecurrentNet(n_in, n_out, n_fp, fc=int(rng.integers(2, max_hidden + 1)),
                       fp_fc=int(rng.integers(2, max_hidden + 1)),
                       hidden=int(rng.integers(1, max_hidden + 1)), rng=rng)
    # perturb so biases and the recurrent path are all non-trivial
    for k in net.params:
        net.params[k] = net.params[k] + 0.3 * rng.standard_normal(net.params[k].shape)
    return net


def lstm_step_reference(wx, wh, b, x, h, c):
    """Gate-by-gate LSTM written out longhand (order i, f, o, g)."""
    H = len(h)
    def sig(v):
        return 1.0 / (1.0 + np.exp(-v))
    blocks = [wx[k * H:(k + 1) * H] @ x + wh[k * H:(k + 1) * H] @ h + b[k * H:(k + 1) * H]
              for k in range(4)]
    i, f, o = sig(blocks[0]), sig(blocks[1]), sig(blocks[2])
    g = np.tanh(blocks[3])
    c_new = f * c + i * g
    return o * np.tanh(c_new), c_new
