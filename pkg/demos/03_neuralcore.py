"""Recurrent actor network: forward pass, BPTT and a finite-difference check."""

from __future__ import annotations

import numpy as np

from atsc_marl.neuralcore import RMSProp, RecurrentNet, cap_gradients, softmax

rng = np.random.default_rng(0)
net = RecurrentNet(n_in=4, n_out=2, n_fp=2, fc=8, fp_fc=4, hidden=5, rng=1)
X, F = rng.random((6, 4)), rng.random((6, 2))
W = rng.normal(size=(6, 2))

out, cache, _ = net.forward(X, F, net.initial_carry())
print("policies:\n", np.round(softmax(out), 3))
grads = net.backward(cache, W)

# central differences on one weight
h, idx = 1e-5, (3, 1)
w = net.params["lstm_wx"]
old = w[idx]
w[idx] = old + h
lp = np.sum(net.forward(X, F, net.initial_carry())[0] * W)
w[idx] = old - h
lm = np.sum(net.forward(X, F, net.initial_carry())[0] * W)
w[idx] = old
print("analytic", grads["lstm_wx"][idx], "numeric", (lp - lm) / (2 * h))

capped, norm = cap_gradients(grads, 40.0)
opt = RMSProp(net.params, 5e-4)
opt.update(net.params, capped)
print("global grad norm before cap:", round(norm, 4))
