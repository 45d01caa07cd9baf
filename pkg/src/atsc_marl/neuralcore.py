"""Small numpy neural-network engine for recurrent actor/critic agents.

Everything is float64.  A :class:`RecurrentNet` is the per-agent stack

    waves --FC(relu)--+
                      +--concat--> LSTM --> head (softmax logits or value)
    fingerprints --FC(relu)--+        (fingerprint branch optional)

Gradients are exact reverse-mode derivatives through the whole sequence
(backpropagation through time); the initial carry is treated as a constant.
LSTM weights are stored stacked in gate order (input, forget, output,
candidate): ``lstm_wx`` is ``(4H, n_in)``, ``lstm_wh`` is ``(4H, H)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

STATE_CLIP = (0.0, 2.0)
REWARD_CLIP = (-2.0, 2.0)
GRAD_CAP = 40.0


class ShapeError(ValueError):
    pass


# ---------------------------------------------------------------------------
# primitives

def orthogonal_init(rows: int, cols: int, gain: float = 1.0, rng=None) -> np.ndarray:
    """Random matrix with orthonormal rows or columns (whichever is fewer)."""
    if rows < 1 or cols < 1:
        raise ShapeError("orthogonal_init needs rows, cols >= 1")
    rng = np.random.default_rng(rng)
    a = rng.standard_normal((max(rows, cols), min(rows, cols)))
    q, r = np.linalg.qr(a)
    q = q * np.sign(np.diag(r))  # makes the decomposition unique
    if rows < cols:
        q = q.T
    return gain * q


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def softmax(z: np.ndarray) -> np.ndarray:
    z = z - np.max(z, axis=-1, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=-1, keepdims=True)


def log_softmax(z: np.ndarray) -> np.ndarray:
    z = z - np.max(z, axis=-1, keepdims=True)
    return z - np.log(np.sum(np.exp(z), axis=-1, keepdims=True))


@dataclass
class DenseParams:
    weight: np.ndarray  # (out, in)
    bias: np.ndarray

    def __post_init__(self):
        if self.weight.ndim != 2 or self.bias.shape != (self.weight.shape[0],):
            raise ShapeError("dense weight/bias shapes disagree")


def dense_forward(p: DenseParams, x: np.ndarray, activation: str = "linear") -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != p.weight.shape[1]:
        raise ShapeError(f"input dim {x.shape[-1]} != {p.weight.shape[1]}")
    z = x @ p.weight.T + p.bias
    if activation == "relu":
        return np.maximum(z, 0.0)
    if activation == "softmax":
        return softmax(z)
    if activation == "linear":
        return z
    raise ValueError(f"unknown activation {activation!r}")


@dataclass
class LstmParams:
    wx: np.ndarray  # (4H, in)
    wh: np.ndarray  # (4H, H)
    b: np.ndarray   # (4H,)

    @property
    def hidden_size(self) -> int:
        return self.wh.shape[1]

    def gate(self, name: str) -> tuple:
        """(input-to-hidden, hidden-to-hidden, bias) block of one gate."""
        k = "ifog".index(name[0])
        H = self.hidden_size
        s = slice(k * H, (k + 1) * H)
        return self.wx[s], self.wh[s], self.b[s]


@dataclass(frozen=True)
class LstmCarry:
    h: np.ndarray
    c: np.ndarray

    @classmethod
    def zeros(cls, hidden: int) -> "LstmCarry":
        return cls(np.zeros(hidden), np.zeros(hidden))


def lstm_step(p: LstmParams, x: np.ndarray, carry: LstmCarry) -> tuple:
    """One LSTM cell update; returns ``(h_new, LstmCarry(h_new, c_new))``."""
    H = p.hidden_size
    z = p.wx @ x + p.wh @ carry.h + p.b
    s = sigmoid(z[:3 * H])
    g = np.tanh(z[3 * H:])
    c = s[H:2 * H] * carry.c + s[:H] * g
    h = s[2 * H:] * np.tanh(c)
    return h, LstmCarry(h, c)


def clip_states(x):
    return np.clip(x, *STATE_CLIP)


def clip_reward(r):
    return float(np.clip(r, *REWARD_CLIP))


def global_norm(grads: dict) -> float:
    return float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))


def cap_gradients(grads: dict, cap: float = GRAD_CAP) -> tuple:
    """Rescale so the global L2 norm is at most ``cap``; returns (grads, norm before)."""
    norm = global_norm(grads)
    if norm > cap:
        scale = cap / norm
        grads = {k: g * scale for k, g in grads.items()}
    return grads, norm


class RMSProp:
    """acc <- rho*acc + (1-rho)*g^2 ;  p <- p - lr * g / sqrt(acc + eps)."""

    def __init__(self, params: dict, learning_rate: float, decay: float = 0.99,
                 eps: float = 1e-5):
        self.learning_rate = learning_rate
        self.decay = decay
        self.eps = eps
        self.acc = {k: np.zeros_like(v) for k, v in params.items()}

    def update(self, params: dict, grads: dict) -> None:
        rho, lr, eps = self.decay, self.learning_rate, self.eps
        for k, g in grads.items():
            a = self.acc[k]
            a *= rho
            a += (1.0 - rho) * g * g
            params[k] -= lr * g / np.sqrt(a + eps)


def rmsprop_update(state: RMSProp, params: dict, grads: dict) -> dict:
    state.update(params, grads)
    return params


# ---------------------------------------------------------------------------
# recurrent network

class RecurrentNet:
    """FC-relu (+ fingerprint FC-relu) -> LSTM -> linear head.

    The head returns pre-activations: logits for an actor, the value for a
    critic.  ``params`` is a flat dict of arrays so optimisers, checkpoints
    and gradient checks can treat it uniformly.
    """

    def __init__(self, n_in: int, n_out: int, n_fp: int = 0, fc: int = 128,
                 fp_fc: int = 64, hidden: int = 64, rng=None, gain: float = 1.0):
        rng = np.random.default_rng(rng)
        self.n_in, self.n_out, self.n_fp = n_in, n_out, n_fp
        self.fc, self.fp_fc, self.hidden = fc, fp_fc if n_fp else 0, hidden
        lstm_in = fc + self.fp_fc
        p = {
            "fc_w": orthogonal_init(fc, n_in, gain, rng),
            "fc_b": np.zeros(fc),
        }
        if n_fp:
            p["fp_w"] = orthogonal_init(fp_fc, n_fp, gain, rng)
            p["fp_b"] = np.zeros(fp_fc)
        p["lstm_wx"] = orthogonal_init(4 * hidden, lstm_in, gain, rng)
        p["lstm_wh"] = orthogonal_init(4 * hidden, hidden, gain, rng)
        p["lstm_b"] = np.zeros(4 * hidden)
        p["out_w"] = orthogonal_init(n_out, hidden, gain, rng)
        p["out_b"] = np.zeros(n_out)
        self.params = p

    @property
    def lstm(self) -> LstmParams:
        p = self.params
        return LstmParams(p["lstm_wx"], p["lstm_wh"], p["lstm_b"])

    def initial_carry(self) -> LstmCarry:
        return LstmCarry.zeros(self.hidden)

    def copy_params(self) -> dict:
        return {k: v.copy() for k, v in self.params.items()}

    def _check(self, x, f):
        if x.shape[-1] != self.n_in:
            raise ShapeError(f"wave input has {x.shape[-1]} entries, expected {self.n_in}")
        if self.n_fp and (f is None or f.shape[-1] != self.n_fp):
            raise ShapeError(f"fingerprint input must have {self.n_fp} entries")

    def step(self, x: np.ndarray, f: np.ndarray | None, carry: LstmCarry,
             params: dict | None = None) -> tuple:
        """Single time step; returns ``(head output, new carry)``."""
        p = self.params if params is None else params
        self._check(x, f)
        u = np.maximum(p["fc_w"] @ x + p["fc_b"], 0.0)
        if self.n_fp:
            u = np.concatenate([u, np.maximum(p["fp_w"] @ f + p["fp_b"], 0.0)])
        H = self.hidden
        z = p["lstm_wx"] @ u + p["lstm_wh"] @ carry.h + p["lstm_b"]
        s = sigmoid(z[:3 * H])
        g = np.tanh(z[3 * H:])
        c = s[H:2 * H] * carry.c + s[:H] * g
        h = s[2 * H:] * np.tanh(c)
        return p["out_w"] @ h + p["out_b"], LstmCarry(h, c)

    def forward(self, X: np.ndarray, F: np.ndarray | None, carry: LstmCarry,
                params: dict | None = None) -> tuple:
        """Run a whole sequence; returns ``(outputs (T, n_out), cache, final carry)``."""
        p = self.params if params is None else params
        X = np.atleast_2d(np.asarray(X, dtype=float))
        self._check(X, F)
        T, H = X.shape[0], self.hidden
        A1 = X @ p["fc_w"].T + p["fc_b"]
        U = np.maximum(A1, 0.0)
        A2 = None
        if self.n_fp:
            F = np.atleast_2d(np.asarray(F, dtype=float))
            A2 = F @ p["fp_w"].T + p["fp_b"]
            U = np.concatenate([U, np.maximum(A2, 0.0)], axis=1)
        Gx = U @ p["lstm_wx"].T + p["lstm_b"]
        wh = p["lstm_wh"]
        S = np.empty((T, 3 * H))
        G = np.empty((T, H))
        C = np.empty((T, H))
        TC = np.empty((T, H))
        Hs = np.empty((T, H))
        Hprev = np.empty((T, H))
        Cprev = np.empty((T, H))
        h, c = carry.h, carry.c
        for t in range(T):
            Hprev[t], Cprev[t] = h, c
            z = Gx[t] + wh @ h
            s = sigmoid(z[:3 * H])
            g = np.tanh(z[3 * H:])
            c = s[H:2 * H] * c + s[:H] * g
            tc = np.tanh(c)
            h = s[2 * H:] * tc
            S[t], G[t], C[t], TC[t], Hs[t] = s, g, c, tc, h
        out = Hs @ p["out_w"].T + p["out_b"]
        cache = dict(X=X, F=F, A1=A1, A2=A2, U=U, S=S, G=G, TC=TC, Hs=Hs,
                     Hprev=Hprev, Cprev=Cprev, params=p)
        return out, cache, LstmCarry(h.copy(), c.copy())

    def backward(self, cache: dict, d_out: np.ndarray) -> dict:
        """Gradients of ``sum(d_out * outputs)`` w.r.t. every parameter."""
        if cache is None:
            raise RuntimeError("backward called without a recorded forward pass")
        p = cache["params"]
        H = self.hidden
        d_out = np.atleast_2d(d_out)
        Hs, S, G, TC = cache["Hs"], cache["S"], cache["G"], cache["TC"]
        Cprev = cache["Cprev"]
        T = Hs.shape[0]
        grads = {"out_w": d_out.T @ Hs, "out_b": d_out.sum(axis=0)}
        dHs = d_out @ p["out_w"]
        whT = p["lstm_wh"].T
        dZ = np.empty((T, 4 * H))
        dh_next = np.zeros(H)
        dc_next = np.zeros(H)
        for t in range(T - 1, -1, -1):
            s = S[t]
            i, f, o = s[:H], s[H:2 * H], s[2 * H:]
            g, tc = G[t], TC[t]
            dh = dHs[t] + dh_next
            dc = dc_next + dh * o * (1.0 - tc * tc)
            dz = dZ[t]
            dz[:H] = dc * g * i * (1.0 - i)
            dz[H:2 * H] = dc * Cprev[t] * f * (1.0 - f)
            dz[2 * H:3 * H] = dh * tc * o * (1.0 - o)
            dz[3 * H:] = dc * i * (1.0 - g * g)
            dc_next = dc * f
            dh_next = whT @ dz
        grads["lstm_wx"] = dZ.T @ cache["U"]
        grads["lstm_wh"] = dZ.T @ cache["Hprev"]
        grads["lstm_b"] = dZ.sum(axis=0)
        dU = dZ @ p["lstm_wx"]
        dA1 = dU[:, :self.fc] * (cache["A1"] > 0)
        grads["fc_w"] = dA1.T @ cache["X"]
        grads["fc_b"] = dA1.sum(axis=0)
        if self.n_fp:
            dA2 = dU[:, self.fc:] * (cache["A2"] > 0)
            grads["fp_w"] = dA2.T @ cache["F"]
            grads["fp_b"] = dA2.sum(axis=0)
        return {k: grads[k] for k in p}


def bptt(net: RecurrentNet, cache: dict, d_out: np.ndarray) -> dict:
    return net.backward(cache, d_out)
