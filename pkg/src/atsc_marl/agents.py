"""Observations, rewards, returns, losses and action selection.

Covers the recurrent actor-critic learners (independent and neighbourhood
-coordinated variants), the Greedy controller and the two independent
Q-learning baselines.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .microsim import Simulator
from .netmodel import AgentGraph
from .neuralcore import (GRAD_CAP, RMSProp, RecurrentNet, cap_gradients, clip_reward,
                         clip_states, log_softmax, softmax)

WAVE_NORM = 5.0
REWARD_NORM = 25.0


# ---------------------------------------------------------------------------
# observations

@dataclass
class Observation:
    own_wave: np.ndarray
    neighbor_waves: np.ndarray
    fingerprints: np.ndarray = field(default_factory=lambda: np.zeros(0))
    last_action: np.ndarray = field(default_factory=lambda: np.zeros(0))  # one-hot, optional

    @property
    def wave_input(self) -> np.ndarray:
        return np.concatenate([self.own_wave, self.neighbor_waves])

    @property
    def net_input(self) -> np.ndarray:
        """Main-branch network input: waves followed by the own previous action."""
        return np.concatenate([self.own_wave, self.neighbor_waves, self.last_action])


def normalize_wave(wave: np.ndarray, norm: float = WAVE_NORM) -> np.ndarray:
    return clip_states(np.asarray(wave, dtype=float) / norm)


def ia2c_observe(sim: Simulator, graph: AgentGraph, agent: str,
                 wave_norm: float = WAVE_NORM) -> Observation:
    own = normalize_wave(sim.measure_wave(agent), wave_norm)
    nbrs = [normalize_wave(sim.measure_wave(j), wave_norm) for j in graph.neighbors(agent)]
    return Observation(own, np.concatenate(nbrs) if nbrs else np.zeros(0))


def ma2c_observe(sim: Simulator, graph: AgentGraph, agent: str, alpha: float,
                 last_policies: dict, wave_norm: float = WAVE_NORM) -> Observation:
    """Own wave unscaled, neighbour waves times ``alpha``, neighbour fingerprints.

    ``last_policies`` maps agent id to its policy vector from the previous
    interaction.
    """
    own = normalize_wave(sim.measure_wave(agent), wave_norm)
    nb = graph.neighbors(agent)
    waves = [alpha * normalize_wave(sim.measure_wave(j), wave_norm) for j in nb]
    fps = [np.asarray(last_policies[j], dtype=float) for j in nb]
    return Observation(own,
                       np.concatenate(waves) if waves else np.zeros(0),
                       np.concatenate(fps) if fps else np.zeros(0))


def uniform_policy(n: int) -> np.ndarray:
    return np.full(n, 1.0 / n)


def one_hot(u: int, n: int) -> np.ndarray:
    v = np.zeros(n)
    v[u] = 1.0
    return v


# ---------------------------------------------------------------------------
# rewards (penalties: negated, normalised, clipped queue counts)

def local_reward(sim: Simulator, agent: str, norm: float = REWARD_NORM) -> float:
    return clip_reward(-sim.measure_queue(agent) / norm)


def global_average_reward(rewards: dict) -> float:
    return float(sum(rewards.values()) / len(rewards))


def spatial_reward(rewards: dict, graph: AgentGraph, agent: str, alpha: float) -> float:
    if not 0.0 <= alpha <= 1.0:
        raise ValueError("alpha must lie in [0, 1]")
    region = graph.local_region(agent)
    total = rewards[agent] + sum(alpha * rewards[j] for j in region if j != agent)
    return float(total / len(region))


# ---------------------------------------------------------------------------
# returns and losses

def n_step_returns(rewards, bootstrap_value: float, gamma: float) -> np.ndarray:
    """R_t = sum_{tau>=t} gamma^(tau-t) r_tau + gamma^(T-t) * bootstrap."""
    rewards = np.asarray(rewards, dtype=float)
    out = np.empty_like(rewards)
    acc = float(bootstrap_value)
    for t in range(len(rewards) - 1, -1, -1):
        acc = rewards[t] + gamma * acc
        out[t] = acc
    return out


def advantage(returns, values) -> np.ndarray:
    returns, values = np.asarray(returns, dtype=float), np.asarray(values, dtype=float)
    if returns.shape != values.shape:
        raise ValueError("returns and values differ in shape")
    return returns - values


def entropy(probs: np.ndarray) -> np.ndarray:
    logp = np.log(np.clip(probs, 1e-300, None))
    return -np.sum(probs * logp, axis=-1)


def actor_loss(logits: np.ndarray, actions, advantages, beta: float) -> tuple:
    """Policy-gradient loss and its gradient w.r.t. the logits.

    loss = -sum_t log pi(u_t) A_t - beta * sum_t H(pi_t); the advantages are
    constants.  Minimising it ascends the expected return and the entropy.
    """
    logits = np.atleast_2d(logits)
    actions = np.asarray(actions, dtype=int)
    adv = np.asarray(advantages, dtype=float)
    logp = log_softmax(logits)
    p = np.exp(logp)
    T = logits.shape[0]
    taken = logp[np.arange(T), actions]
    H = -np.sum(p * logp, axis=1)
    loss = float(-np.sum(taken * adv) - beta * np.sum(H))
    d = p * adv[:, None]
    d[np.arange(T), actions] -= adv
    d += beta * p * (logp + H[:, None])
    return loss, d


def critic_loss(returns, values) -> tuple:
    """Half sum of squared errors and its gradient w.r.t. the values."""
    err = np.asarray(values, dtype=float) - np.asarray(returns, dtype=float)
    return float(0.5 * np.sum(err * err)), err


# ---------------------------------------------------------------------------
# action selection

def act(actor: RecurrentNet, obs: Observation, carry, rng) -> tuple:
    """Sample from the actor's softmax; returns (action, log-prob, carry, policy)."""
    logits, carry = actor.step(obs.net_input, obs.fingerprints, carry)
    probs = softmax(logits)
    u = int(rng.choice(len(probs), p=probs))
    return u, float(np.log(probs[u])), carry, probs


def phase_waves(sim: Simulator, agent: str) -> np.ndarray:
    wave = sim.measure_wave(agent)
    lanes = sim.network.incoming_lanes(agent)
    out = []
    for ph in sim.controllers[agent].phases:
        served = ph.served_lanes
        out.append(sum(w for w, l in zip(wave, lanes) if l in served))
    return np.array(out)


def greedy_action(sim: Simulator, agent: str) -> int:
    """Phase with the largest summed wave over its served lanes (lowest id on ties)."""
    return int(np.argmax(phase_waves(sim, agent)))


# ---------------------------------------------------------------------------
# independent Q-learning baselines

class LinearQ:
    """Per-action linear regressor Q(s, u) = w_u . s + b_u."""

    kind = "iql_lr"

    def __init__(self, n_in: int, n_actions: int, learning_rate: float = 0.01):
        self.params = {"w": np.zeros((n_actions, n_in)), "b": np.zeros(n_actions)}
        self.learning_rate = learning_rate

    def q_values(self, s: np.ndarray) -> np.ndarray:
        return self.params["w"] @ s + self.params["b"]

    def update(self, s, u, r, s_next, gamma: float, done: bool = False) -> float:
        """One stochastic least-squares step toward the TD target; returns the TD error."""
        target = r if done else r + gamma * float(np.max(self.q_values(s_next)))
        td = target - float(self.q_values(s)[u])
        self.params["w"][u] += self.learning_rate * td * s
        self.params["b"][u] += self.learning_rate * td
        return td


class DeepQ:
    """Two hidden relu layers, one output per action, online TD(0) updates."""

    kind = "iql_dnn"

    def __init__(self, n_in: int, n_actions: int, hidden: int = 64, learning_rate: float = 5e-4,
                 rng=None, grad_cap: float = GRAD_CAP):
        from .neuralcore import orthogonal_init
        rng = np.random.default_rng(rng)
        self.params = {
            "w1": orthogonal_init(hidden, n_in, 1.0, rng), "b1": np.zeros(hidden),
            "w2": orthogonal_init(hidden, hidden, 1.0, rng), "b2": np.zeros(hidden),
            "w3": orthogonal_init(n_actions, hidden, 1.0, rng), "b3": np.zeros(n_actions),
        }
        self.opt = RMSProp(self.params, learning_rate)
        self.grad_cap = grad_cap

    def _forward(self, s):
        p = self.params
        a1 = p["w1"] @ s + p["b1"]
        h1 = np.maximum(a1, 0.0)
        a2 = p["w2"] @ h1 + p["b2"]
        h2 = np.maximum(a2, 0.0)
        return p["w3"] @ h2 + p["b3"], (s, a1, h1, a2, h2)

    def q_values(self, s: np.ndarray) -> np.ndarray:
        return self._forward(s)[0]

    def gradients(self, s, u, target) -> tuple:
        """Gradient of 0.5 * (Q(s,u) - target)^2."""
        q, (x, a1, h1, a2, h2) = self._forward(s)
        p = self.params
        td = target - q[u]
        dq = np.zeros_like(q)
        dq[u] = -td
        g = {"w3": np.outer(dq, h2), "b3": dq}
        d2 = (p["w3"].T @ dq) * (a2 > 0)
        g["w2"], g["b2"] = np.outer(d2, h1), d2
        d1 = (p["w2"].T @ d2) * (a1 > 0)
        g["w1"], g["b1"] = np.outer(d1, x), d1
        return g, float(td)

    def update(self, s, u, r, s_next, gamma: float, done: bool = False) -> float:
        target = r if done else r + gamma * float(np.max(self.q_values(s_next)))
        g, td = self.gradients(s, u, target)
        g, _ = cap_gradients(g, self.grad_cap)
        self.opt.update(self.params, g)
        return td


def iql_update(q, transition, gamma: float) -> float:
    s, u, r, s_next = transition[:4]
    done = transition[4] if len(transition) > 4 else False
    return q.update(s, u, r, s_next, gamma, done)


def epsilon_greedy(q_values: np.ndarray, epsilon: float, rng) -> int:
    if not 0.0 <= epsilon <= 1.0:
        raise ValueError("epsilon must lie in [0, 1]")
    if rng.random() < epsilon:
        return int(rng.integers(len(q_values)))
    return int(np.argmax(q_values))
