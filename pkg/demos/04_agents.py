"""Rewards, n-step returns, advantages and the Greedy baseline."""

from __future__ import annotations

import numpy as np

from atsc_marl import agents as ag
from atsc_marl.microsim import Simulator
from atsc_marl.netmodel import build_grid

rewards = np.array([-0.2, -0.1, -0.4, 0.0])
R = ag.n_step_returns(rewards, bootstrap_value=-1.0, gamma=0.99)
V = np.array([-1.2, -1.0, -0.9, -1.1])
print("returns", np.round(R, 4))
print("advantages", np.round(ag.advantage(R, V), 4))

loss, dlogits = ag.actor_loss(np.zeros((4, 2)), [0, 1, 1, 0], ag.advantage(R, V), beta=0.01)
print("actor loss", round(loss, 4), "critic loss", round(ag.critic_loss(R, V)[0], 4))

net = build_grid(1, 1)
sim = Simulator(net)
ns = ["sN0>n0_0", "n0_0>sS0"]
for _ in range(5):
    sim.place_vehicle(ns, position=None)
print("phase waves", ag.phase_waves(sim, "n0_0"), "greedy picks", ag.greedy_action(sim, "n0_0"))

graph = build_grid(2, 2).agent_graph
local = {a: -float(i) for i, a in enumerate(graph.vertices)}
print("spatial reward of n0_0 (alpha=0.9):", ag.spatial_reward(local, graph, "n0_0", 0.9))
