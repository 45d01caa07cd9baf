import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from atsc_marl import agents as ag
from atsc_marl.microsim import Simulator
from atsc_marl.neuralcore import RecurrentNet, softmax
from atsc_marl.netmodel import AgentGraph, build_grid
from oracles import brute_force_returns, relative_error

rewards_st = arrays(float, st.integers(1, 40), elements=st.floats(-2, 2))


@pytest.fixture(scope="module")
def grid3():
    return build_grid(3, 3, 200, 2, 0)


# rewards ---------------------------------------------------------------

def test_local_reward_examples(grid3):
    sim = Simulator(grid3)
    assert ag.local_reward(sim, "n1_1") == 0.0
    lanes = grid3.incoming_lanes("n1_1")
    for lane, n in zip(lanes, (2, 1, 0)):
        for _ in range(n):
            sim.place_vehicle([lane, grid3.successors(lane)[0]], position=None)
    assert sim.measure_queue("n1_1") == 3
    assert ag.local_reward(sim, "n1_1", norm=1.0) == -2.0
    assert ag.local_reward(sim, "n1_1", norm=25.0) == pytest.approx(-3 / 25)


def test_global_average_reward():
    assert ag.global_average_reward({"a": 0.0, "b": 0.0}) == 0.0
    assert ag.global_average_reward({"a": 4.0, "b": 0.0}) == 2.0
    assert ag.global_average_reward({"a": -1.5}) == -1.5


def test_spatial_reward_examples():
    g = AgentGraph(("a", "b", "c"), frozenset({frozenset("ab"), frozenset("ac")}))
    r = {"a": 4.0, "b": 2.0, "c": 2.0}
    assert ag.spatial_reward(r, g, "a", 0.9) == pytest.approx((4 + 1.8 + 1.8) / 3)
    assert ag.spatial_reward(r, g, "a", 0.0) == pytest.approx(4 / 3)
    lone = AgentGraph(("a",), frozenset())
    assert ag.spatial_reward({"a": -0.7}, lone, "a", 0.9) == -0.7
    with pytest.raises(ValueError):
        ag.spatial_reward(r, g, "a", 1.5)


@settings(max_examples=40)
@given(st.floats(0, 1), st.floats(-2, 0), st.floats(0, 1))
def test_spatial_reward_monotone_in_neighbor(alpha, r_nb, delta):
    g = AgentGraph(("a", "b"), frozenset({frozenset("ab")}))
    base = ag.spatial_reward({"a": -1.0, "b": r_nb}, g, "a", alpha)
    # a neighbour's queue shrinking raises its reward, never lowering ours
    better = ag.spatial_reward({"a": -1.0, "b": r_nb + delta}, g, "a", alpha)
    assert better >= base - 1e-12


# returns, advantages, losses ------------------------------------------

def test_returns_examples():
    r = np.random.default_rng(0).normal(size=40)
    assert np.array_equal(ag.n_step_returns(r, 5.0, 0.0), r)
    ones = ag.n_step_returns(np.ones(40), 0.0, 0.99)
    assert ones[39] == 1.0
    assert ones[0] == pytest.approx((1 - 0.99 ** 40) / 0.01)


@settings(max_examples=200)
@given(rewards_st, st.floats(-100, 100), st.sampled_from([0.0, 0.5, 0.99, 1.0]))
def test_returns_match_brute_force(r, boot, gamma):
    got = ag.n_step_returns(r, boot, gamma)
    assert np.max(np.abs(got - brute_force_returns(r, boot, gamma))) <= 1e-12 * max(1, abs(boot) * 40)


def test_advantage():
    assert np.array_equal(ag.advantage([2, 1], [1, 1]), [1, 0])
    assert not ag.advantage([3.0, 4.0], [3.0, 4.0]).any()
    with pytest.raises(ValueError):
        ag.advantage([1, 2], [1])


def test_actor_loss_examples():
    logits = np.zeros((40, 2))
    loss, d = ag.actor_loss(logits, np.zeros(40, int), np.zeros(40), 0.0)
    assert loss == 0.0 and not d.any()
    loss, _ = ag.actor_loss(logits, np.zeros(40, int), np.zeros(40), 0.01)
    assert loss == pytest.approx(-0.01 * 40 * math.log(2))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_actor_loss_gradient(seed):
    rng = np.random.default_rng(seed)
    T, n = int(rng.integers(1, 6)), int(rng.integers(2, 5))
    z = rng.normal(size=(T, n))
    u = rng.integers(n, size=T)
    A = rng.normal(size=T)
    beta = float(rng.random())
    _, d = ag.actor_loss(z, u, A, beta)
    num = np.zeros_like(z)
    for idx in np.ndindex(z.shape):
        zp, zm = z.copy(), z.copy()
        zp[idx] += 1e-6
        zm[idx] -= 1e-6
        num[idx] = (ag.actor_loss(zp, u, A, beta)[0] - ag.actor_loss(zm, u, A, beta)[0]) / 2e-6
    assert relative_error(num, d) < 1e-6


def test_critic_loss():
    assert ag.critic_loss([1.0, 2.0], [1.0, 2.0])[0] == 0.0
    loss, d = ag.critic_loss([1.0, 0.0], [0.0, 0.0])
    assert loss == 0.5
    assert np.array_equal(d, [-1.0, 0.0])
    R, V = np.array([0.3, -1.2]), np.array([0.1, 0.4])
    num = [(ag.critic_loss(R, V + 1e-6 * e)[0] - ag.critic_loss(R, V - 1e-6 * e)[0]) / 2e-6
           for e in np.eye(2)]
    assert np.allclose(num, V - R)


def test_advantages_are_constants_for_actor():
    # the actor gradient depends on the critic only through the numeric advantages
    rng = np.random.default_rng(4)
    actor = RecurrentNet(4, 2, rng=1)
    X = rng.random((5, 4))
    logits, cache, _ = actor.forward(X, None, actor.initial_carry())
    u, A = np.array([0, 1, 1, 0, 1]), rng.normal(size=5)
    g1 = actor.backward(cache, ag.actor_loss(logits, u, A, 0.01)[1])
    critic = RecurrentNet(4, 1, rng=2)
    critic.params["out_b"] += 3.0  # perturbing the critic changes nothing here
    g2 = actor.backward(cache, ag.actor_loss(logits, u, A, 0.01)[1])
    assert all(np.array_equal(g1[k], g2[k]) for k in g1)


# observations ----------------------------------------------------------

def test_ia2c_observation_shapes(grid3):
    sim = Simulator(grid3)
    g = grid3.agent_graph
    obs = ag.ia2c_observe(sim, g, "n0_0")
    assert len(obs.own_wave) == 4
    assert len(obs.neighbor_waves) == 4 * len(g.neighbors("n0_0"))
    assert obs.fingerprints.size == 0
    single = build_grid(1, 1, 200, 2, 0)
    o1 = ag.ia2c_observe(Simulator(single), single.agent_graph, "n0_0")
    assert o1.wave_input.shape == (4,)


def test_ma2c_observation(grid3):
    sim = Simulator(grid3)
    g = grid3.agent_graph
    lane = grid3.incoming_lanes("n0_1")[0]
    for _ in range(10):
        sim.place_vehicle([lane, grid3.successors(lane)[0]], position=None)
    pols = {a: ag.uniform_policy(2) for a in grid3.agents}
    obs = ag.ma2c_observe(sim, g, "n0_0", 0.9, pols)
    nb = g.neighbors("n0_0")
    k = nb.index("n0_1")
    block = obs.neighbor_waves[4 * k:4 * (k + 1)]
    assert block.max() == pytest.approx(0.9 * 2.0)  # 10 vehicles / 5 clipped to 2
    assert ag.ma2c_observe(sim, g, "n0_0", 0.0, pols).neighbor_waves.max() == 0.0
    fp = obs.fingerprints.reshape(len(nb), 2)
    assert np.allclose(fp.sum(axis=1), 1.0)
    single = build_grid(1, 1, 200, 2, 0)
    lone = ag.ma2c_observe(Simulator(single), single.agent_graph, "n0_0", 0.9, {})
    assert lone.fingerprints.size == 0 and lone.neighbor_waves.size == 0


def test_observation_clipped_range(grid3):
    sim = Simulator(grid3)
    lane = grid3.incoming_lanes("n1_1")[2]
    for _ in range(20):
        sim.place_vehicle([lane, grid3.successors(lane)[0]], position=None)
    obs = ag.ia2c_observe(sim, grid3.agent_graph, "n1_1")
    assert obs.own_wave.max() == 2.0 and obs.own_wave.min() >= 0.0


def test_net_input_appends_last_action():
    o = ag.Observation(np.ones(2), np.zeros(3), last_action=ag.one_hot(1, 2))
    assert o.net_input.tolist() == [1, 1, 0, 0, 0, 0, 1]


# action selection ------------------------------------------------------

def test_act_deterministic_policy():
    net = RecurrentNet(2, 3, rng=0)
    net.params["out_w"][:] = 0.0
    net.params["out_b"][:] = [0.0, 60.0, 0.0]
    rng = np.random.default_rng(0)
    obs = ag.Observation(np.ones(2), np.zeros(0))
    for _ in range(20):
        u, logp, _, probs = ag.act(net, obs, net.initial_carry(), rng)
        assert u == 1 and abs(probs.sum() - 1) < 1e-12


def test_act_reproducible():
    net = RecurrentNet(2, 2, rng=0)
    obs = ag.Observation(np.ones(2), np.zeros(0))

    def seq(seed):
        rng = np.random.default_rng(seed)
        carry, out = net.initial_carry(), []
        for _ in range(15):
            u, _, carry, _ = ag.act(net, obs, carry, rng)
            out.append(u)
        return out

    assert seq(3) == seq(3)


def test_greedy_examples():
    net = build_grid(1, 1, 200, 2, 0)
    sim = Simulator(net)
    assert ag.greedy_action(sim, "n0_0") == 0
    for _ in range(2):
        sim.place_vehicle(["sN0>n0_0", "n0_0>sS0"], position=None)
        sim.place_vehicle(["sW0>n0_0", "n0_0>sE0"], position=None)
    assert ag.greedy_action(sim, "n0_0") == 0  # tie -> lowest id
    for _ in range(3):
        sim.place_vehicle(["sE0>n0_0", "n0_0>sW0"], position=None)
    assert ag.greedy_action(sim, "n0_0") == 1
    assert net.phases("n0_0")[1].permits("sE0>n0_0", "n0_0>sW0")


@settings(max_examples=30)
@given(arrays(float, 2, elements=st.floats(0, 10)), st.floats(0.1, 100))
def test_greedy_scale_invariant(waves, c):
    assert np.argmax(waves * c) == np.argmax(waves)


# Q-learning baselines --------------------------------------------------

def test_linear_q_moves_toward_reward():
    q = ag.LinearQ(1, 1, 0.1)
    s = np.ones(1)
    before = q.q_values(s)[0]
    ag.iql_update(q, (s, 0, 1.0, s), 0.0)
    assert before < q.q_values(s)[0] <= 1.0


def test_linear_q_bellman_fixed_point():
    q = ag.LinearQ(1, 1, 0.05)
    s = np.ones(1)
    for _ in range(20000):
        q.update(s, 0, 1.0, s, 0.5)
    assert q.q_values(s)[0] == pytest.approx(1.0 / (1 - 0.5), rel=1e-6)


def test_deep_q_reduces_td_error():
    q = ag.DeepQ(3, 2, hidden=8, learning_rate=1e-2, rng=0)
    s = np.array([0.2, 0.5, 1.0])
    first = abs(q.update(s, 1, 1.0, s, 0.0, done=True))
    for _ in range(300):
        last = abs(q.update(s, 1, 1.0, s, 0.0, done=True))
    assert last < 0.1 * first
    assert np.all(np.isfinite(q.q_values(s)))


def test_epsilon_greedy():
    rng = np.random.default_rng(0)
    counts = np.bincount([ag.epsilon_greedy(np.array([5.0, 0.0, 0.0]), 1.0, rng)
                          for _ in range(6000)], minlength=3)
    assert np.all(np.abs(counts / 6000 - 1 / 3) < 0.03)
    assert ag.epsilon_greedy(np.array([0.0, 2.0]), 0.0, rng) == 1
    with pytest.raises(ValueError):
        ag.epsilon_greedy(np.zeros(2), 1.5, rng)
