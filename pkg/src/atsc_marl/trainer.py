"""Episode orchestration, learning steps and training protocols."""

from __future__ import annotations

import time
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import agents as ag
from .microsim import Simulator, make_schedule, parse_scenario
from .netmodel import TrafficNetwork, build_grid, load_network, parse_grid_spec, parse_network
from .neuralcore import RMSProp, RecurrentNet, cap_gradients

ALGORITHMS = ("ma2c", "ia2c", "iql_lr", "iql_dnn", "greedy")
DEFAULT_TEST_SEEDS = (10400, 20200, 31000, 3101, 122, 42, 20200, 33333)
DEFAULT_STEP_LIMIT = 1_000_800


class ConfigError(ValueError):
    pass


@dataclass
class TrainConfig:
    algorithm: str = "ma2c"
    grid: str = "3x3"
    net_file: str | None = None
    net_text: str | None = None  # inline network description, wins over grid/net_file
    lane_length: float = 200.0
    phases_per_node: int = 2
    scenario: str = "2000/2000"
    ts: int = 3600
    dt: int = 5
    ty: int = 2
    gamma: float = 0.99
    alpha: float = 0.9
    beta: float = 0.01
    eta_theta: float = 5e-4
    eta_psi: float = 2.5e-4
    batch: int = 40
    episodes: int = 100
    total_sim_seconds: int | None = None  # overrides episodes when set
    seed_mode: str = "pseudo_random"
    train_seed: int = 42
    test_seeds: tuple = DEFAULT_TEST_SEEDS
    reward_norm: float = ag.REWARD_NORM
    wave_norm: float = ag.WAVE_NORM
    grad_cap: float = 40.0
    rms_decay: float = 0.99
    rms_eps: float = 1e-5
    neighbor_threshold: int = 1
    observe_last_action: bool = True  # own previous action joins the actor/critic input
    iql_lr_rate: float = 0.01
    iql_dnn_rate: float = 5e-4
    eps_start: float = 1.0
    eps_end: float = 0.01

    def __post_init__(self):
        self.test_seeds = tuple(int(s) for s in self.test_seeds)
        self.validate()

    def validate(self):
        if self.algorithm not in ALGORITHMS:
            raise ConfigError(f"unknown algorithm {self.algorithm!r}")
        if self.seed_mode not in ("pseudo_random", "fully_random"):
            raise ConfigError(f"unknown seed_mode {self.seed_mode!r}")
        if self.dt <= 0 or self.ts % self.dt:
            raise ConfigError("dt must divide ts")
        if self.batch <= 0 or (self.ts // self.dt) % self.batch:
            raise ConfigError("batch must divide ts/dt")
        if not 0 <= self.alpha <= 1 or not 0 <= self.gamma <= 1:
            raise ConfigError("alpha and gamma must lie in [0, 1]")
        if self.beta < 0:
            raise ConfigError("beta must be >= 0")
        try:
            count, window = parse_scenario(self.scenario)
        except (ValueError, TypeError) as exc:
            raise ConfigError(str(exc)) from exc
        if count < 0 or window < 1 or window > self.ts:
            raise ConfigError(f"scenario {self.scenario!r} does not fit the episode")

    @property
    def interactions_per_episode(self) -> int:
        return self.ts // self.dt

    @property
    def learning_steps_per_episode(self) -> int:
        if self.algorithm == "greedy":
            return 0
        return self.interactions_per_episode // self.batch

    @property
    def n_episodes(self) -> int:
        if self.total_sim_seconds is not None:
            return self.total_sim_seconds // self.ts
        return self.episodes

    def to_dict(self) -> dict:
        d = asdict(self)
        d["test_seeds"] = list(self.test_seeds)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown config keys {sorted(unknown)}")
        return cls(**d)

    def replace(self, **kw) -> "TrainConfig":
        d = self.to_dict()
        d.update(kw)
        return TrainConfig.from_dict(d)


def episodes_for_step_limit(limit: int = DEFAULT_STEP_LIMIT, ts: int = 3600) -> int:
    return limit // ts


def build_network(config: TrainConfig) -> TrafficNetwork:
    if config.net_text:
        return parse_network(config.net_text, config.neighbor_threshold)
    if config.net_file:
        return load_network(config.net_file, config.neighbor_threshold)
    rows, cols = parse_grid_spec(config.grid)
    return build_grid(rows, cols, config.lane_length, config.phases_per_node,
                      neighbor_threshold=config.neighbor_threshold)


# ---------------------------------------------------------------------------
# per-agent learners

class A2CAgent:
    """Separate recurrent actor and critic for one intersection."""

    def __init__(self, n_in: int, n_actions: int, n_fp: int, config: TrainConfig, rng):
        self.actor = RecurrentNet(n_in, n_actions, n_fp, rng=rng)
        self.critic = RecurrentNet(n_in, 1, n_fp, rng=rng)
        self.actor_opt = RMSProp(self.actor.params, config.eta_theta, config.rms_decay,
                                 config.rms_eps)
        self.critic_opt = RMSProp(self.critic.params, config.eta_psi, config.rms_decay,
                                  config.rms_eps)
        self.n_actions = n_actions
        self.refresh_snapshot()
        self.reset()

    def refresh_snapshot(self):
        self.actor_snapshot = self.actor.copy_params()
        self.critic_snapshot = self.critic.copy_params()

    def reset(self):
        self.actor_carry = self.actor.initial_carry()
        self.batch_actor_carry = self.actor_carry
        self.batch_critic_carry = self.critic.initial_carry()
        self.buffer = []


class QAgent:
    def __init__(self, model):
        self.model = model
        self.prev_wave = None
        self.pending = None  # (state, action, reward) awaiting its next state
        self.td_sq = []

    def reset(self):
        self.prev_wave = None
        self.pending = None


@dataclass
class ExperienceBatch:
    waves: np.ndarray        # (T, n_in)
    fingerprints: np.ndarray | None
    actions: np.ndarray
    rewards: np.ndarray
    done: bool
    bootstrap_wave: np.ndarray | None = None
    bootstrap_fingerprint: np.ndarray | None = None

    def __len__(self):
        return len(self.actions)


def make_learners(config: TrainConfig, network: TrafficNetwork, seed: int | None = None) -> dict:
    """Fresh per-agent learners; parameter init depends only on ``seed``."""
    seed = config.train_seed if seed is None else seed
    graph = network.agent_graph
    children = np.random.SeedSequence([seed, 0]).spawn(len(network.agents))
    out = {}
    for a, ss in zip(network.agents, children):
        rng = np.random.default_rng(ss)
        n_act = len(network.phases(a))
        nb = graph.neighbors(a)
        n_in = len(network.incoming_lanes(a)) + sum(len(network.incoming_lanes(j)) for j in nb)
        if config.algorithm in ("ma2c", "ia2c"):
            n_fp = sum(len(network.phases(j)) for j in nb) if config.algorithm == "ma2c" else 0
            extra = n_act if config.observe_last_action else 0
            out[a] = A2CAgent(n_in + extra, n_act, n_fp, config, rng)
        elif config.algorithm == "iql_lr":
            out[a] = QAgent(ag.LinearQ(2 * n_in, n_act, config.iql_lr_rate))
        elif config.algorithm == "iql_dnn":
            out[a] = QAgent(ag.DeepQ(2 * n_in, n_act, learning_rate=config.iql_dnn_rate,
                                     rng=rng, grad_cap=config.grad_cap))
        else:
            out[a] = None
    return out


# ---------------------------------------------------------------------------
# records

@dataclass
class RunRecord:
    algorithm: str
    agents: list
    config: dict = field(default_factory=dict)
    actor_loss: list = field(default_factory=list)        # [step][agent]
    critic_loss: list = field(default_factory=list)
    actor_grad_norm: list = field(default_factory=list)   # after capping
    critic_grad_norm: list = field(default_factory=list)
    actor_grad_norm_raw: list = field(default_factory=list)
    critic_grad_norm_raw: list = field(default_factory=list)
    state_min: list = field(default_factory=list)
    state_max: list = field(default_factory=list)
    reward_min: list = field(default_factory=list)
    reward_max: list = field(default_factory=list)
    step_episode: list = field(default_factory=list)
    episode_avg_queue: list = field(default_factory=list)
    episode_seeds: list = field(default_factory=list)
    episode_interactions: list = field(default_factory=list)
    episode_learning_steps: list = field(default_factory=list)
    running_vehicles: list = field(default_factory=list)  # [episode][tick]
    wall_clock: dict = field(default_factory=dict)        # not serialised

    @property
    def n_learning_steps(self) -> int:
        return len(self.actor_loss)

    def extend(self, other: "RunRecord") -> None:
        for f in fields(self):
            if f.name in ("algorithm", "agents", "config", "wall_clock"):
                continue
            getattr(self, f.name).extend(getattr(other, f.name))

    def to_dict(self) -> dict:
        d = asdict(self)
        d.pop("wall_clock")
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RunRecord":
        return cls(**d)


def _batch_from_buffer(buf, done, boot):
    waves = np.array([b[0] for b in buf])
    fps = np.array([b[1] for b in buf]) if buf[0][1].size else None
    bw, bf = (None, None) if boot is None else boot
    return ExperienceBatch(waves, fps, np.array([b[2] for b in buf]),
                           np.array([b[3] for b in buf]), done, bw, bf)


def learning_step(agent: A2CAgent, batch: ExperienceBatch, config: TrainConfig,
                  instrument=None) -> dict:
    """One actor and one critic update from a batch; returns diagnostics.

    Values and the bootstrap come from the snapshot parameters taken after
    the previous learning step.  The critic's carry is advanced over the
    batch but not over the bootstrap observation.
    """
    actor, critic = agent.actor, agent.critic
    X, F = batch.waves, batch.fingerprints

    v_snap, _, c_end_snap = critic.forward(X, F, agent.batch_critic_carry,
                                           params=agent.critic_snapshot)
    v_snap = v_snap[:, 0]
    if batch.done or batch.bootstrap_wave is None:
        boot = 0.0
    else:
        bf = batch.bootstrap_fingerprint if critic.n_fp else None
        boot = float(critic.step(batch.bootstrap_wave, bf, c_end_snap,
                                 params=agent.critic_snapshot)[0][0])
    returns = ag.n_step_returns(batch.rewards, boot, config.gamma)
    adv = ag.advantage(returns, v_snap)
    if instrument is not None:
        instrument(agent=agent, values=v_snap, bootstrap=boot, returns=returns)

    v_live, cache_c, c_end = critic.forward(X, F, agent.batch_critic_carry)
    closs, dv = ag.critic_loss(returns, v_live[:, 0])
    gc = critic.backward(cache_c, dv[:, None])
    gc, raw_c = cap_gradients(gc, config.grad_cap)

    logits, cache_a, _ = actor.forward(X, F, agent.batch_actor_carry)
    aloss, dlogits = ag.actor_loss(logits, batch.actions, adv, config.beta)
    ga = actor.backward(cache_a, dlogits)
    ga, raw_a = cap_gradients(ga, config.grad_cap)

    agent.critic_opt.update(critic.params, gc)
    agent.actor_opt.update(actor.params, ga)
    agent.refresh_snapshot()
    agent.batch_critic_carry = c_end
    agent.batch_actor_carry = agent.actor_carry

    states = X if F is None else np.concatenate([X, F], axis=1)
    return dict(actor_loss=aloss, critic_loss=closs,
                actor_grad_norm=min(raw_a, config.grad_cap),
                critic_grad_norm=min(raw_c, config.grad_cap),
                actor_grad_norm_raw=raw_a, critic_grad_norm_raw=raw_c,
                state_min=float(states.min()), state_max=float(states.max()),
                reward_min=float(batch.rewards.min()), reward_max=float(batch.rewards.max()))


# ---------------------------------------------------------------------------
# episodes

class _EpisodeLog:
    def __init__(self, agents):
        self.agents = agents
        self.steps = []  # list of {agent: diag}

    def push(self, diags: dict):
        self.steps.append(diags)

    def into(self, record: RunRecord, episode: int):
        keys = ("actor_loss", "critic_loss", "actor_grad_norm", "critic_grad_norm",
                "actor_grad_norm_raw", "critic_grad_norm_raw", "state_min", "state_max",
                "reward_min", "reward_max")
        for diags in self.steps:
            for k in keys:
                getattr(record, k).append([float(diags[a][k]) for a in self.agents])
            record.step_episode.append(episode)


def _epsilon(config: TrainConfig, global_interaction: int) -> float:
    horizon = max(1, config.n_episodes * config.interactions_per_episode // 2)
    frac = min(1.0, global_interaction / horizon)
    return config.eps_start + frac * (config.eps_end - config.eps_start)


def run_episode(config: TrainConfig, network: TrafficNetwork, learners: dict, seed: int,
                action_seed, learn: bool = True, episode: int = 0,
                global_interaction: int = 0, instrument=None) -> RunRecord:
    """Simulate one episode of ``config.ts`` seconds, learning when ``learn``.

    ``seed`` drives the insertion schedule; ``action_seed`` drives action
    sampling.  Returns a record fragment for this episode.
    """
    algo = config.algorithm
    agents_ = list(network.agents)
    graph = network.agent_graph
    sim = Simulator(network, make_schedule(network, config.scenario, seed, config.ts),
                    config.ty)
    rngs = [np.random.default_rng(s)
            for s in np.random.SeedSequence(action_seed).spawn(len(agents_))]
    rng_of = dict(zip(agents_, rngs))
    for l in learners.values():
        if l is not None:
            l.reset()
    last_pol = {a: ag.uniform_policy(len(network.phases(a))) for a in agents_}
    n_int = config.interactions_per_episode
    log = _EpisodeLog(agents_)
    queues = np.empty(n_int)
    running = []
    is_a2c = algo in ("ma2c", "ia2c")

    last_u = {a: 0 for a in agents_}  # the initial active phase

    def observe(a):
        if algo == "ma2c":
            o = ag.ma2c_observe(sim, graph, a, config.alpha, last_pol, config.wave_norm)
        else:
            o = ag.ia2c_observe(sim, graph, a, config.wave_norm)
        if is_a2c and config.observe_last_action:
            o.last_action = ag.one_hot(last_u[a], len(network.phases(a)))
        return o

    for k in range(n_int):
        if algo == "greedy":
            actions = {a: ag.greedy_action(sim, a) for a in agents_}
        else:
            obs = {a: observe(a) for a in agents_}
            if is_a2c and learn and len(learners[agents_[0]].buffer) == config.batch:
                diags = {}
                for a in agents_:
                    lr = learners[a]
                    batch = _batch_from_buffer(lr.buffer, False,
                                               (obs[a].net_input, obs[a].fingerprints))
                    diags[a] = learning_step(lr, batch, config, instrument)
                    lr.buffer = []
                log.push(diags)
            actions = {}
            new_pol = {}
            for a in agents_:
                lr = learners[a]
                if is_a2c:
                    u, _, lr.actor_carry, probs = ag.act(lr.actor, obs[a], lr.actor_carry,
                                                         rng_of[a])
                    new_pol[a] = probs
                    if learn:
                        lr.buffer.append((obs[a].net_input, obs[a].fingerprints, u))
                else:
                    w = obs[a].wave_input
                    s = np.concatenate([lr.prev_wave if lr.prev_wave is not None
                                        else np.zeros_like(w), w])
                    lr.prev_wave = w
                    if learn and lr.pending is not None:
                        ps, pu, pr = lr.pending
                        td = ag.iql_update(lr.model, (ps, pu, pr, s), config.gamma)
                        lr.td_sq.append(td * td)
                    eps = _epsilon(config, global_interaction + k) if learn else 0.0
                    u = ag.epsilon_greedy(lr.model.q_values(s), eps, rng_of[a])
                    lr.pending = (s, u, None)
                actions[a] = u
            if algo == "ma2c":
                last_pol = new_pol
            last_u = actions
        for a in agents_:
            sim.apply_action(a, actions[a])
        for _ in range(config.dt):
            sim.tick()
            running.append(sim.running_vehicles())
        queues[k] = sum(sim.measure_queue(a) for a in agents_)
        if algo == "greedy":
            continue
        local = {a: ag.local_reward(sim, a, config.reward_norm) for a in agents_}
        if algo == "ma2c":
            rew = {a: ag.spatial_reward(local, graph, a, config.alpha) for a in agents_}
        else:
            g = ag.global_average_reward(local)
            rew = {a: g for a in agents_}
        for a in agents_:
            lr = learners[a]
            if is_a2c:
                if learn:
                    lr.buffer[-1] = lr.buffer[-1] + (rew[a],)
            else:
                s, u, _ = lr.pending
                lr.pending = (s, u, rew[a])
        if not is_a2c and learn and (k + 1) % config.batch == 0:
            diags = {}
            for a in agents_:
                lr = learners[a]
                if k + 1 == n_int and lr.pending is not None:
                    ps, pu, pr = lr.pending
                    td = ag.iql_update(lr.model, (ps, pu, pr, ps, True), config.gamma)
                    lr.td_sq.append(td * td)
                    lr.pending = None
                sq = np.array(lr.td_sq) if lr.td_sq else np.zeros(1)
                w = lr.prev_wave if lr.prev_wave is not None else np.zeros(1)
                diags[a] = dict(actor_loss=0.0, critic_loss=float(0.5 * sq.mean()),
                                actor_grad_norm=0.0, critic_grad_norm=0.0,
                                actor_grad_norm_raw=0.0, critic_grad_norm_raw=0.0,
                                state_min=float(w.min()), state_max=float(w.max()),
                                reward_min=float(rew[a]), reward_max=float(rew[a]))
                lr.td_sq = []
            log.push(diags)

    if is_a2c and learn and learners[agents_[0]].buffer:
        diags = {}
        for a in agents_:
            lr = learners[a]
            diags[a] = learning_step(lr, _batch_from_buffer(lr.buffer, True, None), config,
                                     instrument)
            lr.buffer = []
        log.push(diags)

    rec = RunRecord(algo, agents_)
    log.into(rec, episode)
    rec.episode_avg_queue.append(float(queues.mean()))
    rec.episode_seeds.append(int(seed))
    rec.episode_interactions.append(n_int)
    rec.episode_learning_steps.append(len(log.steps))
    rec.running_vehicles.append(running)
    return rec


def episode_seeds(config: TrainConfig, n: int) -> list:
    """Insertion seeds for ``n`` training episodes under the configured seed mode."""
    if config.seed_mode == "pseudo_random":
        return [config.train_seed] * n
    rng = np.random.default_rng([config.train_seed, 2])
    return [int(s) for s in rng.integers(0, 2**31 - 1, size=n)]


def train(config: TrainConfig, network: TrafficNetwork | None = None, progress=None,
          instrument=None) -> tuple:
    """Train for ``config.n_episodes`` episodes; returns ``(learners, RunRecord)``."""
    network = build_network(config) if network is None else network
    learners = make_learners(config, network)
    record = RunRecord(config.algorithm, list(network.agents), config.to_dict())
    seeds = episode_seeds(config, config.n_episodes)
    t0 = time.perf_counter()
    for ep, seed in enumerate(seeds):
        frag = run_episode(config, network, learners, seed, [config.train_seed, 1, ep],
                           learn=config.algorithm != "greedy", episode=ep,
                           global_interaction=ep * config.interactions_per_episode,
                           instrument=instrument)
        record.extend(frag)
        if progress is not None:
            progress(ep, frag)
    record.wall_clock = {"seconds": time.perf_counter() - t0}
    return learners, record


def success_criterion(record: RunRecord, threshold: float = 0.8) -> bool:
    """Final-quartile mean average queue below ``threshold`` times the first quartile's."""
    curve = np.asarray(record.episode_avg_queue, dtype=float)
    if curve.size < 2:
        return False
    q = max(1, curve.size // 4)
    first, last = curve[:q].mean(), curve[-q:].mean()
    return bool(first > 0 and last < threshold * first)
