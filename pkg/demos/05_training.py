"""Train MA2C briefly on a 2x2 grid and compare it with Greedy on the test seeds."""

from __future__ import annotations

from atsc_marl.evalcli import evaluate, greedy_report
from atsc_marl.trainer import TrainConfig, build_network, success_criterion, train

config = TrainConfig(algorithm="ma2c", grid="2x2", scenario="240/500", ts=1800, episodes=10)
network = build_network(config)


def progress(ep, frag):
    print(f"episode {ep:2d} avg queue {frag.episode_avg_queue[0]:7.2f}")


learners, record = train(config, network, progress=progress)
print("learning steps:", record.n_learning_steps, "success:", success_criterion(record))

seeds = config.test_seeds[:3]
ma2c = evaluate(learners, config, network, test_seeds=seeds)
greedy = greedy_report(config, network, test_seeds=seeds)
print(f"MA2C   {ma2c.mean:.2f} +/- {ma2c.std:.2f}")
print(f"Greedy {greedy.mean:.2f} +/- {greedy.std:.2f}")
