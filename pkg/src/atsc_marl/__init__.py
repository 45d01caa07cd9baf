"""Multi-agent reinforcement learning for adaptive traffic signal control.

Modules, bottom up: ``netmodel`` (road networks), ``microsim`` (point-queue
simulator), ``neuralcore`` (numpy LSTM actor/critic engine), ``agents``
(observations, rewards, losses, baselines), ``trainer`` (episodes and
learning) and ``evalcli`` (persistence, evaluation, export, CLI).
"""

__version__ = "0.1.0"
