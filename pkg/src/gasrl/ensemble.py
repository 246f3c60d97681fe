"""Filtered majority-vote ensembles of independently trained DQN agents.

1. Train ``n_agents`` with independent seeds.
2. Drop agents whose training curve never settled near its best rolling level.
3. Trade an action only when strictly more than ``threshold`` percent of the
   surviving agents agree on it; otherwise keep the previous ensemble position.
"""
from __future__ import annotations

import csv
import json
import logging
from collections import Counter
from dataclasses import asdict, dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .dqn import QNetwork, TrainConfig, TrainingCurve, train_many
from .env import ACTIONS, EnvConfig, EpisodeRecord, run_policy
from .features import FeatureMatrix, Observation

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class EnsembleConfig:
    n_agents: int = 10
    threshold: float = 50.0
    window: int = 200
    tolerance: float = 0.10
    tail_fraction: float = 0.25
    jobs: int = 1

    def __post_init__(self):
        if self.n_agents < 1:
            raise ValueError("n_agents must be >= 1")
        if not 0 <= self.threshold < 100:
            raise ValueError("threshold must be in [0, 100)")
        if self.window < 1:
            raise ValueError("window must be >= 1")
        if not 0 < self.tail_fraction <= 1:
            raise ValueError("tail_fraction must be in (0, 1]")
        if self.tolerance < 0:
            raise ValueError("tolerance must be >= 0")


@dataclass(frozen=True)
class Convergence:
    converged: bool
    tail_mean: float
    peak: float
    threshold: float


def rolling_mean(values, window: int) -> np.ndarray:
    """Trailing means; entry ``k`` averages ``values[k : k + window]``."""
    x = np.asarray(values, dtype=float)
    c = np.concatenate([[0.0], np.cumsum(x)])
    return (c[window:] - c[:-window]) / window


def assess_convergence(curve: TrainingCurve | Sequence[float], window: int = 200, tolerance: float = 0.10,
                       tail_fraction: float = 0.25) -> Convergence:
    """Converged iff the mean rolling-``window`` score over the last ``tail_fraction``
    of episodes is within ``tolerance * |peak|`` of the best rolling score."""
    scores = np.asarray(curve.sharpe if isinstance(curve, TrainingCurve) else curve, dtype=float)
    if len(scores) < window:
        raise ValueError(f"curve has {len(scores)} episodes, window needs {window}")
    roll = rolling_mean(scores, window)
    end_episode = np.arange(window - 1, len(scores))
    tail_start = len(scores) - max(1, int(round(tail_fraction * len(scores))))
    tail = roll[end_episode >= tail_start]
    if len(tail) == 0:
        tail = roll[-1:]
    peak = float(roll.max())
    tail_mean = float(tail.mean())
    bar = peak - tolerance * abs(peak)
    return Convergence(tail_mean >= bar, tail_mean, peak, bar)


@dataclass
class FilterResult:
    survivors: list[int]
    diagnostics: list[Convergence]
    fallback: bool

    def to_json(self, path: str | Path) -> Path:
        path = Path(path)
        data = {
            "survivors": self.survivors,
            "fallback": self.fallback,
            "agents": [dict(agent=i, **asdict(d)) for i, d in enumerate(self.diagnostics)],
        }
        path.write_text(json.dumps(data, indent=2, sort_keys=True) + "\n")
        return path


def filter_agents(curves: Sequence[TrainingCurve], config: EnsembleConfig = EnsembleConfig()) -> FilterResult:
    """Indices of converged agents; if none converge, the best-tail agent alone (with a warning)."""
    diags = [assess_convergence(c, config.window, config.tolerance, config.tail_fraction) for c in curves]
    keep = [i for i, d in enumerate(diags) if d.converged]
    if keep:
        return FilterResult(keep, diags, False)
    best = int(np.argmax([d.tail_mean for d in diags]))
    logger.warning("no agent converged; keeping agent %d (best tail rolling mean)", best)
    return FilterResult([best], diags, True)


def vote(actions: Sequence[int], previous: int, threshold: float = 50.0) -> int:
    """The action chosen by strictly more than ``threshold`` percent of agents, else ``previous``."""
    if not actions:
        raise ValueError("no votes")
    n = len(actions)
    for action, count in Counter(actions).most_common():
        if 100.0 * count / n > threshold:
            return int(action)
        break
    return int(previous)


@dataclass(frozen=True, eq=False)
class VoteTrace:
    dates: np.ndarray
    votes: np.ndarray  # (steps, agents) target positions
    positions: np.ndarray

    def majority_share(self) -> np.ndarray:
        """Largest single-action vote share per step, in percent."""
        shares = np.stack([(self.votes == a).mean(axis=1) for a in ACTIONS], axis=1)
        return 100.0 * shares.max(axis=1)

    def to_csv(self, path: str | Path) -> Path:
        path = Path(path)
        with path.open("w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["date"] + [f"agent_{i}" for i in range(self.votes.shape[1])] + ["ensemble_position"])
            for d, v, p in zip(self.dates.tolist(), self.votes.tolist(), self.positions.tolist()):
                writer.writerow([str(d)] + v + [p])
        return path


class EnsemblePolicy:
    """Vote-driven policy; ``obs.position`` is the ensemble's book, so persistence keeps it.

    Every call appends the agents' votes to ``votes``.
    """

    def __init__(self, agents: Sequence[QNetwork], threshold: float = 50.0):
        if not agents:
            raise ValueError("ensemble needs at least one agent")
        self.agents = list(agents)
        self.threshold = threshold
        self.votes: list[list[int]] = []

    def __call__(self, obs: Observation) -> int:
        step_votes = [ACTIONS[int(np.argmax(net.forward(obs.vector)))] for net in self.agents]
        self.votes.append(step_votes)
        return vote(step_votes, obs.position, self.threshold)


def ensemble_run(agents: Sequence[QNetwork], matrix: FeatureMatrix, span, env_config: EnvConfig = EnvConfig(),
                 config: EnsembleConfig = EnsembleConfig()) -> tuple[EpisodeRecord, VoteTrace]:
    """Greedy vote-driven rollout; every agent observes the ensemble's own position."""
    policy = EnsemblePolicy(agents, config.threshold)
    record = run_policy(policy, matrix, span, env_config)
    return record, VoteTrace(record.dates, np.array(policy.votes, dtype=np.int64), record.positions)


def train_ensemble(matrix: FeatureMatrix, train_range, train_config: TrainConfig = TrainConfig(),
                   env_config: EnvConfig = EnvConfig(), config: EnsembleConfig = EnsembleConfig()
                   ) -> tuple[list[QNetwork], list[TrainingCurve]]:
    """Agents ``i = 0..n-1`` use seed ``train_config.seed + i``."""
    configs = [replace(train_config, seed=train_config.seed + i) for i in range(config.n_agents)]
    out = train_many(matrix, train_range, configs, env_config, config.jobs)
    return [n for n, _ in out], [c for _, c in out]
