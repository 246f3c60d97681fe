"""Incomplete-market trading simulation.

Actions are target positions in {-1, 0, +1}. Stepping on day ``t`` with
action ``A_t`` pays the previous position on the day's close-to-close move
and charges the transaction cost for the position change::

    reward_t = A_{t-1} * (close_t - close_{t-1}) - tc * |A_t - A_{t-1}|

so the position chosen on day ``t`` first earns on day ``t+1``.
"""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .features import (
    FeatureMatrix,
    FeatureSpec,
    InsufficientDataError,
    Observation,
    ObservationLayout,
    observation_table,
    one_hot,
)

logger = logging.getLogger(__name__)

ACTIONS = (-1, 0, 1)
ANNUALIZATION = math.sqrt(252)

Policy = Callable[[Observation], int]


class EpisodeError(RuntimeError):
    pass


@dataclass(frozen=True)
class EnvConfig:
    tc: float = 0.1
    episode_length: int = 252
    features: FeatureSpec = field(default_factory=FeatureSpec)

    def __post_init__(self):
        if self.tc < 0:
            raise ValueError("tc must be >= 0")
        if self.episode_length < 2:
            raise ValueError("episode_length must be >= 2")


def check_action(action) -> int:
    a = int(action)
    if a not in ACTIONS or a != action:
        raise ValueError(f"action must be one of {ACTIONS}, got {action!r}")
    return a


def shaped_reward(prev_position: int, raw_return: float, position: int, tc: float) -> float:
    return prev_position * raw_return - tc * abs(position - prev_position)


@dataclass(frozen=True)
class StepResult:
    observation: Observation | None
    reward: float
    raw_return: float
    terminal: bool


@dataclass(frozen=True, eq=False)
class EpisodeRecord:
    """Per-step positions (the action taken), raw returns and shaped rewards.

    Step ``k`` covers day ``start + k``; the position before the first step is
    ``initial_position``.
    """

    positions: np.ndarray
    raw_returns: np.ndarray
    rewards: np.ndarray
    start: int
    end: int
    tc: float
    dates: np.ndarray | None = None
    initial_position: int = 0

    def __post_init__(self):
        for name in ("positions", "raw_returns", "rewards"):
            arr = np.array(getattr(self, name), dtype=np.int64 if name == "positions" else float, copy=True)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        n = len(self.positions)
        if len(self.raw_returns) != n or len(self.rewards) != n or self.end - self.start != n:
            raise ValueError("episode record arrays and span must have equal length")
        if n and not np.isin(self.positions, ACTIONS).all():
            raise ValueError("positions must be in {-1, 0, 1}")

    def __len__(self) -> int:
        return len(self.positions)

    @property
    def previous_positions(self) -> np.ndarray:
        return np.concatenate([[self.initial_position], self.positions[:-1]]).astype(np.int64)

    @property
    def gross_pnl(self) -> float:
        return float(np.sum(self.previous_positions * self.raw_returns))

    @property
    def turnover(self) -> float:
        return float(np.sum(np.abs(np.diff(np.concatenate([[self.initial_position], self.positions])))))

    @property
    def equity(self) -> np.ndarray:
        """Cumulative shaped P&L, starting from 0 before the first step."""
        return np.concatenate([[0.0], np.cumsum(self.rewards)])

    def to_csv(self, path: str | Path) -> Path:
        path = Path(path)
        with path.open("w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["date", "position", "raw_return", "reward"])
            dates = self.dates if self.dates is not None else np.arange(self.start, self.end)
            for d, p, r, w in zip(dates.tolist(), self.positions.tolist(), self.raw_returns.tolist(), self.rewards.tolist()):
                writer.writerow([str(d), p, repr(r), repr(w)])
        return path

    @classmethod
    def from_csv(cls, path: str | Path, tc: float = 0.0, start: int = 0) -> "EpisodeRecord":
        with Path(path).open(newline="") as fh:
            rows = list(csv.DictReader(fh))
        dates = np.array([r["date"] for r in rows], dtype="datetime64[D]")
        return cls(
            [int(r["position"]) for r in rows], [float(r["raw_return"]) for r in rows],
            [float(r["reward"]) for r in rows], start, start + len(rows), tc, dates,
        )


def concat_records(records: list[EpisodeRecord]) -> EpisodeRecord:
    """Join consecutive records; each keeps its own initial position in the reward history."""
    if not records:
        raise ValueError("nothing to concatenate")
    dates = None
    if all(r.dates is not None for r in records):
        dates = np.concatenate([r.dates for r in records])
    n = sum(len(r) for r in records)
    return EpisodeRecord(
        np.concatenate([r.positions for r in records]),
        np.concatenate([r.raw_returns for r in records]),
        np.concatenate([r.rewards for r in records]),
        0, n, records[0].tc, dates, records[0].initial_position,
    )


def annualized_sharpe(rewards) -> tuple[float, bool]:
    """sqrt(252) * mean / population std. Returns (value, degenerate); degenerate std gives 0."""
    r = np.asarray(rewards, dtype=float)
    if len(r) < 2:
        raise ValueError("Sharpe ratio needs at least 2 rewards")
    mean = r.mean()
    sd = math.sqrt(float(np.mean((r - mean) ** 2)))
    if sd <= 1e-12 + 1e-9 * float(np.mean(np.abs(r))):
        return 0.0, True
    return float(ANNUALIZATION * mean / sd), False


def episode_sharpe(record: EpisodeRecord) -> float:
    value, degenerate = annualized_sharpe(record.rewards)
    if degenerate:
        logger.debug("degenerate Sharpe: reward std ~ 0 over %d steps", len(record))
    return value


class TradingEnv:
    """Stateful single-threaded environment over a shared, read-only feature matrix."""

    def __init__(self, matrix: FeatureMatrix, config: EnvConfig = EnvConfig()):
        self.matrix = matrix
        self.config = config
        self.table, self.layout = observation_table(matrix, config.features)
        self.close = matrix.close
        self.lookback = config.features.lookback
        self._t = None
        self._end = None
        self._position = 0
        self._log: list[tuple[int, float, float]] = []
        self._start = 0

    @property
    def observation_size(self) -> int:
        return len(self.layout)

    @property
    def first_start(self) -> int:
        return max(self.lookback, 1)

    @property
    def position(self) -> int:
        return self._position

    def observation(self, t: int, position: int) -> Observation:
        vec = np.concatenate([self.table[t - self.lookback], one_hot(position)])
        return Observation(vec, self.layout, t, position, self.matrix.normalizer is not None)

    def reset(self, start: int, length: int | None = None) -> Observation:
        length = self.config.episode_length if length is None else length
        if start < self.first_start:
            raise InsufficientDataError(f"start {start} leaves fewer than {self.first_start} rows of history")
        if start + length > len(self.matrix):
            raise EpisodeError(f"episode of {length} steps from {start} overruns {len(self.matrix)} rows")
        self._start = self._t = start
        self._end = start + length
        self._position = 0
        self._log = []
        return self.observation(start, 0)

    def step(self, action) -> StepResult:
        if self._t is None:
            raise EpisodeError("reset() before step()")
        if self._t >= self._end:
            raise EpisodeError("step() after terminal")
        a = check_action(action)
        t = self._t
        raw = float(self.close[t] - self.close[t - 1])
        reward = shaped_reward(self._position, raw, a, self.config.tc)
        self._log.append((a, raw, reward))
        self._position = a
        self._t = t + 1
        terminal = self._t >= self._end
        obs = None if terminal else self.observation(self._t, a)
        return StepResult(obs, reward, raw, terminal)

    def record(self) -> EpisodeRecord:
        pos, raw, rew = zip(*self._log) if self._log else ((), (), ())
        end = self._start + len(self._log)
        return EpisodeRecord(pos, raw, rew, self._start, end, self.config.tc, self.matrix.dates[self._start:end])


def run_policy(policy: Policy, matrix: FeatureMatrix, span, config: EnvConfig = EnvConfig(),
               env: TradingEnv | None = None) -> EpisodeRecord:
    """Deterministic rollout of ``policy`` over the rows in ``span`` (no observation noise)."""
    env = env or TradingEnv(matrix, config)
    i0, i1 = matrix.index_range(span)
    obs = env.reset(i0, i1 - i0)
    while True:
        res = env.step(policy(obs))
        if res.terminal:
            return env.record()
        obs = res.observation


def constant_policy(position: int) -> Policy:
    position = check_action(position)
    return lambda obs: position
