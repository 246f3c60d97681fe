"""Rule-based benchmark strategies and a tabular indicator selector.

Signals are target positions in {-1, 0, +1}. The value at ``t`` uses closes up
to and including ``t`` and is traded as ``A_t``, so it first earns on ``t+1``.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .env import EnvConfig, Policy, shaped_reward
from .features import InsufficientDataError, macd

MACD_SPANS = (12, 26, 9)


@dataclass(frozen=True, eq=False)
class IndicatorSignal:
    """Target positions; rows before ``valid_from`` are warm-up and hold 0."""

    positions: np.ndarray
    valid_from: int = 0
    dates: np.ndarray | None = None

    def __post_init__(self):
        pos = np.array(self.positions, dtype=np.int64, copy=True)
        if not np.isin(pos, (-1, 0, 1)).all():
            raise ValueError("signal values must be in {-1, 0, 1}")
        pos.setflags(write=False)
        object.__setattr__(self, "positions", pos)

    def __len__(self) -> int:
        return len(self.positions)

    def policy(self) -> Policy:
        """Policy that trades the signal at the observation's day index."""
        pos = self.positions
        return lambda obs: int(pos[obs.t])

    def to_csv(self, path: str | Path) -> Path:
        path = Path(path)
        dates = self.dates if self.dates is not None else np.arange(len(self))
        with path.open("w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["date", "position"])
            for d, p in list(zip(dates.tolist(), self.positions.tolist()))[self.valid_from:]:
                writer.writerow([str(d), p])
        return path


def buy_and_hold(n: int, dates=None) -> IndicatorSignal:
    return IndicatorSignal(np.ones(n, dtype=np.int64), 0, dates)


def macd_strategy(close, spans=MACD_SPANS, dates=None) -> IndicatorSignal:
    """+1 / -1 / 0 on the sign of the MACD histogram."""
    close = np.asarray(close, dtype=float)
    _, _, hist = macd(close, spans)
    warm = spans[1] + spans[2] - 2
    pos = np.sign(hist).astype(np.int64)
    pos[:warm] = 0
    return IndicatorSignal(pos, warm, dates)


def bollinger_bands(close, period: int = 20, width: float = 2.0) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(mid, lower, upper) with a rolling mean and population std; NaN before ``period - 1``."""
    close = np.asarray(close, dtype=float)
    n = len(close)
    mid = np.full(n, np.nan)
    sd = np.full(n, np.nan)
    if n >= period:
        win = np.lib.stride_tricks.sliding_window_view(close, period)
        mid[period - 1:] = win.mean(axis=1)
        sd[period - 1:] = win.std(axis=1)
    return mid, mid - width * sd, mid + width * sd


def bollinger_strategy(close, period: int = 20, width: float = 2.0, dates=None) -> IndicatorSignal:
    """Mean reversion: long below the lower band, short above the upper, else keep the last target."""
    close = np.asarray(close, dtype=float)
    if len(close) < period:
        raise InsufficientDataError(f"Bollinger bands need {period} points, got {len(close)}")
    _, lower, upper = bollinger_bands(close, period, width)
    pos = np.zeros(len(close), dtype=np.int64)
    cur = 0
    for t in range(period - 1, len(close)):
        if close[t] < lower[t]:
            cur = 1
        elif close[t] > upper[t]:
            cur = -1
        pos[t] = cur
    return IndicatorSignal(pos, period - 1, dates)


# ---------------------------------------------------------------------------
# selector

FOLLOW_MACD, FOLLOW_BB = 0, 1


@dataclass(frozen=True)
class SelectorConfig:
    episodes: int = 200
    alpha: float = 0.1
    gamma: float = 0.9
    epsilon: float = 0.1
    macd_spans: tuple[int, int, int] = MACD_SPANS
    bb_period: int = 20
    bb_width: float = 2.0
    seed: int = 0


def band_tercile(close, lower, upper) -> np.ndarray:
    """0/1/2 for the lower/middle/upper third of the band (clipped outside it)."""
    span = upper - lower
    rel = np.where(span > 0, (close - lower) / np.where(span > 0, span, 1.0), 0.5)
    return np.clip(np.floor(rel * 3), 0, 2).astype(np.int64)


class IndicatorSelector:
    """Tabular Q-learner that picks which indicator's target position to trade.

    State: (MACD histogram >= 0, band tercile, current position) -> 2*3*3 cells.
    Reward: the one-step shaped reward of trading the followed signal.
    """

    def __init__(self, close, config: SelectorConfig = SelectorConfig()):
        self.config = config
        self.close = np.asarray(close, dtype=float)
        self.macd = macd_strategy(self.close, config.macd_spans)
        self.bb = bollinger_strategy(self.close, config.bb_period, config.bb_width)
        hist = macd(self.close, config.macd_spans)[2]
        _, lower, upper = bollinger_bands(self.close, config.bb_period, config.bb_width)
        self.hist_up = (hist >= 0).astype(np.int64)
        self.tercile = band_tercile(self.close, np.nan_to_num(lower), np.nan_to_num(upper))
        self.valid_from = max(self.macd.valid_from, self.bb.valid_from, 1)
        self.q = np.zeros((2, 3, 3, 2))
        self.signals = np.stack([self.macd.positions, self.bb.positions])

    def state(self, t: int, position: int) -> tuple[int, int, int]:
        return int(self.hist_up[t]), int(self.tercile[t]), int(position) + 1

    def choose(self, t: int, position: int) -> int:
        # ties resolve to FOLLOW_MACD
        return int(np.argmax(self.q[self.state(t, position)]))

    def fit(self, span: tuple[int, int], tc: float) -> "IndicatorSelector":
        i0, i1 = max(span[0], self.valid_from), span[1]
        if i1 - i0 < 2:
            raise InsufficientDataError("selector training span too short after indicator warm-up")
        cfg = self.config
        rng = np.random.default_rng(cfg.seed)
        for _ in range(cfg.episodes):
            pos = 0
            for t in range(i0, i1):
                s = self.state(t, pos)
                a = int(rng.integers(2)) if rng.random() < cfg.epsilon else int(np.argmax(self.q[s]))
                new = int(self.signals[a, t])
                r = shaped_reward(pos, self.close[t] - self.close[t - 1], new, tc)
                if t + 1 < i1:
                    target = r + cfg.gamma * self.q[self.state(t + 1, new)].max()
                else:
                    target = r
                self.q[s + (a,)] += cfg.alpha * (target - self.q[s + (a,)])
                pos = new
        return self

    def policy(self) -> Policy:
        return lambda obs: int(self.signals[self.choose(obs.t, obs.position), obs.t])

    def signal(self, span: tuple[int, int]) -> tuple[IndicatorSignal, np.ndarray]:
        """Greedy positions and choices over ``span``, starting flat."""
        i0, i1 = span
        pos = np.zeros(len(self.close), dtype=np.int64)
        choices = np.full(len(self.close), -1, dtype=np.int64)
        cur = 0
        for t in range(max(i0, self.valid_from), i1):
            choices[t] = self.choose(t, cur)
            cur = int(self.signals[choices[t], t])
            pos[t] = cur
        return IndicatorSignal(pos, max(i0, self.valid_from)), choices


def rl_selector(close, train_span: tuple[int, int], test_span: tuple[int, int],
                env_config: EnvConfig = EnvConfig(), config: SelectorConfig = SelectorConfig()) -> IndicatorSignal:
    selector = IndicatorSelector(close, config)
    if config.episodes > 0:
        selector.fit(train_span, env_config.tc)
    return selector.signal(test_span)[0]
