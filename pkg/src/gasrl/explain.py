"""Shapley attributions of a Q-network's chosen-action value.

Coalitions are over groups of observation slots; a group left out of a
coalition is filled from a baseline observation (interventional marginals).
Position slots always keep the explained observation's values.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .dqn import QNetwork
from .env import ACTIONS, EnvConfig, TradingEnv
from .features import FeatureMatrix, ObservationLayout

ValueFn = Callable[[np.ndarray], np.ndarray]
MAX_EXACT_GROUPS = 15
_CHUNK_ROWS = 1 << 16


@dataclass(frozen=True)
class Group:
    name: str
    index: tuple[int, ...]


@dataclass(frozen=True)
class AttributionConfig:
    baseline_size: int = 100
    n_permutations: int = 2000
    grouping: str = "slot"  # "slot": one group per (feature, lag); "feature": all lags of a feature
    method: str = "auto"  # "exact", "sampled", or exact when groups <= exact_limit
    exact_limit: int = 10
    top_k: int = 10
    top_m: int = 3
    seed: int = 0

    def __post_init__(self):
        if self.baseline_size < 1:
            raise ValueError("baseline_size must be >= 1")
        if self.n_permutations < 1:
            raise ValueError("n_permutations must be >= 1")
        if self.grouping not in ("slot", "feature"):
            raise ValueError(f"unknown grouping {self.grouping!r}")
        if self.method not in ("auto", "exact", "sampled"):
            raise ValueError(f"unknown method {self.method!r}")
        if self.top_k < 0 or self.top_m < 0:
            raise ValueError("top_k and top_m must be >= 0")


@dataclass(frozen=True, eq=False)
class AttributionResult:
    names: tuple[str, ...]
    phi: np.ndarray
    value: float  # f(x)
    base_value: float  # mean of f over the baselines
    se: np.ndarray | None = None  # None in exact mode

    def efficiency_gap(self) -> float:
        return float(self.phi.sum() - (self.value - self.base_value))

    def top(self, m: int) -> list[tuple[str, float]]:
        """The ``m`` largest ``|phi|``; ties break by group name."""
        order = sorted(range(len(self.names)), key=lambda g: (-abs(self.phi[g]), self.names[g]))
        return [(self.names[g], float(self.phi[g])) for g in order[:m]]


def slot_groups(layout: ObservationLayout, grouping: str = "slot") -> list[Group]:
    """Partition of the non-position slots."""
    named: dict[str, list[int]] = {}
    for i, slot in enumerate(layout.slots[: layout.feature_size]):
        key = slot.label if grouping == "slot" else slot.feature
        named.setdefault(key, []).append(i)
    return [Group(k, tuple(v)) for k, v in named.items()]


def _check(x, baselines, groups) -> tuple[np.ndarray, np.ndarray]:
    x = np.asarray(x, dtype=float)
    baselines = np.atleast_2d(np.asarray(baselines, dtype=float))
    if x.ndim != 1 or baselines.shape[1] != len(x):
        raise ValueError("x must be a vector and baselines rows of the same length")
    if len(baselines) == 0:
        raise ValueError("baseline set is empty")
    seen = [i for g in groups for i in g.index]
    if len(seen) != len(set(seen)):
        raise ValueError("groups overlap")
    return x, baselines


def _evaluate(f: ValueFn, rows: np.ndarray) -> np.ndarray:
    return np.concatenate([np.asarray(f(rows[i:i + _CHUNK_ROWS]), dtype=float).reshape(-1)
                           for i in range(0, len(rows), _CHUNK_ROWS)])


def exact_shapley(f: ValueFn, x, baselines, groups: Sequence[Group]) -> AttributionResult:
    """Shapley values by enumerating all ``2**len(groups)`` coalitions.

    ``f`` maps an ``(n, d)`` array to ``n`` values.
    """
    x, baselines = _check(x, baselines, groups)
    G = len(groups)
    if G > MAX_EXACT_GROUPS:
        raise ValueError(f"{G} groups is too many for exact enumeration (max {MAX_EXACT_GROUPS}); "
                         "use sampled_shapley")
    masks = np.arange(1 << G)
    B = len(baselines)
    v = np.empty(len(masks))
    per_chunk = max(1, _CHUNK_ROWS // B)
    for lo in range(0, len(masks), per_chunk):
        chunk = masks[lo:lo + per_chunk]
        rows = np.repeat(baselines[None], len(chunk), axis=0)  # (masks, B, d)
        for g, group in enumerate(groups):
            on = ((chunk >> g) & 1).astype(bool)
            idx = list(group.index)
            rows[np.ix_(on, np.arange(B), idx)] = x[idx]
        v[lo:lo + len(chunk)] = _evaluate(f, rows.reshape(-1, len(x))).reshape(len(chunk), B).mean(axis=1)
    sizes = np.array([bin(m).count("1") for m in masks])
    weight = np.array([math.factorial(s) * math.factorial(G - s - 1) / math.factorial(G) if s < G else 0.0
                       for s in range(G + 1)])
    phi = np.empty(G)
    for g in range(G):
        without = masks[(masks >> g) & 1 == 0]
        phi[g] = np.sum(weight[sizes[without]] * (v[without | (1 << g)] - v[without]))
    return AttributionResult(tuple(g.name for g in groups), phi, float(v[-1]), float(v[0]))


def sampled_shapley(f: ValueFn, x, baselines, groups: Sequence[Group], n_permutations: int = 2000,
                    seed: int = 0) -> AttributionResult:
    """Monte Carlo Shapley: each draw pairs a random group order with one random baseline.

    Every draw gives an unbiased estimate of each ``phi``; ``se`` is the
    sample standard deviation over draws divided by ``sqrt(n_permutations)``.
    """
    x, baselines = _check(x, baselines, groups)
    if n_permutations < 1:
        raise ValueError("n_permutations must be >= 1")
    G, d = len(groups), len(x)
    rng = np.random.default_rng(seed)
    contrib = np.empty((n_permutations, G))
    per_chunk = max(1, _CHUNK_ROWS // (G + 1))
    for lo in range(0, n_permutations, per_chunk):
        n = min(per_chunk, n_permutations - lo)
        orders = np.array([rng.permutation(G) for _ in range(n)]).reshape(n, G)
        base = baselines[rng.integers(len(baselines), size=n)]
        rows = np.repeat(base[:, None, :], G + 1, axis=1)  # row k: first k groups of the order from x
        rank = np.argsort(orders, axis=1)  # position of each group in its order
        step = np.arange(G + 1)[None, :]
        for g, group in enumerate(groups):
            idx = list(group.index)
            present = (step > rank[:, g:g + 1])[..., None]
            rows[:, :, idx] = np.where(present, x[idx], rows[:, :, idx])
        vals = _evaluate(f, rows.reshape(-1, d)).reshape(n, G + 1)
        steps = np.diff(vals, axis=1)
        contrib[lo:lo + n] = np.take_along_axis(steps, rank, axis=1)
    phi = contrib.mean(axis=0)
    se = contrib.std(axis=0, ddof=1) / math.sqrt(n_permutations) if n_permutations > 1 else np.full(G, np.inf)
    base_value = float(np.mean(_evaluate(f, baselines)))
    value = float(_evaluate(f, x[None])[0])
    return AttributionResult(tuple(g.name for g in groups), phi, value, base_value, se)


def action_value(net: QNetwork, action_index: int) -> ValueFn:
    return lambda rows: net.forward(rows)[:, action_index]


def attribute(net: QNetwork, x, baselines, groups: Sequence[Group], config: AttributionConfig,
              seed: int | None = None, action_index: int | None = None) -> tuple[int, AttributionResult]:
    """Attribute the greedy action (or ``action_index``) at ``x``; returns ``(action_index, result)``."""
    x = np.asarray(x, dtype=float)
    if action_index is None:
        action_index = int(np.argmax(net.forward(x)))
    baselines = np.array(baselines, dtype=float)
    pos = np.arange(len(x))[~np.isin(np.arange(len(x)), [i for g in groups for i in g.index])]
    baselines[:, pos] = x[pos]  # unattributed slots keep the explained values
    f = action_value(net, action_index)
    exact = config.method == "exact" or (config.method == "auto" and len(groups) <= config.exact_limit)
    if exact:
        return action_index, exact_shapley(f, x, baselines, groups)
    seed = config.seed if seed is None else seed
    return action_index, sampled_shapley(f, x, baselines, groups, config.n_permutations, seed)


def draw_baselines(matrix: FeatureMatrix, span, size: int, seed: int = 0,
                   env_config: EnvConfig = EnvConfig()) -> np.ndarray:
    """``size`` flat-position observations drawn with replacement from days in ``span``."""
    env = TradingEnv(matrix, env_config)
    i0, i1 = matrix.index_range(span)
    lo = max(i0, env.first_start)
    if i1 <= lo:
        raise ValueError("baseline span has no observable days")
    days = np.random.default_rng(seed).integers(lo, i1, size=size)
    return np.stack([env.observation(int(t), 0).vector for t in days])


@dataclass(frozen=True)
class ImportanceRow:
    group: str
    mean_abs_phi: float
    mean_phi: float


def aggregate_importance(net: QNetwork, observations, baselines, groups: Sequence[Group],
                         config: AttributionConfig = AttributionConfig()) -> list[ImportanceRow]:
    """Top ``config.top_k`` groups by mean ``|phi|`` of the greedy action's value; observation ``i`` uses seed ``seed + i``."""
    obs = np.atleast_2d(np.asarray(observations, dtype=float))
    if len(obs) == 0:
        raise ValueError("no observations to attribute")
    results = [attribute(net, x, baselines, groups, config, seed=config.seed + i)[1] for i, x in enumerate(obs)]
    return rank_importance(results, config.top_k)


def write_importance_csv(rows: Sequence[ImportanceRow], path: str | Path) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["rank", "group", "mean_abs_phi", "mean_phi"])
        for k, r in enumerate(rows, 1):
            writer.writerow([k, r.group, repr(r.mean_abs_phi), repr(r.mean_phi)])
    return path


@dataclass(frozen=True)
class TimelineRow:
    date: str
    t: int
    action: int
    q: tuple[float, float, float]
    top: tuple[tuple[str, float], ...]


def _rollout(net: QNetwork, matrix: FeatureMatrix, span, baselines, config: AttributionConfig,
             env_config: EnvConfig, attribute_steps: bool):
    env = TradingEnv(matrix, env_config)
    groups = slot_groups(env.layout, config.grouping)
    i0, i1 = matrix.index_range(span)
    obs = env.reset(i0, i1 - i0)
    while True:
        q = net.forward(obs.vector)
        a_idx = int(np.argmax(q))
        result = None
        if attribute_steps:
            result = attribute(net, obs.vector, baselines, groups, config, seed=config.seed + obs.t,
                               action_index=a_idx)[1]
        yield obs, q, a_idx, result
        step = env.step(ACTIONS[a_idx])
        if step.terminal:
            return
        obs = step.observation


def _timeline_row(matrix, obs, q, a_idx, result, m) -> TimelineRow:
    top = tuple(result.top(m)) if result is not None and m else ()
    return TimelineRow(str(matrix.dates[obs.t]), obs.t, ACTIONS[a_idx], tuple(float(v) for v in q), top)


def decision_timeline(net: QNetwork, matrix: FeatureMatrix, span, baselines,
                      config: AttributionConfig = AttributionConfig(),
                      env_config: EnvConfig = EnvConfig()) -> list[TimelineRow]:
    """Greedy rollout over ``span`` with the top ``config.top_m`` attributions per day.

    Day index ``t`` is attributed with seed ``config.seed + t``.
    """
    return [_timeline_row(matrix, *step, config.top_m)
            for step in _rollout(net, matrix, span, baselines, config, env_config, config.top_m > 0)]


def explain_span(net: QNetwork, matrix: FeatureMatrix, span, baselines,
                 config: AttributionConfig = AttributionConfig(),
                 env_config: EnvConfig = EnvConfig()) -> tuple[list[TimelineRow], list[ImportanceRow]]:
    """Timeline plus importance ranking from one attribution pass over the greedy rollout."""
    timeline, results = [], []
    for step in _rollout(net, matrix, span, baselines, config, env_config, True):
        timeline.append(_timeline_row(matrix, *step, config.top_m))
        results.append(step[3])
    return timeline, rank_importance(results, config.top_k)


def rank_importance(results: Sequence[AttributionResult], top_k: int) -> list[ImportanceRow]:
    """Groups ordered by mean ``|phi|`` (ties by name), truncated to ``top_k``."""
    if not results:
        raise ValueError("no attributions to rank")
    names = results[0].names
    phis = np.stack([r.phi for r in results])
    mean_abs, mean = np.abs(phis).mean(axis=0), phis.mean(axis=0)
    order = sorted(range(len(names)), key=lambda g: (-round(float(mean_abs[g]), 12), names[g]))
    return [ImportanceRow(names[g], float(mean_abs[g]), float(mean[g])) for g in order[:top_k]]


def write_timeline_csv(rows: Sequence[TimelineRow], path: str | Path, top_m: int) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        header = ["date", "action", "q_sell", "q_hold", "q_buy"]
        for k in range(1, top_m + 1):
            header += [f"top{k}_name", f"top{k}_phi"]
        writer.writerow(header)
        for r in rows:
            line = [r.date, r.action, *(repr(v) for v in r.q)]
            for name, phi in r.top[:top_m]:
                line += [name, repr(phi)]
            writer.writerow(line)
    return path
