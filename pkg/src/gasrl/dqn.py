"""Deep Q-learning from scratch in numpy.

The Q-network is a rectifier MLP with three outputs, indexed like
:data:`gasrl.env.ACTIONS` (sell/short, hold/flat, buy/long).
"""
from __future__ import annotations

import csv
import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np

from .env import ACTIONS, EnvConfig, TradingEnv, annualized_sharpe
from .features import FeatureMatrix, Observation, fit_normalizer, slot_noise_scale

logger = logging.getLogger(__name__)

N_ACTIONS = 3
CHECKPOINT_FORMAT = "gasrl-qnetwork"
CHECKPOINT_VERSION = 1


class TrainingError(RuntimeError):
    pass


class QNetwork:
    """Rectifier MLP: ``sizes = (input, hidden..., 3)``.

    ``weights[i]`` has shape ``(sizes[i], sizes[i+1])`` so a batch ``x`` of
    shape ``(B, input)`` maps to ``x @ W + b``.
    """

    def __init__(self, weights: Sequence[np.ndarray], biases: Sequence[np.ndarray]):
        self.weights = [np.array(w, dtype=float) for w in weights]
        self.biases = [np.array(b, dtype=float) for b in biases]
        if len(self.weights) != len(self.biases) or not self.weights:
            raise ValueError("need one bias per weight matrix")
        for w, b in zip(self.weights, self.biases):
            if w.ndim != 2 or b.shape != (w.shape[1],):
                raise ValueError("inconsistent layer shapes")
        for w0, w1 in zip(self.weights, self.weights[1:]):
            if w0.shape[1] != w1.shape[0]:
                raise ValueError("consecutive layers do not chain")

    @classmethod
    def create(cls, input_size: int, hidden: Sequence[int] = (64, 64), n_out: int = N_ACTIONS,
               rng: np.random.Generator | None = None) -> "QNetwork":
        rng = rng if rng is not None else np.random.default_rng(0)
        sizes = (input_size, *hidden, n_out)
        weights, biases = [], []
        for i, (fan_in, fan_out) in enumerate(zip(sizes, sizes[1:])):
            last = i == len(sizes) - 2
            std = math.sqrt((1.0 if last else 2.0) / fan_in)
            weights.append(rng.standard_normal((fan_in, fan_out)) * std)
            biases.append(np.zeros(fan_out))
        return cls(weights, biases)

    @property
    def sizes(self) -> tuple[int, ...]:
        return (self.weights[0].shape[0], *(w.shape[1] for w in self.weights))

    @property
    def params(self) -> list[np.ndarray]:
        return self.weights + self.biases

    def copy(self) -> "QNetwork":
        return QNetwork([w.copy() for w in self.weights], [b.copy() for b in self.biases])

    def load_from(self, other: "QNetwork") -> None:
        for p, q in zip(self.params, other.params):
            p[...] = q

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return self.forward(x)

    def forward(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if x.shape[-1] != self.sizes[0]:
            raise ValueError(f"input has {x.shape[-1]} features, network expects {self.sizes[0]}")
        h = x
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = h @ w + b
            if i < last:
                h = np.maximum(h, 0.0)
        return h

    def loss_and_grads(self, x, actions, targets, weights=None) -> tuple[float, list[np.ndarray]]:
        """Weighted MSE ``mean(w * (Q(x, a) - y)^2)`` and its gradient w.r.t. ``params``."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        actions = np.asarray(actions, dtype=np.int64)
        targets = np.asarray(targets, dtype=float)
        B = len(x)
        w_imp = np.ones(B) if weights is None else np.asarray(weights, dtype=float)
        acts = [x]
        pre = []
        h = x
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            z = h @ w + b
            pre.append(z)
            h = np.maximum(z, 0.0) if i < last else z
            acts.append(h)
        rows = np.arange(B)
        err = h[rows, actions] - targets
        loss = float(np.mean(w_imp * err * err))
        delta = np.zeros_like(h)
        delta[rows, actions] = 2.0 * w_imp * err / B
        gw = [None] * len(self.weights)
        gb = [None] * len(self.weights)
        for i in range(last, -1, -1):
            gw[i] = acts[i].T @ delta
            gb[i] = delta.sum(axis=0)
            if i:
                delta = (delta @ self.weights[i].T) * (pre[i - 1] > 0)
        return loss, gw + gb

    def to_dict(self) -> dict:
        return {
            "format": CHECKPOINT_FORMAT,
            "version": CHECKPOINT_VERSION,
            "sizes": list(self.sizes),
            "activation": "relu",
            "weights": [w.tolist() for w in self.weights],
            "biases": [b.tolist() for b in self.biases],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "QNetwork":
        if data.get("format") != CHECKPOINT_FORMAT or data.get("version") != CHECKPOINT_VERSION:
            raise ValueError("not a supported Q-network checkpoint")
        net = cls([np.array(w) for w in data["weights"]], [np.array(b) for b in data["biases"]])
        if list(net.sizes) != list(data["sizes"]):
            raise ValueError("checkpoint sizes do not match parameters")
        return net

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        path.write_text(json.dumps(self.to_dict()))
        return path

    @classmethod
    def load(cls, path: str | Path) -> "QNetwork":
        return cls.from_dict(json.loads(Path(path).read_text()))


def forward(net: QNetwork, obs) -> np.ndarray:
    """Action values (sell, hold, buy) for one observation."""
    vec = obs.vector if isinstance(obs, Observation) else np.asarray(obs, dtype=float)
    if vec.ndim != 1:
        raise ValueError("forward() takes a single observation")
    return net.forward(vec)


class Batch(NamedTuple):
    obs: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    next_obs: np.ndarray
    terminal: np.ndarray


def td_targets(batch: Batch, target_net: QNetwork, gamma: float) -> np.ndarray:
    """``r`` for terminal transitions, ``r + gamma * max_a Q_target(s', a)`` otherwise."""
    nxt = target_net.forward(batch.next_obs).max(axis=1)
    return np.asarray(batch.rewards, dtype=float) + gamma * nxt * (1.0 - np.asarray(batch.terminal, dtype=float))


def sgd_step(net: QNetwork, batch: Batch, targets, lr: float, weights=None, clip: float | None = 10.0) -> float:
    """One in-place gradient step on the weighted MSE; returns the pre-step loss.

    The gradient is rescaled to global norm ``clip`` if it is larger.
    """
    loss, grads = net.loss_and_grads(batch.obs, batch.actions, targets, weights)
    if not math.isfinite(loss):
        raise TrainingError(f"non-finite loss {loss}; max |target| = {np.max(np.abs(targets))}")
    if clip is not None:
        norm = math.sqrt(sum(float(np.vdot(g, g)) for g in grads))
        if norm > clip:
            grads = [g * (clip / norm) for g in grads]
    for p, g in zip(net.params, grads):
        p -= lr * g
    return loss


class Adam:
    """Adam state for a fixed parameter list (opt-in alternative to plain SGD)."""

    def __init__(self, params: list[np.ndarray], lr: float, b1: float = 0.9, b2: float = 0.999, eps: float = 1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, b1, b2, eps
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, params, grads) -> None:
        self.t += 1
        c1 = 1 - self.b1**self.t
        c2 = 1 - self.b2**self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def act_epsilon_greedy(net: QNetwork, obs, epsilon: float, rng: np.random.Generator) -> int:
    """Action index: uniform with probability ``epsilon``, else argmax (ties -> lowest index)."""
    if not 0 <= epsilon <= 1:
        raise ValueError("epsilon must be in [0, 1]")
    if epsilon > 0 and rng.random() < epsilon:
        return int(rng.integers(N_ACTIONS))
    return int(np.argmax(forward(net, obs)))


class ReplayBuffer:
    """Ring buffer of transitions with optional proportional prioritisation.

    Prioritised sampling draws index ``i`` with probability
    ``p_i^alpha / sum_j p_j^alpha`` and weights ``(N * P(i))^-beta / max``.
    ``beta`` anneals linearly from ``beta0`` to 1 over ``beta_steps`` samples.
    """

    def __init__(self, capacity: int, obs_size: int, prioritized: bool = False, alpha: float = 0.6,
                 beta0: float = 0.4, beta_steps: int = 100_000, priority_eps: float = 1e-6):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        self.prioritized = prioritized
        self.alpha, self.beta0, self.beta_steps, self.priority_eps = alpha, beta0, beta_steps, priority_eps
        self.obs = np.zeros((capacity, obs_size))
        self.next_obs = np.zeros((capacity, obs_size))
        self.actions = np.zeros(capacity, dtype=np.int64)
        self.rewards = np.zeros(capacity)
        self.terminal = np.zeros(capacity, dtype=bool)
        self.priorities = np.zeros(capacity)
        self.size = 0
        self.cursor = 0
        self.samples_drawn = 0

    def __len__(self) -> int:
        return self.size

    def add(self, obs, action: int, reward: float, next_obs, terminal: bool, priority: float | None = None) -> None:
        if action not in range(N_ACTIONS):
            raise ValueError("action index must be 0, 1 or 2")
        i = self.cursor
        self.obs[i] = obs
        self.actions[i] = action
        self.rewards[i] = reward
        self.next_obs[i] = next_obs
        self.terminal[i] = terminal
        if priority is None:
            priority = self.priorities[: self.size].max() if self.size else 1.0
        self.priorities[i] = max(float(priority), self.priority_eps)
        self.cursor = (i + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    @property
    def beta(self) -> float:
        frac = min(1.0, self.samples_drawn / max(1, self.beta_steps))
        return self.beta0 + frac * (1.0 - self.beta0)

    def probabilities(self) -> np.ndarray:
        if not self.prioritized:
            return np.full(self.size, 1.0 / self.size)
        p = self.priorities[: self.size] ** self.alpha
        return p / p.sum()

    def sample(self, batch_size: int, rng: np.random.Generator) -> tuple[Batch, np.ndarray, np.ndarray]:
        """(batch, importance weights, indices); sampling is with replacement."""
        if self.size < batch_size:
            raise ValueError(f"buffer holds {self.size} transitions, batch needs {batch_size}")
        if self.prioritized:
            probs = self.probabilities()
            idx = rng.choice(self.size, size=batch_size, p=probs)
            w = (self.size * probs[idx]) ** (-self.beta)
            w = w / w.max()
        else:
            idx = rng.integers(0, self.size, size=batch_size)
            w = np.ones(batch_size)
        self.samples_drawn += 1
        batch = Batch(self.obs[idx], self.actions[idx], self.rewards[idx], self.next_obs[idx], self.terminal[idx])
        return batch, w, idx

    def update_priorities(self, indices, td_errors) -> None:
        self.priorities[np.asarray(indices)] = np.abs(np.asarray(td_errors, dtype=float)) + self.priority_eps


@dataclass(frozen=True)
class TrainConfig:
    """DQN hyper-parameters (desk defaults, budget of 2,000 episodes per agent)."""

    episodes: int = 2000
    gamma: float = 0.99
    lr: float = 1e-3
    optimizer: str = "sgd"
    epsilon_start: float = 1.0
    epsilon_end: float = 0.05
    epsilon_decay_episodes: int | None = None  # None: half of ``episodes``
    batch_size: int = 32
    target_update: int = 500
    buffer_capacity: int = 50_000
    learning_starts: int = 1000
    hidden: tuple[int, ...] = (64, 64)
    grad_clip: float = 10.0
    prioritized: bool = False
    per_alpha: float = 0.6
    per_beta0: float = 0.4
    noise: bool = True
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        if not 0 <= self.gamma <= 1:
            raise ValueError("gamma must be in [0, 1]")
        for e in (self.epsilon_start, self.epsilon_end):
            if not 0 <= e <= 1:
                raise ValueError("epsilon must be in [0, 1]")
        if self.episodes < 0 or self.batch_size < 1 or self.target_update < 1:
            raise ValueError("episodes >= 0, batch_size >= 1, target_update >= 1 required")
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError("optimizer must be 'sgd' or 'adam'")

    def epsilon(self, episode: int) -> float:
        decay = self.epsilon_decay_episodes
        if decay is None:
            decay = max(1, self.episodes // 2)
        frac = min(1.0, episode / max(1, decay))
        return self.epsilon_start + frac * (self.epsilon_end - self.epsilon_start)


@dataclass
class TrainingCurve:
    sharpe: list[float] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.sharpe)

    def to_csv(self, path: str | Path) -> Path:
        path = Path(path)
        with path.open("w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["episode", "sharpe"])
            for i, s in enumerate(self.sharpe):
                writer.writerow([i, repr(float(s))])
        return path

    @classmethod
    def from_csv(cls, path: str | Path) -> "TrainingCurve":
        with Path(path).open(newline="") as fh:
            return cls([float(r["sharpe"]) for r in csv.DictReader(fh)])


def episode_starts(env: TradingEnv, span: tuple[int, int], length: int) -> tuple[int, int]:
    """Inclusive bounds of admissible episode start rows inside ``span``."""
    i0, i1 = span
    lo = max(i0, env.first_start)
    hi = i1 - length
    if hi < lo:
        raise ValueError(f"training range of {i1 - i0} rows cannot hold a {length}-step episode")
    return lo, hi


def train(matrix: FeatureMatrix, train_range, config: TrainConfig = TrainConfig(),
          env_config: EnvConfig = EnvConfig()) -> tuple[QNetwork, TrainingCurve]:
    """Train one agent on random-start episodes drawn from ``train_range``.

    Each episode is an epsilon-greedy rollout on noisy observations; after
    ``learning_starts`` transitions every step does one replay update and the
    target network is synced every ``target_update`` updates. The curve holds
    the annualised Sharpe of each episode's shaped rewards. Only rows inside
    ``train_range`` (plus the look-back rows just before it) are read.
    """
    rng = np.random.default_rng(config.seed)
    env = TradingEnv(matrix, env_config)
    span = matrix.index_range(train_range)
    net = QNetwork.create(env.observation_size, config.hidden, rng=rng)
    target = net.copy()
    curve = TrainingCurve()
    if config.episodes == 0:
        return net, curve
    length = env_config.episode_length
    lo, hi = episode_starts(env, span, length)
    normalizer = matrix.normalizer or fit_normalizer(matrix, slice(*span))
    noise_sd = np.zeros(env.observation_size)
    if config.noise and env_config.features.noise_fraction > 0:
        noise_sd = env_config.features.noise_fraction * slot_noise_scale(
            env.layout, normalizer, matrix.normalizer is not None)
    noisy = bool(noise_sd.any())
    buffer = ReplayBuffer(
        config.buffer_capacity, env.observation_size, config.prioritized, config.per_alpha,
        config.per_beta0, beta_steps=max(1, config.episodes * length - config.learning_starts),
    )
    adam = Adam(net.params, config.lr) if config.optimizer == "adam" else None
    updates = 0
    for episode in range(config.episodes):
        eps = config.epsilon(episode)
        start = int(rng.integers(lo, hi + 1))
        obs = env.reset(start).vector
        if noisy:
            obs = obs + rng.standard_normal(len(obs)) * noise_sd
        rewards = np.empty(length)
        for k in range(length):
            a_idx = act_epsilon_greedy(net, obs, eps, rng)
            res = env.step(ACTIONS[a_idx])
            rewards[k] = res.reward
            if res.terminal:
                nxt = obs  # ignored: terminal targets do not bootstrap
            else:
                nxt = res.observation.vector
                if noisy:
                    nxt = nxt + rng.standard_normal(len(nxt)) * noise_sd
            buffer.add(obs, a_idx, res.reward, nxt, res.terminal)
            obs = nxt
            if len(buffer) >= max(config.learning_starts, config.batch_size):
                batch, w, idx = buffer.sample(config.batch_size, rng)
                y = td_targets(batch, target, config.gamma)
                if buffer.prioritized:
                    q = net.forward(batch.obs)[np.arange(len(idx)), batch.actions]
                    buffer.update_priorities(idx, q - y)
                if adam is None:
                    sgd_step(net, batch, y, config.lr, w, config.grad_clip)
                else:
                    loss, grads = net.loss_and_grads(batch.obs, batch.actions, y, w)
                    if not math.isfinite(loss):
                        raise TrainingError(f"non-finite loss at episode {episode}")
                    norm = math.sqrt(sum(float(np.vdot(g, g)) for g in grads))
                    if norm > config.grad_clip:
                        grads = [g * (config.grad_clip / norm) for g in grads]
                    adam.step(net.params, grads)
                updates += 1
                if updates % config.target_update == 0:
                    target.load_from(net)
        curve.sharpe.append(annualized_sharpe(rewards)[0])
        if not all(np.isfinite(p).all() for p in net.params):
            raise TrainingError(f"non-finite parameters after episode {episode}")
    return net, curve


def greedy_policy(net: QNetwork):
    """Deterministic policy for :func:`gasrl.env.run_policy`."""
    def policy(obs: Observation) -> int:
        return ACTIONS[int(np.argmax(net.forward(obs.vector)))]
    return policy


def _train_job(args):
    matrix, train_range, config, env_config = args
    return train(matrix, train_range, config, env_config)


def train_many(matrix: FeatureMatrix, train_range, configs: Sequence[TrainConfig],
               env_config: EnvConfig = EnvConfig(), jobs: int = 1) -> list[tuple[QNetwork, TrainingCurve]]:
    """Train independent agents, in worker processes when ``jobs > 1``; order follows ``configs``."""
    work = [(matrix, train_range, c, env_config) for c in configs]
    if jobs <= 1 or len(work) <= 1:
        return [_train_job(w) for w in work]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(_train_job, work))
