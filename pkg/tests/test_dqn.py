import numpy as np
import pytest

from gasrl.dqn import (
    Batch,
    QNetwork,
    ReplayBuffer,
    TrainConfig,
    TrainingCurve,
    TrainingError,
    act_epsilon_greedy,
    forward,
    greedy_policy,
    sgd_step,
    td_targets,
    train,
    train_many,
)
from gasrl.env import EnvConfig, run_policy

SMALL = TrainConfig(episodes=6, learning_starts=50, batch_size=8, target_update=20, hidden=(8, 8), seed=3)
SHORT_ENV = EnvConfig(tc=0.1, episode_length=30)


def numeric_grads(net, x, actions, targets, weights, h=1e-6):
    out = []
    for p in net.params:
        g = np.zeros_like(p)
        for idx in np.ndindex(p.shape):
            old = p[idx]
            p[idx] = old + h
            up, _ = net.loss_and_grads(x, actions, targets, weights)
            p[idx] = old - h
            down, _ = net.loss_and_grads(x, actions, targets, weights)
            p[idx] = old
            g[idx] = (up - down) / (2 * h)
        out.append(g)
    return out


def test_backprop_matches_finite_differences(rng):
    net = QNetwork.create(5, (4, 3), rng=rng)
    for b in net.biases:  # zero biases can park pre-activations exactly on the ReLU kink
        b += rng.normal(0, 0.5, b.shape)
    x = rng.standard_normal((6, 5))
    actions = rng.integers(0, 3, 6)
    targets = rng.standard_normal(6)
    weights = rng.uniform(0.5, 1.5, 6)
    _, grads = net.loss_and_grads(x, actions, targets, weights)
    for g, n in zip(grads, numeric_grads(net, x, actions, targets, weights)):
        assert np.allclose(g, n, rtol=1e-5, atol=1e-8)


def test_forward_shapes_and_errors(rng):
    net = QNetwork.create(7, rng=rng)
    assert net.sizes == (7, 64, 64, 3)
    assert forward(net, np.zeros(7)).shape == (3,)
    assert net.forward(np.zeros((4, 7))).shape == (4, 3)
    with pytest.raises(ValueError):
        net.forward(np.zeros(6))


def test_checkpoint_round_trip(tmp_path, rng):
    net = QNetwork.create(5, (4,), rng=rng)
    back = QNetwork.load(net.save(tmp_path / "n.json"))
    x = rng.standard_normal((3, 5))
    assert np.array_equal(back.forward(x), net.forward(x))
    with pytest.raises(ValueError):
        QNetwork.from_dict({"format": "other"})


def test_td_targets_terminal_does_not_bootstrap(rng):
    net = QNetwork.create(2, (3,), rng=rng)
    nxt = np.array([[1.0, 2.0], [0.5, -1.0]])
    batch = Batch(np.zeros((2, 2)), np.array([0, 1]), np.array([1.0, 2.0]), nxt, np.array([False, True]))
    y = td_targets(batch, net, 0.9)
    assert y[0] == pytest.approx(1.0 + 0.9 * net.forward(nxt[0]).max())
    assert y[1] == 2.0


def test_sgd_step_reduces_loss(rng):
    net = QNetwork.create(4, (16,), rng=rng)
    x = rng.standard_normal((32, 4))
    batch = Batch(x, rng.integers(0, 3, 32), None, None, None)
    y = x[:, 0]
    first = sgd_step(net, batch, y, 0.05)
    for _ in range(200):
        last = sgd_step(net, batch, y, 0.05)
    assert last < first


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_sgd_step_rejects_non_finite(rng):
    net = QNetwork.create(2, (3,), rng=rng)
    batch = Batch(np.ones((1, 2)), np.array([0]), None, None, None)
    with pytest.raises(TrainingError):
        sgd_step(net, batch, np.array([np.inf]), 0.1)


def test_epsilon_greedy(rng):
    net = QNetwork([np.zeros((2, 3))], [np.array([0.0, 1.0, 1.0])])
    assert act_epsilon_greedy(net, np.zeros(2), 0.0, rng) == 1  # tie goes to the lower index
    picks = {act_epsilon_greedy(net, np.zeros(2), 1.0, rng) for _ in range(100)}
    assert picks == {0, 1, 2}


def test_epsilon_schedule():
    cfg = TrainConfig(episodes=100)
    assert cfg.epsilon(0) == 1.0
    assert cfg.epsilon(25) == pytest.approx(0.525)
    assert cfg.epsilon(50) == pytest.approx(0.05) == cfg.epsilon(99)


def test_uniform_replay():
    buf = ReplayBuffer(3, 2)
    for i in range(5):
        buf.add(np.full(2, i), i % 3, float(i), np.zeros(2), False)
    assert len(buf) == 3
    assert sorted(buf.rewards.tolist()) == [2.0, 3.0, 4.0]
    assert np.allclose(buf.probabilities(), 1 / 3)
    _, w, idx = buf.sample(3, np.random.default_rng(0))
    assert np.all(w == 1) and set(idx) <= {0, 1, 2}
    with pytest.raises(ValueError):
        buf.sample(4, np.random.default_rng(0))


def test_prioritized_replay_probabilities_and_weights():
    buf = ReplayBuffer(4, 1, prioritized=True, alpha=0.5, beta0=0.4, beta_steps=10)
    for i, p in enumerate([1.0, 4.0, 9.0, 16.0]):
        buf.add([i], 0, 0.0, [0], False, priority=p)
    probs = buf.probabilities()
    assert np.allclose(probs, np.array([1, 2, 3, 4]) / 10)
    _, w, idx = buf.sample(4, np.random.default_rng(0))
    expected = (4 * probs[idx]) ** -0.4
    assert np.allclose(w, expected / expected.max())
    buf.update_priorities([0], [-2.0])
    assert buf.priorities[0] == pytest.approx(2.0 + buf.priority_eps)


def test_zero_episodes_returns_untrained(norm_matrix):
    net, curve = train(norm_matrix, slice(0, 300), TrainConfig(episodes=0, seed=1), SHORT_ENV)
    assert len(curve) == 0
    ref = QNetwork.create(55, rng=np.random.default_rng(1))
    assert all(np.array_equal(a, b) for a, b in zip(net.params, ref.params))


def test_training_is_deterministic(norm_matrix):
    a, ca = train(norm_matrix, slice(0, 300), SMALL, SHORT_ENV)
    b, cb = train(norm_matrix, slice(0, 300), SMALL, SHORT_ENV)
    assert ca.sharpe == cb.sharpe and len(ca) == SMALL.episodes
    assert all(np.array_equal(x, y) for x, y in zip(a.params, b.params))


def test_training_with_adam_and_per_runs(norm_matrix):
    cfg = TrainConfig(episodes=4, learning_starts=40, batch_size=8, hidden=(8,), optimizer="adam",
                      prioritized=True, seed=2)
    net, curve = train(norm_matrix, slice(0, 300), cfg, SHORT_ENV)
    assert len(curve) == 4 and all(np.isfinite(curve.sharpe))
    rec = run_policy(greedy_policy(net), norm_matrix, slice(300, 340), SHORT_ENV)
    assert len(rec) == 40


def test_training_range_too_small(norm_matrix):
    with pytest.raises(ValueError):
        train(norm_matrix, slice(0, 20), SMALL, SHORT_ENV)


def test_train_many_matches_serial(norm_matrix):
    cfgs = [SMALL, TrainConfig(**{**SMALL.__dict__, "seed": 4})]
    serial = train_many(norm_matrix, slice(0, 300), cfgs, SHORT_ENV, jobs=1)
    parallel = train_many(norm_matrix, slice(0, 300), cfgs, SHORT_ENV, jobs=2)
    for (n1, c1), (n2, c2) in zip(serial, parallel):
        assert c1.sharpe == c2.sharpe
        assert all(np.array_equal(x, y) for x, y in zip(n1.params, n2.params))


def test_curve_csv_round_trip(tmp_path):
    c = TrainingCurve([0.1, -2.5, 3.0])
    assert TrainingCurve.from_csv(c.to_csv(tmp_path / "c.csv")).sharpe == c.sharpe


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(gamma=1.5)
    with pytest.raises(ValueError):
        TrainConfig(optimizer="rmsprop")
