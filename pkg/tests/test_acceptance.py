"""Acceptance checks A1-A10. Each test records a one-line verdict in the terminal summary."""
import math
import statistics
import time

import numpy as np
import pytest

from gasrl.backtest import WalkForwardSpec, make_folds, prepare_fold
from gasrl.baselines import bollinger_strategy, buy_and_hold, macd_strategy
from gasrl.dqn import QNetwork, TrainConfig, greedy_policy, train
from gasrl.ensemble import EnsembleConfig, ensemble_run, filter_agents, train_ensemble
from gasrl.env import EnvConfig, TradingEnv, constant_policy, episode_sharpe, run_policy
from gasrl.explain import Group, exact_shapley, sampled_shapley
from gasrl.features import (FeatureSpec, apply_normalizer, build_feature_matrix, build_observation,
                            fit_normalizer, refit_pca)
from gasrl.market_data import SyntheticSpec, generate, linear_ramp

from test_baselines import BB_5_15, CLOSES, MACD_3_6_4
from test_config_cli import run_pipeline


def prepared(prices, train_rows, spec=FeatureSpec()):
    """Feature matrix with PCA and normalisation fitted on the first ``train_rows`` rows."""
    m = refit_pca(build_feature_matrix(prices, (), spec), slice(0, train_rows))
    return apply_normalizer(m, fit_normalizer(m, slice(0, train_rows)))


# ---------------------------------------------------------------------------
# A1


def oracle_sharpe(rewards):
    mean = statistics.fmean(rewards)
    sd = statistics.pstdev(rewards)
    if sd <= 1e-12 + 1e-9 * statistics.fmean(abs(r) for r in rewards):
        return 0.0
    return math.sqrt(252) * mean / sd


def oracle_total(prev, pos, rets, tc):
    return sum(p * r for p, r in zip(prev, rets)) - tc * sum(abs(a - p) for p, a in zip(prev, pos))


def test_a1_reward_and_sharpe_oracle(record_property):
    """shaped reward and Sharpe agree with a standalone oracle on 1,000 random episodes"""
    t0 = time.perf_counter()
    rng = np.random.default_rng(2024)
    matrices = [build_feature_matrix(generate(SyntheticSpec(regime=r, length=500, seed=s, volatility=v)))
                for s, (r, v) in enumerate([("gbm", 0.3), ("ou", 12.0), ("regime_switch", 0.4), ("gbm", 0.8)])]
    worst_total = worst_sr = 0.0
    for _ in range(1000):
        m = matrices[rng.integers(len(matrices))]
        tc = float(rng.choice([0.0, 0.1]))
        length = int(rng.integers(2, 80))
        env = TradingEnv(m, EnvConfig(tc=tc, episode_length=length))
        start = int(rng.integers(env.first_start, len(m) - length + 1))
        env.reset(start)
        pos = rng.integers(-1, 2, length).tolist()
        for a in pos:
            env.step(a)
        rec = env.record()
        rets = [float(m.close[t] - m.close[t - 1]) for t in range(start, start + length)]
        prev = [0] + pos[:-1]
        worst_total = max(worst_total, abs(rec.rewards.sum() - oracle_total(prev, pos, rets, tc)))
        worst_sr = max(worst_sr, abs(episode_sharpe(rec) - oracle_sharpe(rec.rewards.tolist())))
    elapsed = time.perf_counter() - t0
    record_property("detail", f"max reward gap {worst_total:.1e}, max Sharpe gap {worst_sr:.1e}, {elapsed:.1f}s")
    assert worst_total < 1e-9 and worst_sr < 1e-9
    assert elapsed < 5


# ---------------------------------------------------------------------------
# A2

A2_TRAIN = TrainConfig(episodes=600, gamma=0.9)
A2_TRAIN_ROWS, A2_TEST_ROWS = 2000, 200


def test_a2_trend_is_learned(record_property):
    """a single agent learns to hold long on a noiseless uptrend"""
    t0 = time.perf_counter()
    m = prepared(linear_ramp(A2_TRAIN_ROWS + A2_TEST_ROWS + 300, slope=0.05), A2_TRAIN_ROWS)
    env = EnvConfig(tc=0.0, episode_length=200)
    test = slice(A2_TRAIN_ROWS, A2_TRAIN_ROWS + A2_TEST_ROWS)
    bh = episode_sharpe(run_policy(constant_policy(1), m, test, env))
    wins, notes = 0, []
    for seed in range(5):
        net, _ = train(m, slice(0, A2_TRAIN_ROWS), TrainConfig(**{**A2_TRAIN.__dict__, "seed": seed}), env)
        rec = run_policy(greedy_policy(net), m, test, env)
        long_share = float(np.mean(rec.positions == 1))
        ratio = episode_sharpe(rec) / bh
        wins += long_share >= 0.95 and ratio >= 0.9
        notes.append(f"{long_share:.2f}/{ratio:.2f}")
    elapsed = time.perf_counter() - t0
    record_property("detail", f"{wins}/5 seeds; long share/Sharpe ratio {' '.join(notes)}; {elapsed:.0f}s")
    assert wins >= 4
    assert elapsed < 600


# ---------------------------------------------------------------------------
# A3 and A6 share one mean-reverting benchmark and one set of ten agents

OU_TEST_ROWS = 300
OU_ENV = EnvConfig(tc=0.1, episode_length=252)
OU_TRAIN = TrainConfig(episodes=300, gamma=0.9)
OU_ENSEMBLE = EnsembleConfig(n_agents=10, threshold=50, window=100)


@pytest.fixture(scope="module")
def ou_bench():
    t0 = time.perf_counter()
    prices = generate(SyntheticSpec(regime="ou", length=1600, seed=11, speed=25, volatility=16, level=50))
    n = len(build_feature_matrix(prices)) - OU_TEST_ROWS
    m = prepared(prices, n)
    agents, curves = train_ensemble(m, slice(0, n), OU_TRAIN, OU_ENV, OU_ENSEMBLE)
    test = slice(n, len(m))
    records = [run_policy(greedy_policy(a), m, test, OU_ENV) for a in agents]
    return dict(matrix=m, test=test, agents=agents, curves=curves, records=records,
                seconds=time.perf_counter() - t0)


def test_a3_mean_reversion_is_learned(ou_bench, record_property):
    """median out-of-sample P&L over 10 seeds is positive and beats a random policy"""
    m, test = ou_bench["matrix"], ou_bench["test"]
    pnl = [r.rewards.sum() for r in ou_bench["records"]]
    rand = [run_policy(lambda o, g=np.random.default_rng(k): int(g.integers(-1, 2)), m, test, OU_ENV).rewards.sum()
            for k in range(10)]
    med, rmed = float(np.median(pnl)), float(np.median(rand))
    record_property("detail", f"median P&L {med:.2f} vs random {rmed:.2f}; training {ou_bench['seconds']:.0f}s")
    assert med > 0 and med > rmed
    assert ou_bench["seconds"] < 1800


def test_a6_ensemble_beats_its_members(ou_bench, record_property):
    """filtered ensemble Sharpe is at least its survivors' mean and ties keep the position"""
    filt = filter_agents(ou_bench["curves"], OU_ENSEMBLE)
    survivors = [ou_bench["agents"][i] for i in filt.survivors]
    rec, trace = ensemble_run(survivors, ou_bench["matrix"], ou_bench["test"], OU_ENV, OU_ENSEMBLE)
    ens = episode_sharpe(rec)
    members = float(np.mean([episode_sharpe(ou_bench["records"][i]) for i in filt.survivors]))
    prev = rec.initial_position
    for k, share in enumerate(trace.majority_share()):
        if share <= OU_ENSEMBLE.threshold:
            assert rec.positions[k] == prev
        prev = rec.positions[k]
    gain = (ens - members) / abs(members) * 100 if members else float("nan")
    record_property("detail", f"{len(survivors)} survivors, ensemble Sharpe {ens:.3f} vs mean {members:.3f} "
                              f"({gain:+.0f}%)")
    assert ens >= members


# ---------------------------------------------------------------------------
# A4


def test_a4_backprop_matches_finite_differences(record_property):
    """backprop gradients match central differences on 100 random networks"""
    t0 = time.perf_counter()
    rng = np.random.default_rng(77)
    worst = 0.0
    for _ in range(100):
        d = int(rng.integers(2, 7))
        hidden = tuple(int(h) for h in rng.integers(2, 7, rng.integers(1, 3)))
        net = QNetwork.create(d, hidden, rng=rng)
        for b in net.biases:
            b += rng.normal(0, 0.5, b.shape)
        n = int(rng.integers(1, 6))
        x = rng.standard_normal((n, d))
        acts, y, w = rng.integers(0, 3, n), rng.standard_normal(n), rng.uniform(0.5, 1.5, n)
        _, grads = net.loss_and_grads(x, acts, y, w)
        for p, g in zip(net.params, grads):
            num = np.zeros_like(p)
            for idx in np.ndindex(p.shape):
                old = p[idx]
                p[idx] = old + 1e-6
                up, _ = net.loss_and_grads(x, acts, y, w)
                p[idx] = old - 1e-6
                down, _ = net.loss_and_grads(x, acts, y, w)
                p[idx] = old
                num[idx] = (up - down) / 2e-6
            scale = np.linalg.norm(g) + np.linalg.norm(num)
            if scale > 0:
                worst = max(worst, float(np.linalg.norm(g - num) / scale))
    elapsed = time.perf_counter() - t0
    record_property("detail", f"max relative error {worst:.1e}, {elapsed:.1f}s")
    assert worst < 1e-4 and elapsed < 30


# ---------------------------------------------------------------------------
# A5


@pytest.fixture(scope="module")
def twelve_years():
    prices = generate(SyntheticSpec(regime="ou", length=3393, seed=21, speed=5, volatility=15,
                                    start_date="2008-01-01"))
    assert prices.dates[-1] >= np.datetime64("2020-12-31")
    return prices


def test_a5_walk_forward_integrity(twelve_years, record_property):
    """walk-forward folds cover 2013-2020 without overlap and ignore test data when training"""
    m = build_feature_matrix(twelve_years)
    for scheme in ("anchored", "sliding"):
        spec = WalkForwardSpec.from_dates(m.dates, scheme=scheme)
        assert (spec.start_year, spec.end_year) == (2009, 2020)
        folds = make_folds(spec)
        assert [f.test_year for f in folds] == list(range(2013, 2021))
        for f in folds:
            prep = prepare_fold(m, f)
            assert m.dates[prep.train[1] - 1] < m.dates[prep.test[0]]
    # probe: rewrite every price in the test year and retrain
    fold = make_folds(WalkForwardSpec())[0]
    is_test = (twelve_years.dates >= np.datetime64(fold.test[0])) & (twelve_years.dates < np.datetime64(fold.test[1]))
    bumped = twelve_years.replace(**{c: np.where(is_test, getattr(twelve_years, c) * 1.7, getattr(twelve_years, c))
                                     for c in ("open", "high", "low", "close", "volume")})
    cfg = TrainConfig(episodes=4, learning_starts=100, hidden=(16,), seed=5)
    env = EnvConfig(tc=0.1, episode_length=100)
    nets, tests = [], []
    for prices in (twelve_years, bumped):
        prep = prepare_fold(build_feature_matrix(prices), fold)
        nets.append(train(prep.matrix, slice(*prep.train), cfg, env)[0])
        tests.append(prep.matrix.close[slice(*prep.test)])
    assert not np.array_equal(*tests)  # the probe did reach the test rows
    assert all(np.array_equal(a, b) for a, b in zip(nets[0].params, nets[1].params))
    record_property("detail", "8 folds per scheme, test years 2013-2020, probe parameters identical")


# ---------------------------------------------------------------------------
# A7


def test_a7_shapley_axioms_and_sampling(record_property):
    """exact Shapley obeys efficiency, symmetry and dummy; sampling agrees within 3 SE"""
    rng = np.random.default_rng(8)

    def f(rows):
        return rows[:, 0] * rows[:, 1] + np.sin(rows[:, 2] + rows[:, 3]) + rows[:, 4] ** 3

    groups = [Group(c, (i,)) for i, c in enumerate("abcdef")]
    x, base = rng.standard_normal(6), rng.standard_normal((9, 6))
    x[3], base[:, 3] = x[2], base[:, 2]
    ex = exact_shapley(f, x, base, groups)
    assert abs(ex.efficiency_gap()) < 1e-9
    assert abs(ex.phi[2] - ex.phi[3]) < 1e-9
    assert abs(ex.phi[5]) < 1e-9

    net = QNetwork.create(12, (16, 8), rng=rng)
    g10 = [Group(f"g{i}", (i, i + 10) if i < 2 else (i,)) for i in range(10)]
    x, base = rng.standard_normal(12), rng.standard_normal((30, 12))
    val = lambda rows: net.forward(rows)[:, 1]  # noqa: E731
    ex = exact_shapley(val, x, base, g10)
    sm = sampled_shapley(val, x, base, g10, 4000, seed=3)
    z = np.abs(sm.phi - ex.phi) / sm.se
    record_property("detail", f"efficiency gap {abs(ex.efficiency_gap()):.1e}, max |z| {z.max():.2f} over 10 groups")
    assert abs(ex.efficiency_gap()) < 1e-9
    assert np.all(z <= 3)


# ---------------------------------------------------------------------------
# A8


def test_a8_baseline_oracles():
    """MACD and Bollinger signals match the 30-bar fixtures; buy-and-hold telescopes"""
    assert macd_strategy(CLOSES, (3, 6, 4)).positions.tolist() == MACD_3_6_4
    assert bollinger_strategy(CLOSES, 5, 1.5).positions.tolist() == BB_5_15
    m = build_feature_matrix(generate(SyntheticSpec(length=600, seed=4)))
    rec = run_policy(buy_and_hold(len(m)).policy(), m, slice(50, 300), EnvConfig(tc=0.0))
    assert rec.gross_pnl == pytest.approx(m.close[299] - m.close[50], abs=1e-9)


# ---------------------------------------------------------------------------
# A9


def test_a9_reruns_are_byte_identical(tmp_path, monkeypatch, record_property):
    """rerunning every command with the same config gives byte-identical artifacts"""
    runs = []
    for name in ("first", "second"):
        work = tmp_path / name
        work.mkdir()
        monkeypatch.chdir(work)
        runs.append(run_pipeline(work))
    assert runs[0].keys() == runs[1].keys()
    differing = [k for k in runs[0] if runs[0][k] != runs[1][k]]
    record_property("detail", f"{len(runs[0])} artifacts compared, {len(differing)} differ")
    assert not differing


# ---------------------------------------------------------------------------
# A10


def test_a10_day_t_prices_do_not_leak(twelve_years, record_property):
    """perturbing day-t close, high, low or volume leaves the day-t observation unchanged"""
    spec = FeatureSpec()
    offset = len(twelve_years) - len(build_feature_matrix(twelve_years, (), spec))
    rng = np.random.default_rng(10)
    checked = 0
    for t in rng.integers(400, 2500, 12):
        t = int(t)

        def observe(prices):
            m = refit_pca(build_feature_matrix(prices, (), spec), slice(0, t))
            m = apply_normalizer(m, fit_normalizer(m, slice(0, t)))
            return build_observation(m, t, 1, spec).vector

        ref = observe(twelve_years)
        row = t + offset
        p = twelve_years
        moves = {
            "close": dict(close=p.low[row] + 0.3 * (p.high[row] - p.low[row])),
            "high": dict(high=p.high[row] + 5.0),
            "low": dict(low=p.low[row] - 5.0),
            "volume": dict(volume=p.volume[row] * 4 + 1),
        }
        for col, change in moves.items():
            (key, value), = change.items()
            arr = np.array(getattr(p, key))
            arr[row] = value
            assert np.array_equal(observe(p.replace(**{key: arr})), ref), (t, col)
            checked += 1
    record_property("detail", f"{checked} perturbations, all observations unchanged")
