import math

import numpy as np
import pytest

from gasrl.features import (
    FeatureSpec,
    InsufficientDataError,
    Slot,
    add_noise,
    apply_normalizer,
    build_feature_matrix,
    build_observation,
    ema,
    fit_normalizer,
    macd,
    observation_layout,
    observation_table,
    pca_first_component,
    refit_pca,
    rsi,
    technical_column_names,
    vol_adjusted_return,
)
from gasrl.market_data import FundamentalSeries, linear_ramp


def test_ema_hand_values():
    assert np.allclose(ema([1, 2, 3], 2), [1.0, 5 / 3, 23 / 9])


def test_ema_span_one_is_identity():
    x = np.array([3.0, -1.0, 4.0])
    assert np.array_equal(ema(x, 1), x)


def wilder_rsi_oracle(x, n):
    """Straight transcription of Wilder's recursion, one value at a time."""
    out = [math.nan] * len(x)
    ups = [max(x[i] - x[i - 1], 0) for i in range(1, len(x))]
    downs = [max(x[i - 1] - x[i], 0) for i in range(1, len(x))]
    g = sum(ups[:n]) / n
    d = sum(downs[:n]) / n
    for t in range(n, len(x)):
        if t > n:
            g = (g * (n - 1) + ups[t - 1]) / n
            d = (d * (n - 1) + downs[t - 1]) / n
        out[t] = 50.0 if g == d == 0 else (100.0 if d == 0 else 100 - 100 / (1 + g / d))
    return out


def test_rsi_matches_oracle(rng):
    x = 50 + np.cumsum(rng.standard_normal(80))
    assert np.allclose(rsi(x, 14), wilder_rsi_oracle(list(x), 14), equal_nan=True)


def test_rsi_edge_cases():
    assert np.all(rsi(np.arange(30.0), 14)[14:] == 100)
    assert np.all(rsi(np.full(30, 5.0), 14)[14:] == 50)
    assert np.all(rsi(-np.arange(30.0), 14)[14:] == 0)
    with pytest.raises(InsufficientDataError):
        rsi(np.arange(10.0), 14)


def test_macd_on_ramp_turns_positive():
    line, signal, hist = macd(np.arange(100.0))
    assert line[-1] > 0 and signal[-1] > 0
    with pytest.raises(InsufficientDataError):
        macd(np.arange(26.0))


def test_vol_adjusted_return_scales_with_sqrt_horizon():
    t = np.arange(400)
    close = 50 + 0.1 * t + 0.5 * (-1.0) ** t  # daily changes alternate, so sigma settles
    v20, _ = vol_adjusted_return(close, 20)
    v80, _ = vol_adjusted_return(close, 80)
    assert v80[-1] / v20[-1] == pytest.approx(2.0, rel=1e-12)


def test_vol_adjusted_return_flags_zero_volatility():
    v, flag = vol_adjusted_return(np.full(50, 3.0), 10)
    assert np.all(v[10:] == 0) and flag[10:].all() and np.isnan(v[:10]).all()


def test_matrix_columns_and_warmup(raw_matrix, gbm_prices):
    spec = FeatureSpec()
    assert raw_matrix.names == technical_column_names(spec)
    assert len(raw_matrix.names) == 17
    assert np.isfinite(raw_matrix.values()).all()
    assert len(raw_matrix) == len(gbm_prices) - 252
    assert raw_matrix.dates[0] == gbm_prices.dates[252]


def test_fundamental_columns_are_appended(gbm_prices):
    fund = FundamentalSeries("storage", gbm_prices.dates, np.linspace(0, 1, len(gbm_prices)))
    m = build_feature_matrix(gbm_prices, [fund], FeatureSpec(include_fundamentals=True))
    assert m.names[-1] == "fund_storage"
    assert m.meta["fund_storage"].source == "fundamental"
    assert build_feature_matrix(gbm_prices, [fund], FeatureSpec()).names[-1] == "pca1"


def test_too_short_series_raises():
    with pytest.raises(InsufficientDataError):
        build_feature_matrix(linear_ramp(200))


def test_pca_close_loading_is_non_negative(raw_matrix):
    pc = pca_first_component(raw_matrix, slice(0, 300), ["open", "high", "low", "close", "volume"])
    assert pc.axis[3] >= 0
    assert not pc.fallback
    assert 0 < pc.explained <= 1
    assert np.allclose(np.linalg.norm(pc.axis), 1)


def test_pca_fit_range_excludes_later_rows(raw_matrix):
    cols = dict(raw_matrix.columns)
    cols["close"] = cols["close"].copy()
    cols["close"][400:] *= 3
    changed = raw_matrix.with_columns(cols)
    a = refit_pca(raw_matrix, slice(0, 300)).columns["pca1"]
    b = refit_pca(changed, slice(0, 300)).columns["pca1"]
    assert np.array_equal(a[:400], b[:400])


def test_pca_rank_deficient_falls_back(caplog):
    m = build_feature_matrix(linear_ramp(400), (), FeatureSpec())
    pc = pca_first_component(m, slice(0, 100), ["open", "high", "low", "close", "volume"])
    assert pc.fallback
    assert np.count_nonzero(pc.axis) == 1


def test_normalizer_fit_range_moments(raw_matrix):
    norm = fit_normalizer(raw_matrix, slice(0, 300))
    z = apply_normalizer(raw_matrix, norm).values()[:300]
    live = ~norm.degenerate
    assert np.all(np.abs(z.mean(axis=0)) < 1e-9)
    assert np.all(np.abs(z.std(axis=0)[live] - 1) < 1e-9)


def test_normalizer_maps_constant_columns_to_zero():
    m = build_feature_matrix(linear_ramp(400), (), FeatureSpec())
    norm = fit_normalizer(m, slice(0, 100))
    z = apply_normalizer(m, norm)
    assert norm.degenerate[m.names.index("close_diff")]
    assert np.all(z.columns["close_diff"] == 0)


def test_observation_layout_default_length(raw_matrix):
    spec = FeatureSpec()
    layout = observation_layout(raw_matrix, spec)
    assert len(layout) == 3 * 17 + 1 + 3 == 55
    assert layout.partial_columns == ("open",)
    assert layout.slots[0] == Slot("open", 3)
    assert layout.slots[51] == Slot("open", 0)
    assert [s.feature for s in layout.slots[-3:]] == ["pos_short", "pos_flat", "pos_long"]


def test_observation_contents(norm_matrix):
    spec = FeatureSpec()
    t = 10
    obs = build_observation(norm_matrix, t, -1, spec)
    vals = norm_matrix.values()
    assert np.array_equal(obs.vector[:17], vals[t - 3])
    assert np.array_equal(obs.vector[34:51], vals[t - 1])
    assert obs.vector[51] == norm_matrix.columns["open"][t]
    assert obs.vector[-3:].tolist() == [1, 0, 0]
    table, _ = observation_table(norm_matrix, spec)
    assert np.array_equal(table[t - 3], obs.vector[:-3])


def test_observation_needs_history(norm_matrix):
    with pytest.raises(InsufficientDataError):
        build_observation(norm_matrix, 2, 0, FeatureSpec())


def test_noise_leaves_position_slots(norm_matrix, rng):
    obs = build_observation(norm_matrix, 50, 1, FeatureSpec())
    noisy = add_noise(obs, norm_matrix.normalizer, 0.01, rng)
    assert np.array_equal(noisy.vector[-3:], obs.vector[-3:])
    diff = noisy.vector[:-3] - obs.vector[:-3]
    assert 0 < np.abs(diff).max() < 0.1
    assert add_noise(obs, norm_matrix.normalizer, 0.0, rng) is obs


def test_noise_scale_is_a_fraction_of_slot_sd(norm_matrix):
    obs = build_observation(norm_matrix, 50, 0, FeatureSpec())
    draws = np.stack([add_noise(obs, norm_matrix.normalizer, 0.05, np.random.default_rng(k)).vector
                      for k in range(400)])
    assert np.allclose(draws[:, :51].std(axis=0), 0.05, rtol=0.2)


def test_spec_validation():
    with pytest.raises(ValueError):
        FeatureSpec(macd_spans=(26, 12, 9))
    with pytest.raises(ValueError):
        FeatureSpec(noise_fraction=1.0)
