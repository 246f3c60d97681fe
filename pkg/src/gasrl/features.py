"""Technical/fundamental feature columns and agent observations.

Every column value at row ``t`` depends only on raw inputs up to day ``t``.
Observations for day ``t`` use full rows ``t-L .. t-1`` plus the columns that
are already known at the open of day ``t`` (only ``open`` among the defaults),
followed by a one-hot encoding of the current position.
"""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .market_data import FundamentalSeries, PriceSeries

logger = logging.getLogger(__name__)

EPS = 1e-8
PRICE_COLUMNS = ("open", "high", "low", "close", "volume")
POSITION_SLOTS = ("pos_short", "pos_flat", "pos_long")
# one-hot order matches POSITION_SLOTS
POSITIONS = (-1, 0, 1)


class InsufficientDataError(ValueError):
    pass


@dataclass(frozen=True)
class FeatureSpec:
    include_fundamentals: bool = False
    ema_spread_span: int = 63
    rsi_period: int = 14
    macd_spans: tuple[int, int, int] = (12, 26, 9)
    var_horizons: tuple[int, ...] = (21, 42, 63, 252)
    vol_ewma_span: int = 60
    lookback: int = 3
    noise_fraction: float = 0.01

    def __post_init__(self):
        object.__setattr__(self, "macd_spans", tuple(int(s) for s in self.macd_spans))
        object.__setattr__(self, "var_horizons", tuple(int(h) for h in self.var_horizons))
        spans = [self.ema_spread_span, self.rsi_period, self.vol_ewma_span, *self.macd_spans, *self.var_horizons]
        if any(s < 1 for s in spans):
            raise ValueError("all spans must be >= 1")
        fast, slow, _ = self.macd_spans
        if not fast < slow:
            raise ValueError("MACD fast span must be < slow span")
        if self.lookback < 0:
            raise ValueError("lookback must be >= 0")
        if not 0 <= self.noise_fraction < 1:
            raise ValueError("noise_fraction must be in [0, 1)")


@dataclass(frozen=True)
class ColumnMeta:
    """Per-column provenance. ``open_visible`` columns may appear in the day-t slots."""

    source: str
    open_visible: bool = False
    warmup: int = 0


# ---------------------------------------------------------------------------
# indicators


def ema(series, span: int) -> np.ndarray:
    """Exponential moving average with alpha = 2/(span+1), seeded with the first value."""
    if span < 1:
        raise ValueError("span must be >= 1")
    x = np.asarray(series, dtype=float)
    out = np.empty_like(x)
    if len(x) == 0:
        return out
    alpha = 2.0 / (span + 1)
    acc = x[0]
    for i, v in enumerate(x):
        acc = alpha * v + (1 - alpha) * acc if i else v
        out[i] = acc
    return out


def macd(close, spans: tuple[int, int, int] = (12, 26, 9)) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(macd line, signal line, histogram)."""
    fast, slow, signal = spans
    close = np.asarray(close, dtype=float)
    if len(close) <= slow:
        raise InsufficientDataError(f"MACD needs more than {slow} points, got {len(close)}")
    line = ema(close, fast) - ema(close, slow)
    sig = ema(line, signal)
    return line, sig, line - sig


def rsi(series, period: int = 14) -> np.ndarray:
    """Wilder RSI. Entries before ``period`` are NaN.

    The first average gain/loss is the simple mean over the first ``period``
    changes, then ``avg = (avg*(period-1) + x) / period``. If both averages are
    zero the RSI is 50.
    """
    if period < 1:
        raise ValueError("period must be >= 1")
    x = np.asarray(series, dtype=float)
    if len(x) <= period:
        raise InsufficientDataError(f"RSI needs more than {period} points, got {len(x)}")
    d = np.diff(x)
    gain = np.maximum(d, 0.0)
    loss = np.maximum(-d, 0.0)
    out = np.full(len(x), np.nan)
    g = gain[:period].mean()
    l = loss[:period].mean()
    for t in range(period, len(x)):
        if t > period:
            g = (g * (period - 1) + gain[t - 1]) / period
            l = (l * (period - 1) + loss[t - 1]) / period
        if g == 0 and l == 0:
            out[t] = 50.0
        elif l == 0:
            out[t] = 100.0
        else:
            out[t] = 100.0 - 100.0 / (1.0 + g / l)
    return out


def ewma_std(values, span: int) -> np.ndarray:
    """Recursive EWMA standard deviation about the EWMA mean, seeded at the first value."""
    x = np.asarray(values, dtype=float)
    alpha = 2.0 / (span + 1)
    out = np.empty_like(x)
    if len(x) == 0:
        return out
    m, v = x[0], 0.0
    out[0] = 0.0
    for i in range(1, len(x)):
        delta = x[i] - m
        m += alpha * delta
        v = (1 - alpha) * (v + alpha * delta * delta)
        out[i] = math.sqrt(v)
    return out


def vol_adjusted_return(close, horizon: int, vol_ewma_span: int = 60) -> tuple[np.ndarray, np.ndarray]:
    """(close_t - close_{t-h}) / (sigma_t * sqrt(h)) and a degeneracy flag per row.

    sigma_t is the EWMA std of daily close differences up to ``t``. Rows with
    ``t < h`` are NaN; rows where sigma_t < EPS are 0 and flagged.
    """
    c = np.asarray(close, dtype=float)
    if len(c) <= horizon:
        raise InsufficientDataError(f"horizon {horizon} needs more than {horizon} points, got {len(c)}")
    sigma = np.zeros(len(c))
    sigma[1:] = ewma_std(np.diff(c), vol_ewma_span)
    out = np.full(len(c), np.nan)
    flag = np.zeros(len(c), dtype=bool)
    ret = c[horizon:] - c[:-horizon]
    s = sigma[horizon:]
    bad = s < EPS
    flag[horizon:] = bad
    out[horizon:] = np.where(bad, 0.0, ret / np.where(bad, 1.0, s) / math.sqrt(horizon))
    return out, flag


# ---------------------------------------------------------------------------
# matrix


@dataclass(frozen=True, eq=False)
class FeatureMatrix:
    """Named feature columns over trading days.

    ``prices`` holds the raw candles aligned row by row with ``dates``; the
    environment takes its close-to-close returns from there, never from the
    (possibly normalised) feature columns.
    """

    dates: np.ndarray
    columns: Mapping[str, np.ndarray]
    meta: Mapping[str, ColumnMeta]
    prices: PriceSeries
    normalizer: "Normalizer | None" = None

    def __post_init__(self):
        cols = {}
        for k, v in self.columns.items():
            arr = np.array(v, dtype=float, copy=True)
            if len(arr) != len(self.dates):
                raise ValueError(f"column {k!r} has length {len(arr)}, expected {len(self.dates)}")
            arr.setflags(write=False)
            cols[k] = arr
        object.__setattr__(self, "columns", cols)
        if len(self.prices) != len(self.dates):
            raise ValueError("prices must align with dates")

    def __len__(self) -> int:
        return len(self.dates)

    @property
    def names(self) -> list[str]:
        return list(self.columns)

    @property
    def close(self) -> np.ndarray:
        return self.prices.close

    def values(self, names: Sequence[str] | None = None) -> np.ndarray:
        names = self.names if names is None else names
        return np.column_stack([self.columns[n] for n in names]) if names else np.empty((len(self), 0))

    def index_range(self, span) -> tuple[int, int]:
        """Row bounds [i0, i1) for a slice of rows or a (start, end) date pair, end exclusive."""
        if isinstance(span, slice):
            i0, i1, _ = span.indices(len(self))
            return i0, i1
        start, end = span
        i0 = int(np.searchsorted(self.dates, np.datetime64(start, "D"), side="left"))
        i1 = int(np.searchsorted(self.dates, np.datetime64(end, "D"), side="left"))
        return i0, i1

    def with_columns(self, columns: Mapping[str, np.ndarray], meta=None, normalizer="keep") -> "FeatureMatrix":
        return FeatureMatrix(
            self.dates, columns, dict(self.meta) if meta is None else meta, self.prices,
            self.normalizer if normalizer == "keep" else normalizer,
        )

    def to_csv(self, path: str | Path) -> Path:
        path = Path(path)
        with path.open("w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["date"] + self.names)
            vals = self.values()
            for d, row in zip(self.dates.tolist(), vals):
                writer.writerow([d.isoformat()] + [repr(float(x)) for x in row])
        return path


@dataclass(frozen=True)
class PrincipalComponent:
    values: np.ndarray
    axis: np.ndarray
    mean: np.ndarray
    scale: np.ndarray
    explained: float
    columns: tuple[str, ...]
    fallback: bool = False


def pca_first_component(matrix: FeatureMatrix, fit_range=None, columns: Sequence[str] | None = None) -> PrincipalComponent:
    """Project every row onto the first principal axis of the standardised fit block.

    Columns are standardised with fit-range mean/std, the axis comes from the
    fit-range covariance only, and its sign makes the ``close`` loading
    non-negative (first column if ``close`` is absent). A fit block of rank < 2
    falls back to the single highest-variance column.
    """
    columns = tuple(matrix.names if columns is None else columns)
    if len(columns) < 2:
        raise ValueError("PCA needs at least 2 columns")
    i0, i1 = (0, len(matrix)) if fit_range is None else matrix.index_range(fit_range)
    if i1 - i0 < 2:
        raise ValueError("PCA fit range must contain at least 2 rows")
    x = matrix.values(columns)
    block = x[i0:i1]
    if not np.all(np.isfinite(block)):
        raise ValueError("PCA fit block contains non-finite values")
    mean = block.mean(axis=0)
    sd = block.std(axis=0)
    scale = np.where(sd < EPS, np.inf, sd)
    z = (block - mean) / scale
    anchor = columns.index("close") if "close" in columns else 0
    total = float((z**2).sum())
    if np.linalg.matrix_rank(z) < 2:
        k = int(np.argmax(sd))
        logger.warning("PCA fit block is rank-deficient; using column %r alone", columns[k])
        axis = np.zeros(len(columns))
        axis[k] = 1.0
        fallback = True
    else:
        cov = z.T @ z / len(z)
        w, v = np.linalg.eigh(cov)
        axis = v[:, -1]
        fallback = False
    if axis[anchor] < 0 or (axis[anchor] == 0 and axis[np.argmax(np.abs(axis))] < 0):
        axis = -axis
    proj_fit = z @ axis
    explained = float((proj_fit**2).sum() / total) if total > 0 else 0.0
    values = ((x - mean) / scale) @ axis
    return PrincipalComponent(values, axis, mean, scale, explained, columns, fallback)


def _column_layout(spec: FeatureSpec) -> dict[str, ColumnMeta]:
    fast, slow, signal = spec.macd_spans
    meta = {
        "open": ColumnMeta("price", open_visible=True),
        "high": ColumnMeta("price"),
        "low": ColumnMeta("price"),
        "close": ColumnMeta("price"),
        "volume": ColumnMeta("price"),
        "close_diff": ColumnMeta("technical", warmup=1),
        "macd": ColumnMeta("technical", warmup=slow),
        "macd_signal": ColumnMeta("technical", warmup=slow + signal),
        "macd_hist": ColumnMeta("technical", warmup=slow + signal),
        "rsi_price": ColumnMeta("technical", warmup=spec.rsi_period),
        "rsi_volume": ColumnMeta("technical", warmup=spec.rsi_period),
        "ema_spread": ColumnMeta("technical", warmup=spec.ema_spread_span),
    }
    for h in spec.var_horizons:
        meta[f"var_{h}"] = ColumnMeta("technical", warmup=max(h, spec.vol_ewma_span))
    meta["pca1"] = ColumnMeta("technical")
    return meta


def technical_column_names(spec: FeatureSpec) -> list[str]:
    return list(_column_layout(spec))


def build_feature_matrix(prices: PriceSeries, fundamentals: Sequence[FundamentalSeries] = (),
                         spec: FeatureSpec = FeatureSpec(), pca_fit=None) -> FeatureMatrix:
    """Feature columns for ``prices`` with warm-up rows dropped from the front.

    ``pca_fit`` is the fit range of the PCA column, given as row bounds of
    the *returned* matrix or a (start, end) date pair; ``None`` fits on all rows.
    Use :func:`refit_pca` to re-anchor it on a training span.
    """
    meta = _column_layout(spec)
    close = prices.close
    n = len(prices)
    need = max(m.warmup for m in meta.values())
    if n <= need + 1:
        raise InsufficientDataError(f"need more than {need + 1} candles, got {n}")
    cols: dict[str, np.ndarray] = {k: np.asarray(getattr(prices, k), dtype=float) for k in PRICE_COLUMNS}
    cols["close_diff"] = np.concatenate([[np.nan], np.diff(close)])
    cols["macd"], cols["macd_signal"], cols["macd_hist"] = macd(close, spec.macd_spans)
    cols["rsi_price"] = rsi(close, spec.rsi_period)
    cols["rsi_volume"] = rsi(prices.volume, spec.rsi_period)
    cols["ema_spread"] = close - ema(close, spec.ema_spread_span)
    for h in spec.var_horizons:
        cols[f"var_{h}"], _ = vol_adjusted_return(close, h, spec.vol_ewma_span)
    if spec.include_fundamentals:
        for f in fundamentals:
            name = f"fund_{f.name}"
            if name in cols:
                raise ValueError(f"duplicate fundamental {f.name!r}")
            cols[name] = f.align(prices.dates)
            meta[name] = ColumnMeta("fundamental")
    # warm-up: every column defined and past its nominal warm-up
    first = need
    for k, v in cols.items():
        bad = np.flatnonzero(~np.isfinite(v))
        if len(bad):
            if bad[-1] >= n - 1:
                raise InsufficientDataError(f"column {k!r} undefined at the last row")
            first = max(first, int(bad[-1]) + 1)
    sliced = {k: v[first:] for k, v in cols.items()}
    cols_order = [k for k in meta if k != "pca1"]
    base = FeatureMatrix(prices.dates[first:], {k: sliced[k] for k in cols_order}, meta, prices.slice(first, n))
    pc = pca_first_component(base, pca_fit, PRICE_COLUMNS)
    ordered = {}
    for k in meta:
        ordered[k] = pc.values if k == "pca1" else sliced[k]
    return FeatureMatrix(base.dates, ordered, meta, base.prices)


def refit_pca(matrix: FeatureMatrix, fit_range) -> FeatureMatrix:
    """Recompute the ``pca1`` column with its axis fitted on ``fit_range`` only."""
    if matrix.normalizer is not None:
        raise ValueError("refit PCA before normalising")
    pc = pca_first_component(matrix, fit_range, PRICE_COLUMNS)
    cols = dict(matrix.columns)
    cols["pca1"] = pc.values
    return matrix.with_columns(cols)


# ---------------------------------------------------------------------------
# normalisation


@dataclass(frozen=True)
class Normalizer:
    names: tuple[str, ...]
    mean: np.ndarray
    std: np.ndarray
    fit_dates: tuple[str, str]

    @property
    def degenerate(self) -> np.ndarray:
        return self.std < EPS

    def sd_of(self, name: str) -> float:
        return float(self.std[self.names.index(name)])


def fit_normalizer(matrix: FeatureMatrix, span=None) -> Normalizer:
    i0, i1 = (0, len(matrix)) if span is None else matrix.index_range(span)
    if i1 <= i0:
        raise ValueError("normalizer fit range is empty")
    block = matrix.values()[i0:i1]
    return Normalizer(
        tuple(matrix.names), block.mean(axis=0), block.std(axis=0),
        (str(matrix.dates[i0]), str(matrix.dates[i1 - 1])),
    )


def apply_normalizer(matrix: FeatureMatrix, normalizer: Normalizer) -> FeatureMatrix:
    """Z-score every column with the fitted statistics; constant columns become 0."""
    if tuple(matrix.names) != normalizer.names:
        raise ValueError("normalizer was fitted on a different column set")
    scale = np.where(normalizer.degenerate, 1.0, normalizer.std)
    z = (matrix.values() - normalizer.mean) / scale
    z[:, normalizer.degenerate] = 0.0
    return matrix.with_columns({n: z[:, j] for j, n in enumerate(matrix.names)}, normalizer=normalizer)


# ---------------------------------------------------------------------------
# observations


@dataclass(frozen=True)
class Slot:
    feature: str
    lag: int | None  # None for position slots

    @property
    def label(self) -> str:
        if self.lag is None:
            return self.feature
        return f"{self.feature}[t]" if self.lag == 0 else f"{self.feature}[t-{self.lag}]"


@dataclass(frozen=True)
class ObservationLayout:
    slots: tuple[Slot, ...]
    full_columns: tuple[str, ...]
    partial_columns: tuple[str, ...]
    lookback: int

    def __len__(self) -> int:
        return len(self.slots)

    @property
    def feature_size(self) -> int:
        """Slots before the position one-hot."""
        return len(self.slots) - len(POSITION_SLOTS)

    @property
    def position_index(self) -> np.ndarray:
        return np.arange(self.feature_size, len(self.slots))


def observation_layout(matrix: FeatureMatrix, spec: FeatureSpec) -> ObservationLayout:
    full = tuple(matrix.names)
    partial = tuple(n for n in full if matrix.meta[n].open_visible)
    slots = [Slot(n, lag) for lag in range(spec.lookback, 0, -1) for n in full]
    slots += [Slot(n, 0) for n in partial]
    slots += [Slot(p, None) for p in POSITION_SLOTS]
    return ObservationLayout(tuple(slots), full, partial, spec.lookback)


@dataclass(frozen=True, eq=False)
class Observation:
    vector: np.ndarray
    layout: ObservationLayout
    t: int
    position: int
    normalized: bool = False


def one_hot(position: int) -> np.ndarray:
    v = np.zeros(3)
    v[POSITIONS.index(int(position))] = 1.0
    return v


def observation_table(matrix: FeatureMatrix, spec: FeatureSpec) -> tuple[np.ndarray, ObservationLayout]:
    """Feature part of the observation for every row ``t >= lookback`` (row ``i`` is day ``lookback + i``)."""
    layout = observation_layout(matrix, spec)
    L = spec.lookback
    n = len(matrix)
    if n <= L:
        raise InsufficientDataError(f"matrix has {n} rows, lookback {L}")
    full = matrix.values(layout.full_columns)
    part = matrix.values(layout.partial_columns)
    blocks = [full[L - lag: n - lag] for lag in range(L, 0, -1)]
    blocks.append(part[L:])
    return np.concatenate(blocks, axis=1), layout


def build_observation(matrix: FeatureMatrix, t: int, position: int, spec: FeatureSpec) -> Observation:
    """Observation for day ``t`` holding ``position``.

    Layout: full rows ``t-L .. t-1`` (oldest first), then the open-visible
    columns of row ``t``, then the position one-hot (short, flat, long).
    """
    L = spec.lookback
    if t < L:
        raise InsufficientDataError(f"day index {t} has fewer than {L} rows of history")
    if t >= len(matrix):
        raise IndexError(f"day index {t} out of range")
    layout = observation_layout(matrix, spec)
    full = matrix.values(layout.full_columns)
    part = [matrix.columns[n][t] for n in layout.partial_columns]
    vec = np.concatenate([full[t - L:t].ravel(), part, one_hot(position)])
    return Observation(vec, layout, t, int(position), matrix.normalizer is not None)


def slot_noise_scale(layout: ObservationLayout, normalizer: Normalizer, normalized: bool) -> np.ndarray:
    """Fit-range std of every slot in observation units (0 for position slots)."""
    sd = np.zeros(len(layout))
    for j, slot in enumerate(layout.slots[: layout.feature_size]):
        raw = normalizer.sd_of(slot.feature)
        if normalized:
            sd[j] = 0.0 if raw < EPS else 1.0
        else:
            sd[j] = raw
    return sd


def add_noise(obs: Observation, normalizer: Normalizer, noise_fraction: float,
              rng: np.random.Generator) -> Observation:
    """Add N(0, (noise_fraction * slot sd)^2) to every feature slot; position slots untouched."""
    if noise_fraction == 0:
        return obs
    scale = noise_fraction * slot_noise_scale(obs.layout, normalizer, obs.normalized)
    noisy = obs.vector + rng.standard_normal(len(scale)) * scale
    return Observation(noisy, obs.layout, obs.t, obs.position, obs.normalized)
