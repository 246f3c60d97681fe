"""Daily candle and fundamental series: CSV ingestion, validation and synthetic regimes.

Prices are plain float64 in pence/therm. A :class:`PriceSeries` stores its
columns as read-only numpy arrays so it can be shared between training workers.
"""
from __future__ import annotations

import csv
import datetime as dt
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

logger = logging.getLogger(__name__)

CANDLE_HEADER = ("date", "open", "high", "low", "close", "volume")
REGIMES = ("gbm", "ou", "regime_switch")
TRADING_DAYS = 252


class DataError(ValueError):
    """Base class for ingestion problems."""


class ParseError(DataError):
    """A CSV row or cell could not be parsed."""


class ValidationError(DataError):
    """A series violates a candle or ordering invariant."""

    def __init__(self, issues: Sequence["Issue"]):
        self.issues = list(issues)
        super().__init__("; ".join(str(i) for i in self.issues))


@dataclass(frozen=True)
class Candle:
    date: dt.date
    open: float
    high: float
    low: float
    close: float
    volume: float


@dataclass(frozen=True)
class Issue:
    date: dt.date | None
    rule: str

    def __str__(self) -> str:
        return f"{self.date}: {self.rule}"


def _readonly(values, dtype=np.float64) -> np.ndarray:
    arr = np.array(values, dtype=dtype, copy=True)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class PriceSeries:
    """Ordered daily candles in columnar form."""

    dates: np.ndarray
    open: np.ndarray
    high: np.ndarray
    low: np.ndarray
    close: np.ndarray
    volume: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "dates", _readonly(self.dates, "datetime64[D]"))
        for name in CANDLE_HEADER[1:]:
            object.__setattr__(self, name, _readonly(getattr(self, name)))
        n = len(self.dates)
        if any(len(getattr(self, c)) != n for c in CANDLE_HEADER[1:]):
            raise ValueError("all candle columns must have the same length")

    def __len__(self) -> int:
        return len(self.dates)

    def __iter__(self) -> Iterator[Candle]:
        for i in range(len(self)):
            yield self.candle(i)

    def __eq__(self, other) -> bool:
        if not isinstance(other, PriceSeries):
            return NotImplemented
        return all(np.array_equal(getattr(self, c), getattr(other, c)) for c in ("dates",) + CANDLE_HEADER[1:])

    def candle(self, i: int) -> Candle:
        return Candle(
            self.dates[i].astype(dt.date),
            float(self.open[i]),
            float(self.high[i]),
            float(self.low[i]),
            float(self.close[i]),
            float(self.volume[i]),
        )

    @classmethod
    def from_candles(cls, candles: Sequence[Candle]) -> "PriceSeries":
        return cls(
            dates=[np.datetime64(c.date, "D") for c in candles],
            open=[c.open for c in candles],
            high=[c.high for c in candles],
            low=[c.low for c in candles],
            close=[c.close for c in candles],
            volume=[c.volume for c in candles],
        )

    def replace(self, **columns) -> "PriceSeries":
        """Copy with some columns swapped out (used by perturbation probes)."""
        kwargs = {c: getattr(self, c) for c in ("dates",) + CANDLE_HEADER[1:]}
        kwargs.update(columns)
        return PriceSeries(**kwargs)

    def slice(self, start: int, stop: int) -> "PriceSeries":
        return PriceSeries(**{c: getattr(self, c)[start:stop] for c in ("dates",) + CANDLE_HEADER[1:]})


@dataclass(frozen=True, eq=False)
class FundamentalSeries:
    name: str
    dates: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "dates", _readonly(self.dates, "datetime64[D]"))
        object.__setattr__(self, "values", _readonly(self.values))

    def __len__(self) -> int:
        return len(self.dates)

    def align(self, dates: np.ndarray) -> np.ndarray:
        """Values on ``dates``, forward-filled from the most recent past observation.

        Dates before the first observation get NaN; nothing is ever filled backward.
        """
        idx = np.searchsorted(self.dates, dates, side="right") - 1
        out = np.full(len(dates), np.nan)
        ok = idx >= 0
        out[ok] = self.values[idx[ok]]
        return out


def validate(series: PriceSeries) -> list[Issue]:
    """Every invariant violation in ``series``; an empty list means valid."""
    issues: list[Issue] = []
    dates = series.dates
    seen: set = set()
    for i in range(len(series)):
        day = dates[i].astype(dt.date)
        o, h, l, c, v = (float(getattr(series, k)[i]) for k in CANDLE_HEADER[1:])
        if day in seen:
            issues.append(Issue(day, "duplicate date"))
        seen.add(day)
        if i > 0 and dates[i] < dates[i - 1]:
            issues.append(Issue(day, "dates not increasing"))
        if not all(math.isfinite(x) for x in (o, h, l, c, v)):
            issues.append(Issue(day, "non-finite value"))
            continue
        if min(o, h, l, c) <= 0:
            issues.append(Issue(day, "price must be > 0"))
        if l > min(o, c):
            issues.append(Issue(day, "low > min(open, close)"))
        if h < max(o, c):
            issues.append(Issue(day, "high < max(open, close)"))
        if l > h:
            issues.append(Issue(day, "low > high"))
        if v < 0:
            issues.append(Issue(day, "volume < 0"))
    return issues


def _parse_date(text: str, where: str) -> dt.date:
    try:
        return dt.date.fromisoformat(text.strip())
    except ValueError:
        raise ParseError(f"{where}: bad date {text!r}") from None


def _parse_float(text: str, where: str) -> float:
    try:
        return float(text)
    except ValueError:
        raise ParseError(f"{where}: non-numeric value {text!r}") from None


def load_candles_csv(path: str | Path) -> PriceSeries:
    """Read a ``date,open,high,low,close,volume`` file, sort by date and validate.

    Raises:
        FileNotFoundError: if ``path`` does not exist.
        ParseError: malformed header or row; the message names the line.
        ValidationError: any candle/ordering invariant fails.
    """
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(h.strip() for h in header) != CANDLE_HEADER:
            raise ParseError(f"{path}: line 1: header must be {','.join(CANDLE_HEADER)}")
        candles = []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            where = f"{path}: line {lineno}"
            if len(row) != len(CANDLE_HEADER):
                raise ParseError(f"{where}: expected {len(CANDLE_HEADER)} fields, got {len(row)}")
            day = _parse_date(row[0], where)
            o, h, l, c, v = (_parse_float(x, where) for x in row[1:])
            candles.append(Candle(day, o, h, l, c, v))
    candles.sort(key=lambda c: c.date)
    series = PriceSeries.from_candles(candles)
    issues = validate(series)
    if issues:
        raise ValidationError(issues)
    return series


def write_candles_csv(series: PriceSeries, path: str | Path) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(CANDLE_HEADER)
        for c in series:
            # repr round-trips float64 exactly
            writer.writerow([c.date.isoformat(), repr(c.open), repr(c.high), repr(c.low), repr(c.close), repr(c.volume)])
    return path


def load_fundamentals_csv(path: str | Path) -> list[FundamentalSeries]:
    """Read a wide ``date,<name1>,<name2>,...`` file.

    Empty cells are gaps: they are forward-filled from the previous observation
    of the same column, and a column's leading gaps are dropped so the series
    starts at its first observed date.
    """
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header or header[0].strip() != "date" or len(header) < 2:
            raise ParseError(f"{path}: line 1: header must be date,<name>,...")
        names = [h.strip() for h in header[1:]]
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise ParseError(f"{path}: line {lineno}: expected {len(header)} fields, got {len(row)}")
            day = _parse_date(row[0], f"{path}: line {lineno}")
            cells = []
            for name, cell in zip(names, row[1:]):
                cell = cell.strip()
                cells.append(np.nan if cell == "" else _parse_float(cell, f"{path}: line {lineno}, column {name!r}"))
            rows.append((day, cells))
    rows.sort(key=lambda r: r[0])
    dates = np.array([np.datetime64(r[0], "D") for r in rows], dtype="datetime64[D]")
    if len(np.unique(dates)) != len(dates):
        raise ValidationError([Issue(None, "duplicate date in fundamentals")])
    out = []
    for j, name in enumerate(names):
        col = np.array([r[1][j] for r in rows], dtype=float)
        observed = np.flatnonzero(~np.isnan(col))
        if len(observed) == 0:
            logger.warning("fundamental column %r has no observations; skipped", name)
            continue
        col = col[observed[0]:]
        last = np.maximum.accumulate(np.where(np.isnan(col), 0, np.arange(len(col))))
        out.append(FundamentalSeries(name, dates[observed[0]:], col[last]))
    return out


def write_fundamentals_csv(series: Sequence[FundamentalSeries], path: str | Path) -> Path:
    path = Path(path)
    all_dates = np.unique(np.concatenate([s.dates for s in series]))
    lookup = [dict(zip(s.dates.tolist(), s.values.tolist())) for s in series]
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["date"] + [s.name for s in series])
        for d in all_dates.tolist():
            writer.writerow([d.isoformat()] + [repr(m[d]) if d in m else "" for m in lookup])
    return path


@dataclass(frozen=True)
class SyntheticSpec:
    """Parameters of a synthetic daily price path.

    ``drift`` and ``volatility`` are annualised (time step 1/252). For ``gbm``
    and ``regime_switch`` they are log-return parameters; for ``ou`` the
    volatility is in p/therm per sqrt(year) and ``speed`` is the annual
    mean-reversion rate towards ``level``. ``switch_prob`` is the daily
    probability of flipping the sign of the drift in ``regime_switch``.
    """

    regime: str = "gbm"
    length: int = 1000
    seed: int = 0
    drift: float = 0.0
    volatility: float = 0.3
    speed: float = 5.0
    level: float = 50.0
    start_price: float | None = None
    switch_prob: float = 0.01
    intraday_noise: float = 0.01
    volume_mean: float = 1000.0
    start_date: str = "2009-01-01"

    def __post_init__(self):
        if self.regime not in REGIMES:
            raise ValueError(f"regime must be one of {REGIMES}, got {self.regime!r}")
        if not self.volatility > 0:
            raise ValueError("volatility must be > 0")
        if self.length < 2:
            raise ValueError("length must be >= 2")
        if self.regime == "ou" and not self.speed > 0:
            raise ValueError("ou speed must be > 0")
        if not 0 <= self.switch_prob <= 1:
            raise ValueError("switch_prob must be in [0, 1]")
        if not 0 <= self.intraday_noise < 1:
            raise ValueError("intraday_noise must be in [0, 1)")
        if self.level <= 0 or (self.start_price is not None and self.start_price <= 0):
            raise ValueError("prices must be > 0")


def business_days(start: str | dt.date, n: int) -> np.ndarray:
    """``n`` consecutive Monday-Friday dates starting at the first business day >= ``start``."""
    first = np.busday_offset(np.datetime64(start, "D"), 0, roll="forward")
    return np.busday_offset(first, np.arange(n), roll="forward")


def business_days_between(start: str, end: str) -> int:
    return int(np.busday_count(np.datetime64(start, "D"), np.datetime64(end, "D") + 1))


def _close_path(spec: SyntheticSpec, rng: np.random.Generator) -> np.ndarray:
    dt_ = 1.0 / TRADING_DAYS
    n = spec.length
    start = spec.start_price if spec.start_price is not None else spec.level
    eps = rng.standard_normal(n - 1)
    if spec.regime == "gbm":
        steps = (spec.drift - 0.5 * spec.volatility**2) * dt_ + spec.volatility * math.sqrt(dt_) * eps
        return start * np.exp(np.concatenate([[0.0], np.cumsum(steps)]))
    if spec.regime == "regime_switch":
        flips = rng.random(n - 1) < spec.switch_prob
        sign = np.where(np.cumsum(flips) % 2 == 0, 1.0, -1.0)
        steps = (sign * spec.drift - 0.5 * spec.volatility**2) * dt_ + spec.volatility * math.sqrt(dt_) * eps
        return start * np.exp(np.concatenate([[0.0], np.cumsum(steps)]))
    # exact OU transition, floored so prices stay positive
    decay = math.exp(-spec.speed * dt_)
    sd = spec.volatility * math.sqrt((1 - decay**2) / (2 * spec.speed))
    floor = 0.01 * spec.level
    x = np.empty(n)
    x[0] = start
    for i in range(1, n):
        x[i] = max(spec.level + (x[i - 1] - spec.level) * decay + sd * eps[i - 1], floor)
    return x


def generate(spec: SyntheticSpec) -> PriceSeries:
    """Deterministic synthetic candles for ``spec``.

    The close follows the named process. Open is the previous close times a
    small gap; high/low widen max/min(open, close) by ``|u|`` with
    ``u ~ U(-intraday_noise, intraday_noise)``. Volume is lognormal.
    """
    rng = np.random.default_rng(spec.seed)
    close = _close_path(spec, rng)
    n = len(close)
    noise = spec.intraday_noise
    gap = rng.uniform(-noise, noise, n) * 0.5
    prev = np.concatenate([[close[0]], close[:-1]])
    open_ = prev * (1 + gap)
    high = np.maximum(open_, close) * (1 + np.abs(rng.uniform(-noise, noise, n)))
    low = np.minimum(open_, close) * (1 - np.abs(rng.uniform(-noise, noise, n)))
    volume = spec.volume_mean * rng.lognormal(-0.125, 0.5, n)
    return PriceSeries(business_days(spec.start_date, n), open_, high, low, close, volume)


def linear_ramp(length: int, start: float = 50.0, slope: float = 0.05, start_date: str = "2009-01-01",
                volume: float = 1000.0) -> PriceSeries:
    """Noiseless linear trend: open = previous close, flat intraday range, constant volume."""
    close = start + slope * np.arange(length)
    open_ = np.concatenate([[close[0]], close[:-1]])
    return PriceSeries(business_days(start_date, length), open_, np.maximum(open_, close),
                       np.minimum(open_, close), close, np.full(length, volume))


def synthetic_fundamentals(prices: PriceSeries, names: Sequence[str], seed: int = 0,
                           signal: float = 0.3, lag: int = 5) -> list[FundamentalSeries]:
    """Stand-in fundamental series: a lagged, noisy copy of the close mixed with an AR(1) factor.

    Only data up to ``t - lag`` enters the value at ``t`` so the series is causal.
    """
    rng = np.random.default_rng(seed)
    n = len(prices)
    z = 10.0 * (prices.close / prices.close[0] - 1.0)  # relative move since the first day
    lagged = np.concatenate([np.full(lag, z[0]), z[:-lag]]) if lag else z
    out = []
    for name in names:
        ar = np.zeros(n)
        e = rng.standard_normal(n)
        for i in range(1, n):
            ar[i] = 0.95 * ar[i - 1] + 0.3 * e[i]
        out.append(FundamentalSeries(name, prices.dates, 100 + 10 * (signal * lagged + ar)))
    return out
