"""Walk-forward evaluation over calendar-year folds and the headline trading metrics."""
from __future__ import annotations

import csv
import datetime as dt
import json
import logging
import math
import traceback
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .env import EnvConfig, EpisodeRecord, Policy, annualized_sharpe, run_policy
from .features import FeatureMatrix, apply_normalizer, fit_normalizer, refit_pca

logger = logging.getLogger(__name__)

SCHEMES = ("anchored", "sliding")


@dataclass(frozen=True)
class WalkForwardSpec:
    """Year-gridded walk-forward layout over ``start_year .. end_year`` (inclusive).

    ``train_years`` is the minimum training length for ``anchored`` and the
    fixed one for ``sliding``.
    """

    scheme: str = "anchored"
    train_years: int = 4
    test_years: int = 1
    start_year: int = 2009
    end_year: int = 2020
    far_future: bool = False

    def __post_init__(self):
        if self.scheme not in SCHEMES:
            raise ValueError(f"scheme must be one of {SCHEMES}, got {self.scheme!r}")
        if self.train_years < 1 or self.test_years < 1:
            raise ValueError("train_years and test_years must be >= 1")
        if self.end_year < self.start_year:
            raise ValueError("end_year before start_year")

    @classmethod
    def from_dates(cls, dates: np.ndarray, coverage: float = 0.95, **kwargs) -> "WalkForwardSpec":
        """Spec spanning the calendar years that ``dates`` covers (partial first/last years dropped)."""
        years = dates.astype("datetime64[Y]").astype(int) + 1970
        full = []
        for y in np.unique(years):
            expected = np.busday_count(np.datetime64(f"{y}-01-01"), np.datetime64(f"{y + 1}-01-01"))
            if np.sum(years == y) >= coverage * expected:
                full.append(int(y))
        if not full:
            raise ValueError("no complete calendar year in the data")
        return cls(start_year=full[0], end_year=full[-1], **kwargs)


@dataclass(frozen=True)
class Fold:
    """Half-open date spans ``[start, end)``."""

    train: tuple[dt.date, dt.date]
    test: tuple[dt.date, dt.date]

    def __post_init__(self):
        if not self.train[1] <= self.test[0]:
            raise ValueError("training span must end before the test span starts")

    @property
    def test_year(self) -> int:
        return self.test[0].year


def make_folds(spec: WalkForwardSpec) -> list[Fold]:
    first_test = spec.start_year + spec.train_years
    if first_test + spec.test_years - 1 > spec.end_year:
        raise ValueError(
            f"{spec.start_year}-{spec.end_year} is too short for {spec.train_years} training "
            f"+ {spec.test_years} test years"
        )
    folds = []
    y = first_test
    while y + spec.test_years - 1 <= spec.end_year:
        train_start = spec.start_year if spec.scheme == "anchored" else y - spec.train_years
        folds.append(Fold(
            (dt.date(train_start, 1, 1), dt.date(y, 1, 1)),
            (dt.date(y, 1, 1), dt.date(y + spec.test_years, 1, 1)),
        ))
        y += spec.test_years
    return folds


# ---------------------------------------------------------------------------
# metrics


def max_drawdown(equity) -> float:
    """Largest fall from a running peak of the cumulative P&L curve."""
    e = np.asarray(equity, dtype=float)
    if len(e) == 0:
        raise ValueError("empty equity curve")
    return float(np.max(np.maximum.accumulate(e) - e))


def max_drawdown_pct(equity) -> float | None:
    """Largest fall as a percentage of the running peak, over points whose peak is > 0."""
    e = np.asarray(equity, dtype=float)
    peak = np.maximum.accumulate(e)
    ok = peak > 0
    if not ok.any():
        return None
    return float(np.max((peak[ok] - e[ok]) / peak[ok]) * 100.0)


def turnover(positions, initial: int = 0) -> float:
    """sum |A_t - A_{t-1}|, counting the entry from ``initial``."""
    p = np.concatenate([[initial], np.asarray(positions, dtype=float)])
    return float(np.sum(np.abs(np.diff(p))))


@dataclass
class FoldMetrics:
    sharpe: float
    sharpe_degenerate: bool
    max_drawdown: float
    max_drawdown_pct: float | None
    pnl: float
    turnover: float
    steps: int

    @classmethod
    def from_record(cls, record: EpisodeRecord) -> "FoldMetrics":
        sr, degenerate = annualized_sharpe(record.rewards) if len(record) >= 2 else (0.0, True)
        eq = record.equity
        return cls(sr, degenerate, max_drawdown(eq), max_drawdown_pct(eq), float(np.sum(record.rewards)),
                   turnover(record.positions, record.initial_position), len(record))


@dataclass
class FoldResult:
    fold: Fold
    metrics: FoldMetrics | None
    error: str | None = None
    far_future: dict[int, float] = field(default_factory=dict)
    record: EpisodeRecord | None = field(default=None, repr=False)

    def to_dict(self) -> dict:
        return {
            "train": [self.fold.train[0].isoformat(), self.fold.train[1].isoformat()],
            "test": [self.fold.test[0].isoformat(), self.fold.test[1].isoformat()],
            "metrics": None if self.metrics is None else asdict(self.metrics),
            "error": self.error,
            "far_future_sharpe": {str(k): v for k, v in sorted(self.far_future.items())},
        }


def _mean_sd(values: Sequence[float]) -> tuple[float, float]:
    if not values:
        return 0.0, 0.0
    arr = np.asarray(values, dtype=float)
    return float(arr.mean()), float(arr.std(ddof=1)) if len(arr) > 1 else 0.0


@dataclass
class MetricsReport:
    """Per-fold metrics plus aggregates over the successful folds.

    ``aggregate`` metrics treat the test spans as one back-to-back book;
    ``sharpe_mean``/``sharpe_sd`` summarise the per-fold Sharpe ratios (sample sd).
    P&L is in p/therm per unit position.
    """

    name: str
    folds: list[FoldResult]
    stored_aggregate: dict | None = field(default=None, repr=False)

    @property
    def ok(self) -> list[FoldResult]:
        return [f for f in self.folds if f.metrics is not None]

    @property
    def sharpe_mean(self) -> float:
        return _mean_sd([f.metrics.sharpe for f in self.ok])[0]

    @property
    def sharpe_sd(self) -> float:
        return _mean_sd([f.metrics.sharpe for f in self.ok])[1]

    @property
    def cumulative_pnl(self) -> float:
        return float(sum(f.metrics.pnl for f in self.ok))

    @property
    def total_turnover(self) -> float:
        return float(sum(f.metrics.turnover for f in self.ok))

    def equity_curve(self) -> tuple[np.ndarray, np.ndarray]:
        """(dates, cumulative P&L) across the test spans in order, P&L carried over between folds."""
        dates, pnl = [], []
        for f in self.ok:
            if f.record is None:
                continue
            dates.append(f.record.dates)
            pnl.append(f.record.rewards)
        if not pnl:
            return np.array([], dtype="datetime64[D]"), np.array([])
        return np.concatenate(dates), np.cumsum(np.concatenate(pnl))

    @property
    def aggregate(self) -> dict:
        if self.stored_aggregate is not None:
            return self.stored_aggregate
        pnl_mean, pnl_sd = _mean_sd([f.metrics.pnl for f in self.ok])
        dd_mean, dd_sd = _mean_sd([f.metrics.max_drawdown for f in self.ok])
        to_mean, to_sd = _mean_sd([f.metrics.turnover for f in self.ok])
        rewards = np.concatenate([f.record.rewards for f in self.ok if f.record is not None] or [np.array([])])
        overall = annualized_sharpe(rewards) if len(rewards) >= 2 else (0.0, True)
        equity = np.concatenate([[0.0], np.cumsum(rewards)])
        return {
            "sharpe_mean": self.sharpe_mean,
            "sharpe_sd": self.sharpe_sd,
            "sharpe_overall": overall[0],
            "sharpe_overall_degenerate": overall[1],
            "max_drawdown": max_drawdown(equity),
            "max_drawdown_pct": max_drawdown_pct(equity),
            "max_drawdown_fold_mean": dd_mean,
            "max_drawdown_fold_sd": dd_sd,
            "cumulative_pnl": self.cumulative_pnl,
            "pnl_fold_mean": pnl_mean,
            "pnl_fold_sd": pnl_sd,
            "turnover": self.total_turnover,
            "turnover_fold_mean": to_mean,
            "turnover_fold_sd": to_sd,
            "folds_ok": len(self.ok),
            "folds_failed": len(self.folds) - len(self.ok),
        }

    def to_dict(self) -> dict:
        return {"name": self.name, "aggregate": self.aggregate, "folds": [f.to_dict() for f in self.folds]}

    def to_json(self, path: str | Path) -> Path:
        path = Path(path)
        path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")
        return path

    @classmethod
    def from_json(cls, path: str | Path) -> "MetricsReport":
        data = json.loads(Path(path).read_text())
        folds = []
        for f in data["folds"]:
            fold = Fold(tuple(dt.date.fromisoformat(d) for d in f["train"]),
                        tuple(dt.date.fromisoformat(d) for d in f["test"]))
            m = None if f["metrics"] is None else FoldMetrics(**f["metrics"])
            folds.append(FoldResult(fold, m, f["error"], {int(k): v for k, v in f["far_future_sharpe"].items()}))
        return cls(data["name"], folds, data["aggregate"])


# ---------------------------------------------------------------------------
# orchestration

StrategyFactory = Callable[[FeatureMatrix, tuple[int, int], Fold], Policy]


@dataclass(frozen=True)
class PreparedFold:
    matrix: FeatureMatrix
    train: tuple[int, int]
    test: tuple[int, int]


def prepare_fold(matrix: FeatureMatrix, fold: Fold) -> PreparedFold:
    """Refit the PCA axis and the normalizer on the fold's training rows only."""
    train = matrix.index_range(fold.train)
    test = matrix.index_range(fold.test)
    if train[1] - train[0] < 2:
        raise ValueError(f"fold {fold.test_year}: fewer than 2 training rows")
    if test[1] - test[0] < 2:
        raise ValueError(f"fold {fold.test_year}: fewer than 2 test rows")
    refit = refit_pca(matrix, slice(*train))
    norm = fit_normalizer(refit, slice(*train))
    return PreparedFold(apply_normalizer(refit, norm), train, test)


def run_walk_forward(factory: StrategyFactory, matrix: FeatureMatrix, spec: WalkForwardSpec,
                     env_config: EnvConfig = EnvConfig(), name: str = "strategy") -> MetricsReport:
    """Fit on each fold's training span, evaluate deterministically on its test span.

    ``matrix`` must be un-normalised; normalisation and PCA are refitted per fold.
    A fold that raises is kept in the report with its error message.
    """
    if matrix.normalizer is not None:
        raise ValueError("pass the raw feature matrix; folds refit their own normalizer")
    folds = make_folds(spec)
    results = []
    for fold in folds:
        try:
            prep = prepare_fold(matrix, fold)
            policy = factory(prep.matrix, prep.train, fold)
            record = run_policy(policy, prep.matrix, slice(*prep.test), env_config)
            result = FoldResult(fold, FoldMetrics.from_record(record), record=record)
            if spec.far_future:
                for year in range(fold.test[1].year, spec.end_year + 1):
                    span = prep.matrix.index_range((dt.date(year, 1, 1), dt.date(year + 1, 1, 1)))
                    if span[1] - span[0] >= 2:
                        rec = run_policy(policy, prep.matrix, slice(*span), env_config)
                        result.far_future[year] = annualized_sharpe(rec.rewards)[0]
        except Exception as exc:  # recorded per fold, never dropped silently
            logger.error("fold %d failed: %s", fold.test_year, exc)
            logger.debug("%s", traceback.format_exc())
            result = FoldResult(fold, None, f"{type(exc).__name__}: {exc}")
        results.append(result)
    return MetricsReport(name, results)


# ---------------------------------------------------------------------------
# summary


@dataclass(frozen=True)
class SummaryRow:
    name: str
    sharpe_mean: float
    sharpe_sd: float
    max_drawdown: float
    max_drawdown_pct: float | None
    cumulative_pnl: float


def summary(reports: Sequence[MetricsReport], pnl_scale: float = 1.0) -> tuple[list[SummaryRow], list[dict]]:
    """Table rows and (sharpe, drawdown, pnl) scatter records, ordered by name.

    ``pnl_scale`` converts price-unit P&L and drawdown to money (for example contract size).
    """
    rows = []
    for rep in sorted(reports, key=lambda r: r.name):
        agg = rep.aggregate
        rows.append(SummaryRow(rep.name, agg["sharpe_mean"], agg["sharpe_sd"], agg["max_drawdown"] * pnl_scale,
                               agg["max_drawdown_pct"], agg["cumulative_pnl"] * pnl_scale))
    scatter = [{"name": r.name, "x": r.sharpe_mean, "y": r.max_drawdown, "color": r.cumulative_pnl} for r in rows]
    return rows, scatter


def write_summary_csv(rows: Sequence[SummaryRow], path: str | Path) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["name", "sharpe_mean", "sharpe_sd", "max_drawdown", "max_drawdown_pct", "cumulative_pnl"])
        for r in rows:
            writer.writerow([r.name, repr(r.sharpe_mean), repr(r.sharpe_sd), repr(r.max_drawdown),
                             "" if r.max_drawdown_pct is None else repr(r.max_drawdown_pct), repr(r.cumulative_pnl)])
    return path
