"""``gasrl`` command-line entry point.

Every command reads the same flat config (``--config``, overridden by
``--set key=value``), writes its artifacts under ``output_dir`` and finishes
with ``manifest_<command>.json`` listing inputs, outputs and the config hash.

Exit codes: 0 success, 1 invalid config or usage, 2 runtime failure.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .backtest import (MetricsReport, make_folds, prepare_fold, run_walk_forward, summary,
                       write_summary_csv)
from .baselines import SelectorConfig, bollinger_strategy, buy_and_hold, macd_strategy, rl_selector
from .config import ConfigError, RunConfig, load_config, parse_overrides
from .dqn import QNetwork, greedy_policy, train
from .ensemble import EnsemblePolicy, VoteTrace, filter_agents, train_ensemble
from .env import concat_records
from .explain import draw_baselines, explain_span, write_importance_csv, write_timeline_csv
from .features import FeatureMatrix, build_feature_matrix
from .market_data import (DataError, generate, load_candles_csv, load_fundamentals_csv,
                          synthetic_fundamentals, write_candles_csv, write_fundamentals_csv)
from .svg import bar_chart, line_chart, scatter_chart

logger = logging.getLogger("gasrl")

STRATEGIES = ("dqn", "buyhold", "macd", "bb", "selector")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def sha256_file(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


class Run:
    """Output directory bookkeeping for one command."""

    def __init__(self, command: str, config: RunConfig, extra: dict | None = None):
        self.command = command
        self.config = config
        self.extra = extra or {}
        self.out = Path(config.output_dir)
        try:
            self.out.mkdir(parents=True, exist_ok=True)
        except OSError as exc:
            raise ConfigError("output_dir", f"cannot create {self.out}: {exc}") from None
        self.inputs: dict[str, str] = {}
        self.outputs: list[Path] = []

    def path(self, name: str) -> Path:
        p = self.out / name
        p.parent.mkdir(parents=True, exist_ok=True)
        return p

    def wrote(self, *paths: Path) -> None:
        self.outputs.extend(Path(p) for p in paths)

    def read(self, path) -> Path:
        path = Path(path)
        if not path.is_file():
            raise FileNotFoundError(f"missing input file: {path}")
        self.inputs[str(path)] = sha256_file(path)
        return path

    def finish(self) -> Path:
        manifest = {
            "command": self.command,
            "package_version": __version__,
            "config_sha256": self.config.digest(),
            "seed": self.config.seed,
            "config": self.config.to_flat(),
            "arguments": self.extra,
            "inputs": dict(sorted(self.inputs.items())),
            "outputs": {p.relative_to(self.out).as_posix(): sha256_file(p) for p in sorted(set(self.outputs))},
        }
        path = self.out / f"manifest_{self.command}.json"
        path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
        return path


# ---------------------------------------------------------------------------
# data


def load_market(config: RunConfig, run: Run) -> FeatureMatrix:
    """Raw (un-normalised) feature matrix for the configured data source."""
    if config.data.source == "synthetic":
        prices = generate(config.synthetic)
    else:
        prices = load_candles_csv(run.read(config.data.source))
    funds = [s for p in config.data.fundamentals for s in load_fundamentals_csv(run.read(p))]
    if config.data.synthetic_fundamentals:
        funds += synthetic_fundamentals(prices, list(config.data.synthetic_fundamentals), config.seed)
    return build_feature_matrix(prices, funds, config.features)


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(config: RunConfig, args) -> Run:
    run = Run("gen-data", config)
    prices = generate(config.synthetic)
    run.wrote(write_candles_csv(prices, run.path("candles.csv")))
    if config.data.synthetic_fundamentals:
        series = synthetic_fundamentals(prices, list(config.data.synthetic_fundamentals), config.seed)
        run.wrote(write_fundamentals_csv(series, run.path("fundamentals.csv")))
    return run


def _fold(config: RunConfig, index: int):
    folds = make_folds(config.walkforward)
    if not 0 <= index < len(folds):
        raise ConfigError("--fold", f"fold index {index} outside 0..{len(folds) - 1}")
    return folds[index]


def cmd_train(config: RunConfig, args) -> Run:
    run = Run("train", config, {"fold": args.fold})
    matrix = load_market(config, run)
    fold = _fold(config, args.fold)
    prep = prepare_fold(matrix, fold)
    net, curve = train(prep.matrix, slice(*prep.train), config.train, config.env_config)
    run.wrote(net.save(run.path("checkpoint.json")), curve.to_csv(run.path("training_curve.csv")))
    run.wrote(line_chart({"episode sharpe": curve.sharpe}, run.path("training_curve.svg"),
                         "Training curve", "episode", "annualised Sharpe"))
    return run


def _factory(name: str, config: RunConfig):
    env_config = config.env_config
    if name == "buyhold":
        return lambda m, train_idx, fold: buy_and_hold(len(m)).policy()
    if name == "macd":
        return lambda m, train_idx, fold: macd_strategy(m.close, config.features.macd_spans).policy()
    if name == "bb":
        return lambda m, train_idx, fold: bollinger_strategy(m.close).policy()
    if name == "selector":
        sel = SelectorConfig(seed=config.seed)

        def selector(m, train_idx, fold):
            test_idx = m.index_range(fold.test)
            return rl_selector(m.close, train_idx, test_idx, env_config, sel).policy()
        return selector
    if name == "dqn":
        def dqn(m, train_idx, fold):
            net, _ = train(m, slice(*train_idx), config.train, env_config)
            return greedy_policy(net)
        return dqn
    raise UsageError(f"unknown strategy {name!r}; choose from {', '.join(STRATEGIES)}")


def _write_report(run: Run, report: MetricsReport, stem: str, pnl_scale: float) -> None:
    run.wrote(report.to_json(run.path(f"{stem}_report.json")))
    records = [r.record for r in report.ok if r.record is not None]
    if records:
        record = concat_records(records)
        run.wrote(record.to_csv(run.path(f"{stem}_trades.csv")))
        dates, equity = report.equity_curve()
        run.wrote(line_chart({stem: np.asarray(equity) * pnl_scale}, run.path(f"{stem}_equity.svg"),
                             f"{stem} out-of-sample equity", "date", "cumulative P&L",
                             x_labels=[str(d) for d in dates]))


def cmd_backtest(config: RunConfig, args) -> Run:
    if args.strategy not in STRATEGIES:
        raise UsageError(f"unknown strategy {args.strategy!r}; choose from {', '.join(STRATEGIES)}")
    run = Run("backtest", config, {"strategy": args.strategy})
    matrix = load_market(config, run)
    report = run_walk_forward(_factory(args.strategy, config), matrix, config.walkforward, config.env_config,
                              args.strategy)
    _write_report(run, report, args.strategy, config.data.pnl_scale)
    if not report.ok:
        raise RuntimeError("every fold failed; see the report for the errors")
    return run


def cmd_ensemble(config: RunConfig, args) -> Run:
    ens = replace(config.ensemble, jobs=args.jobs) if args.jobs else config.ensemble
    run = Run("ensemble", config, {"jobs": ens.jobs})
    matrix = load_market(config, run)
    policies: dict[int, EnsemblePolicy] = {}

    def factory(m, train_idx, fold):
        agents, curves = train_ensemble(m, slice(*train_idx), config.train, config.env_config, ens)
        year = fold.test_year
        for i, (net, curve) in enumerate(zip(agents, curves)):
            run.wrote(net.save(run.path(f"ensemble/{year}/agent_{i}.json")),
                      curve.to_csv(run.path(f"ensemble/{year}/agent_{i}_curve.csv")))
        result = filter_agents(curves, ens)
        run.wrote(result.to_json(run.path(f"ensemble/{year}/filter_report.json")))
        policies[year] = EnsemblePolicy([agents[i] for i in result.survivors], ens.threshold)
        return policies[year]

    report = run_walk_forward(factory, matrix, config.walkforward, config.env_config, "ensemble")
    _write_report(run, report, "ensemble", config.data.pnl_scale)
    for r in report.ok:
        year = r.fold.test_year
        trace = VoteTrace(r.record.dates, np.array(policies[year].votes, dtype=np.int64), r.record.positions)
        run.wrote(trace.to_csv(run.path(f"ensemble/{year}/vote_trace.csv")))
    if not report.ok:
        raise RuntimeError("every fold failed; see the report for the errors")
    return run


def cmd_explain(config: RunConfig, args) -> Run:
    run = Run("explain", config, {"fold": args.fold, "checkpoint": args.checkpoint})
    net = QNetwork.load(run.read(args.checkpoint))
    matrix = load_market(config, run)
    prep = prepare_fold(matrix, _fold(config, args.fold))
    cfg = config.explain
    baselines = draw_baselines(prep.matrix, slice(*prep.train), cfg.baseline_size, cfg.seed, config.env_config)
    timeline, importance = explain_span(net, prep.matrix, slice(*prep.test), baselines, cfg, config.env_config)
    run.wrote(write_timeline_csv(timeline, run.path("decision_timeline.csv"), cfg.top_m),
              write_importance_csv(importance, run.path("feature_importance.csv")))
    run.wrote(bar_chart([(r.group, r.mean_abs_phi) for r in importance], run.path("feature_importance.svg"),
                        "Mean |Shapley value| of the chosen action", "mean |phi|"))
    return run


def cmd_report(config: RunConfig, args) -> Run:
    run = Run("report", config, {"reports": list(args.reports)})
    reports = [MetricsReport.from_json(run.read(p)) for p in args.reports]
    if not reports:
        raise UsageError("report needs at least one MetricsReport JSON")
    rows, scatter = summary(reports, config.data.pnl_scale)
    run.wrote(write_summary_csv(rows, run.path("summary.csv")))
    run.wrote(scatter_chart([(p["name"], p["y"], p["x"]) for p in scatter],
                            run.path("summary.svg"), "Strategy summary (marker size: |cumulative P&L|)",
                            "max drawdown", "mean Sharpe", sizes=[p["color"] for p in scatter]))
    return run


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "backtest": cmd_backtest,
    "ensemble": cmd_ensemble,
    "explain": cmd_explain,
    "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="gasrl", description="Deep Q-learning research engine for daily futures trading.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    common = _Parser(add_help=False)
    common.add_argument("--config", help="flat key = value config file")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config key")
    common.add_argument("--out", help="shorthand for --set output_dir=...")
    common.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    sub.add_parser("gen-data", parents=[common], help="write a synthetic candle CSV")
    p = sub.add_parser("train", parents=[common], help="train one agent on a fold's training span")
    p.add_argument("--fold", type=int, default=0)
    p = sub.add_parser("backtest", parents=[common], help="walk-forward backtest of one strategy")
    p.add_argument("--strategy", required=True, help=f"one of {', '.join(STRATEGIES)}")
    p = sub.add_parser("ensemble", parents=[common], help="walk-forward filtered majority-vote ensemble")
    p.add_argument("--jobs", type=int, default=0, help="parallel agent trainings (default: ensemble.jobs)")
    p = sub.add_parser("explain", parents=[common], help="Shapley attributions over a fold's test span")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--fold", type=int, default=0)
    p = sub.add_parser("report", parents=[common], help="summary table and scatter from report JSONs")
    p.add_argument("reports", nargs="+")
    return parser


def main(argv: list[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        overrides = parse_overrides(args.set)
        if args.out:
            overrides["output_dir"] = args.out
        config = load_config(args.config, overrides)
        run = COMMANDS[args.command](config, args)
        manifest = run.finish()
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    except (UsageError, ConfigError) as exc:
        print(f"gasrl: error: {exc}", file=sys.stderr)
        return 1
    except (FileNotFoundError, DataError) as exc:  # bad or missing input is a validation failure
        print(f"gasrl: error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:
        logger.debug("failure", exc_info=True)
        print(f"gasrl: runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    print(manifest)
    return 0


if __name__ == "__main__":
    sys.exit(main())
