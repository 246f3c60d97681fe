import logging

import numpy as np
import pytest

from gasrl.features import FeatureSpec, apply_normalizer, build_feature_matrix, fit_normalizer
from gasrl.market_data import SyntheticSpec, generate


@pytest.fixture(autouse=True)
def _quiet_pca(caplog):
    caplog.set_level(logging.ERROR, logger="gasrl.features")


@pytest.fixture(scope="session")
def gbm_prices():
    return generate(SyntheticSpec(regime="gbm", length=700, seed=5, drift=0.05, volatility=0.3))


@pytest.fixture(scope="session")
def raw_matrix(gbm_prices):
    return build_feature_matrix(gbm_prices, (), FeatureSpec())


@pytest.fixture(scope="session")
def norm_matrix(raw_matrix):
    return apply_normalizer(raw_matrix, fit_normalizer(raw_matrix, slice(0, 300)))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# one summary line per acceptance criterion, keyed by the ``test_aN_`` prefix
_CRITERIA: dict[str, tuple[str, str, str]] = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    name = item.name
    if not name.startswith("test_a") or item.module.__name__.rpartition(".")[2] != "test_acceptance":
        return
    if rep.when == "call" or (rep.when == "setup" and rep.outcome != "passed"):
        label = name.split("_")[1].upper()
        doc = (item.function.__doc__ or "").strip().splitlines()[0] if item.function.__doc__ else name
        detail = "; ".join(str(v) for k, v in item.user_properties if k == "detail")
        _CRITERIA[label] = ("PASS" if rep.outcome == "passed" else "FAIL", doc, detail)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for label in sorted(_CRITERIA, key=lambda s: int(s[1:])):
        status, doc, detail = _CRITERIA[label]
        terminalreporter.write_line(f"{label:<4} {status}  {doc}" + (f"  [{detail}]" if detail else ""))
