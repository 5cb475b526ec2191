import numpy as np
import pytest

from clvsim.learners import TreeFitParams
from clvsim.pipeline import RunConfig, train
from clvsim.predictors import BoostingConfig
from clvsim.synthgen import GeneratorConfig, generate_population


def fast_boosting(rounds: int = 5) -> BoostingConfig:
    return BoostingConfig(rounds=rounds, shrinkage=0.3, tree=TreeFitParams(max_leaves=7, min_samples_leaf=10))


@pytest.fixture(scope="session")
def small_panel():
    return generate_population(GeneratorConfig(n_customers=600, n_years=3, seed=11))


@pytest.fixture(scope="session")
def toy_config():
    return RunConfig(seed=5, segments=15, horizon=3, boosting=fast_boosting(),
                     segmentation_tree=TreeFitParams(min_samples_leaf=20))


@pytest.fixture(scope="session")
def toy_bundle(small_panel, toy_config):
    return train(small_panel, toy_config)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# acceptance criterion -> [all passed, title, details]
_CRITERIA: dict[int, list] = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or (rep.when != "call" and rep.passed):
        return
    n, title = mark.args
    entry = _CRITERIA.setdefault(n, [True, title, []])
    entry[0] = entry[0] and rep.passed
    if rep.when == "call":
        entry[2].extend(v for k, v in item.user_properties if k == "detail")


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        ok, title, details = _CRITERIA[n]
        line = f"criterion {n:>2}: {'PASS' if ok else 'FAIL'}  {title}"
        if details:
            line += "  [" + "; ".join(details) + "]"
        terminalreporter.write_line(line)
