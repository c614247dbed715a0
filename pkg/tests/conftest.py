import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from edgedetect import dataio, model as mdl

settings.register_profile(
    "default",
    deadline=None,
    max_examples=50,
    suppress_health_check=[HealthCheck.too_slow, HealthCheck.function_scoped_fixture],
)
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_ds():
    """3-class 600-row synthetic set, standardized."""
    ds = dataio.generate_synthetic(dataio.SyntheticSpec(n_rows=600, n_classes=3, n_features=6, seed=5))
    X = ds.features
    return ds.with_features((X - X.mean(0)) / X.std(0))


def separable_binary(n=400, d=4, seed=0):
    rng = np.random.default_rng(seed)
    y = np.repeat([0, 1], n // 2)
    X = rng.standard_normal((n, d)) * 0.5
    X[:, 0] += np.where(y == 1, 3.0, -3.0)
    return dataio.Dataset(X, y, ("neg", "pos"), dataio.feature_names(d))


@pytest.fixture
def logistic_model(rng):
    arch = mdl.logistic(10, 7)
    return mdl.ModelParams(arch, 0.1 * rng.standard_normal(arch.n_params))


# "criterion N: PASS/FAIL ..." lines recorded by test_acceptance.py
ACCEPTANCE_LINES: dict = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[n])
