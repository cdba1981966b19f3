import numpy as np
import pytest

from fagg.core import FeatureSet


def random_set(rng, k, m, label=0, unit=True):
    x = rng.standard_normal((k, m))
    if unit:
        x /= np.linalg.norm(x, axis=1, keepdims=True)
    return FeatureSet(x, label, f"s{k}x{m}")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# acceptance criteria register their verdicts here; printed once at the end of the run
ACCEPTANCE_RESULTS: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_RESULTS:
            terminalreporter.write_line(line)
