import numpy as np
import pytest

from nmfgen.model import CostModel, Family, Variant


def random_instance(rng, n=None, m=None, k=3, family=Family.POISSON, positive=False):
    """Random data matrix with matching random positive factors for both variants."""
    n = n or int(rng.integers(4, 31))
    m = m or int(rng.integers(3, 21))
    if family is Family.NORMAL or positive:
        V = rng.gamma(2.0, 3.0, (n, m)) + 0.1
    else:
        V = rng.poisson(rng.uniform(0.5, 12.0, (n, m))).astype(float)
        V[0, 0] += 1.0  # keep at least one non-zero entry per instance
    W = rng.uniform(0.1, 2.0, (n, k))
    H = rng.uniform(0.1, 2.0, (k, m))
    E = rng.uniform(0.1, 2.0, (n, k)) / n
    D = rng.uniform(0.1, 2.0, (k, n))
    return V, W, H, E, D


def random_cost(rng, family):
    if family is Family.NORMAL:
        return CostModel.normal()
    if family is Family.POISSON:
        return CostModel.poisson()
    if family is Family.TWEEDIE:
        return CostModel.tweedie(float(rng.uniform(1.0, 3.0)))
    return CostModel.negbin(float(rng.uniform(0.5, 20.0)))


ENGINES = [(v, f) for v in Variant for f in Family]


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# One line per acceptance criterion, echoed after the test run.
ACCEPTANCE = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in ACCEPTANCE:
            terminalreporter.write_line(line)
