import numpy as np
import pytest

from etk.core_ot import squared_distances


def random_instance(rng, n, *, scale=1.0, dim=2):
    """Point-cloud cost and two Dirichlet marginals."""
    pts = rng.uniform(0.0, scale, (n, dim))
    c = squared_distances(pts)
    L = rng.dirichlet(np.ones(n) * 2.0)
    W = rng.dirichlet(np.ones(n) * 2.0)
    return c, L, W


def simplex_directions(rng, n, k):
    """``k`` random unit vectors with zero sum."""
    d = rng.normal(size=(k, n))
    d -= d.mean(axis=1, keepdims=True)
    return d / np.linalg.norm(d, axis=1, keepdims=True)


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
