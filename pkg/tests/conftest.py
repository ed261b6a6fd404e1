import numpy as np
import pytest
from hypothesis import settings

settings.register_profile("default", max_examples=40, deadline=None)
settings.load_profile("default")


def standardized(X):
    X = np.asarray(X, dtype=float)
    X = X - X.mean(axis=0)
    return X / X.std(axis=0, ddof=1)


def random_instance(rng, n, p):
    """Standardized Gaussian covariates and a mirror-closed random pool."""
    from optrerand import design_pool

    X = standardized(rng.standard_normal((n, p)))
    pool = design_pool(n, int(rng.integers(20, 200)), int(rng.integers(2**31)))
    return X, pool


@pytest.fixture
def rng():
    return np.random.default_rng(20240607)


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "ACCEPTANCE_LINES", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
