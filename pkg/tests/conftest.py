import numpy as np
import pytest

from gcrfcast.gcrf import GcrfSnapshot


def random_similarity(rng, n, density=0.4):
    S = rng.random((n, n)) * (rng.random((n, n)) < density)
    S = np.triu(S, 1)
    return S + S.T


def random_snapshot(rng, n=6, k=2, n_sim=1, features=None, horizon=None):
    """Random snapshot with observed targets and predictor variances."""
    R = rng.random((k, n))
    S = [random_similarity(rng, n) for _ in range(n_sim)]
    y = R.mean(axis=0) + 0.1 * rng.standard_normal(n)
    sigma2 = rng.uniform(0.05, 0.5, size=(k, n))
    F = None if features is None else rng.standard_normal((n, features))
    return GcrfSnapshot(R, S, y, sigma2, F, horizon)


def central_difference(f, x, h=1e-6):
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e.flat[i] = h
        g.flat[i] = (f(x + e) - f(x - e)) / (2 * h)
    return g


def max_rel_error(a, b, floor=1e-3):
    a, b = np.ravel(a), np.ravel(b)
    return float(np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# acceptance criteria append (name, ok, detail) here; printed after the run
ACCEPTANCE = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name, ok, detail in ACCEPTANCE:
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'} {name}: {detail}")
