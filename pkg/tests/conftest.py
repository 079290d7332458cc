import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from mlndlm.model import CountDataset, ModelSpec  # noqa: E402


def random_pd(rng, n, jitter=0.5):
    X = rng.standard_normal((n, n))
    return X @ X.T / n + jitter * np.eye(n)


def random_spec(rng, D, Q, K=1):
    """Random but well-posed model; Q = 2 gets a damped trend-like G."""
    p = D - 1
    if Q == 1:
        F = np.array([rng.uniform(0.5, 1.5)])
        G = np.array([[rng.uniform(0.7, 1.0)]])
    else:
        F = rng.uniform(0.3, 1.2, size=Q)
        G = np.eye(Q) * rng.uniform(0.6, 1.0, size=Q) + np.triu(rng.uniform(-0.3, 0.6, (Q, Q)), 1)
    W = random_pd(rng, Q, 0.1) * rng.uniform(0.2, 0.8)
    M0 = rng.normal(0, 0.5, size=(K, Q, p)) if K > 1 else rng.normal(0, 0.5, size=(Q, p))
    C0 = random_pd(rng, Q, 0.5)
    return ModelSpec(F=F, G=G, W=W, gamma=rng.uniform(0.5, 1.5), M0=M0, C0=C0,
                     Xi0=random_pd(rng, p, 0.5), nu0=p + 2 + rng.uniform(0.5, 4))


def random_counts(rng, D, T, n_range=(5, 60), missing=0.0, series_lengths=None):
    pi = rng.dirichlet(np.ones(D), size=T).T
    n = rng.integers(*n_range, size=T)
    Y = np.stack([rng.multinomial(n[t], pi[:, t]) for t in range(T)], axis=1)
    observed = rng.uniform(size=T) >= missing
    return CountDataset(Y, observed, series_lengths)


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance(n, name): acceptance criterion n")
    config._acceptance = {}


def pytest_runtest_makereport(item, call):
    marker = item.get_closest_marker("acceptance")
    if marker is None or call.when != "call":
        return
    n, name = marker.args
    ok = call.excinfo is None
    prev = item.config._acceptance.get(n, (name, True))
    item.config._acceptance[n] = (name, prev[1] and ok)


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    results = getattr(config, "_acceptance", {})
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(results):
        name, ok = results[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {name}")
