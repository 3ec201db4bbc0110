import numpy as np
import pytest


@pytest.fixture
def gen():
    return np.random.default_rng(20240611)


def whiten(x):
    """Rows of ``x`` (n, N) made exactly zero-mean with identity sample covariance."""
    x = x - x.mean(axis=1, keepdims=True)
    cov = x @ x.T / (x.shape[1] - 1)
    vals, vecs = np.linalg.eigh(cov)
    return (vecs / np.sqrt(vals)).T @ x


#: (criterion, verdict line) pairs reported after the run
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
