import numpy as np
import pytest

from membank import GeoParams, KeySet, seeded_rng


@pytest.fixture
def rng():
    return seeded_rng(12345)


def random_instance(rng, d, heads, n_keys):
    params = GeoParams.random(d, heads, rng)
    q = rng.standard_normal(d)
    keys = rng.standard_normal((n_keys, d))
    return params, q, keys


def keyset(matrix):
    matrix = np.atleast_2d(matrix)
    n = matrix.shape[0]
    return KeySet(matrix, np.full(n, 0.5), np.zeros(n), np.zeros(n), np.arange(n))


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
