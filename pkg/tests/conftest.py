import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(__file__))

from crtsace.data import Cluster, CrtDataset, Individual  # noqa: E402
from crtsace.simulation import SimScenario, simulate_dataset  # noqa: E402

ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


def small_trial(n_c=10, seed=5, lam=0.3, delta=0.5, sizes=(8, 15), rep=0):
    sc = SimScenario(n_c=n_c, delta=delta, lam=lam, seed=seed, size_range=sizes)
    return simulate_dataset(sc, rep)[0]


@pytest.fixture(scope="session")
def trial10():
    """10 clusters of 8-15 individuals with clear clustering (fit is well posed)."""
    return small_trial()


@pytest.fixture(scope="session")
def trial5():
    return small_trial(n_c=5, seed=11, sizes=(6, 10))


@pytest.fixture(scope="session")
def trial40():
    sc = SimScenario(n_c=40, delta=0.2, lam=0.1, seed=21)
    return simulate_dataset(sc, 0)[0]


def make_dataset(rows):
    """Build a dataset from (cluster_id, treatment, [(s, y, x...), ...][, ccov]) tuples."""
    clusters = []
    for cid, a, inds, *cc in rows:
        ccov = tuple(cc[0]) if cc else ()
        clusters.append(Cluster(cid, a, tuple(Individual(s, y, tuple(x)) for s, y, *x in inds), ccov))
    return CrtDataset.from_clusters(clusters)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
