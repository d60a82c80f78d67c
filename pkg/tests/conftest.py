import itertools

import numpy as np
import pytest

from lcar.graph import build_adjacency


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="run slow simulation tests")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture
def path3():
    return build_adjacency([(1, 2), (2, 3)], 3)


@pytest.fixture
def random_graph():
    """Factory for random adjacency structures with at least one edge."""

    def make(rng, n, density=0.5):
        pairs = [pair for pair in itertools.combinations(range(1, n + 1), 2) if rng.uniform() < density]
        if not pairs:
            pairs = [(1, 2)]
        return build_adjacency(pairs, n)

    return make
