import numpy as np
import pytest

from audiogeo.geodesy import AGGREGATION_AREAS_KM2, CLASSIFICATION_AREAS_KM2, build_grid


@pytest.fixture(scope="session")
def grid():
    return build_grid(CLASSIFICATION_AREAS_KM2)


@pytest.fixture(scope="session")
def agg_grid():
    return build_grid(sorted(AGGREGATION_AREAS_KM2.values(), reverse=True))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def random_points(rng, n):
    z = rng.uniform(-1, 1, n)
    return np.degrees(np.arcsin(z)), rng.uniform(-180, 180, n)


# -- shared synthetic-world fixtures for the slow suites ---------------------

ACCEPTANCE_LINES = []


@pytest.fixture(scope="session")
def synth():
    """Default-size synthetic datasets (with clip embeddings), built once per seed."""
    import os
    from audiogeo.pipeline import make_dataset
    cache = {}

    def get(seed):
        if seed not in cache:
            cache[seed] = make_dataset(seed, jobs=os.cpu_count() or 1)
        return cache[seed]
    return get


@pytest.fixture(scope="session")
def memo():
    """Session cache for expensive training runs shared between tests."""
    store = {}

    def get(key, fn):
        if key not in store:
            store[key] = fn()
        return store[key]
    return get


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[0][1:])):
            terminalreporter.write_line(line)
