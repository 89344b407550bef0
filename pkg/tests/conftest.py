"""
    Shared fixtures of the dssfa test suite.

    Read more about conftest.py under:
    - https://docs.pytest.org/en/stable/fixture.html
"""
import numpy as np
import pytest

from dssfa.covariance import PosteriorDraws
from dssfa.datagen import harman_toy_truth


def random_spd(rng, p, k=None, noise=0.5):
    """Factor structured positive definite matrix, well conditioned"""
    k = p if k is None else k
    loadings = rng.standard_normal((p, k))
    uniqueness = noise + rng.random(p)
    return loadings @ loadings.T + np.diag(uniqueness)


def random_draws(rng, n_draws, p, k):
    loadings = rng.standard_normal((n_draws, p, k)) * 0.7
    uniqueness = 0.2 + rng.random((n_draws, p))
    return PosteriorDraws(loadings=loadings, uniqueness=uniqueness)


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


@pytest.fixture
def spd_matrix(rng):
    return random_spd(rng, 6)


@pytest.fixture
def make_spd(rng):
    def make(p, k=None, noise=0.5):
        return random_spd(rng, p, k=k, noise=noise)

    return make


@pytest.fixture
def make_draws(rng):
    def make(n_draws, p, k):
        return random_draws(rng, n_draws, p, k)

    return make


@pytest.fixture
def harman_truth():
    return harman_toy_truth()


@pytest.fixture
def small_draws(rng):
    return random_draws(rng, n_draws=40, p=6, k=3)
