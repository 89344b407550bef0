import numpy as np
import pytest
from scipy.stats import ortho_group

from dssfa.covariance import (
    PosteriorDraws,
    assemble_cov,
    posterior_mean_cov,
    rmse,
    stein_loss,
)
from dssfa.exceptions import DimensionError, NumericalError


def test_assemble_cov(rng):
    loadings = rng.standard_normal((5, 2))
    uniqueness = 0.1 + rng.random(5)
    omega = assemble_cov(loadings, uniqueness)
    expected = loadings @ loadings.T + np.diag(uniqueness)
    np.testing.assert_allclose(omega, expected, rtol=0, atol=1e-14)
    np.testing.assert_array_equal(omega, omega.T)


def test_assemble_cov_dimension_mismatch(rng):
    with pytest.raises(DimensionError):
        assemble_cov(rng.standard_normal((5, 2)), np.ones(4))


def test_assemble_cov_rejects_non_positive_uniqueness(rng):
    with pytest.raises(NumericalError):
        assemble_cov(rng.standard_normal((3, 1)), np.array([1.0, 0.0, 1.0]))


def test_stein_loss_at_target(spd_matrix):
    sign, log_abs_det = np.linalg.slogdet(spd_matrix)
    assert sign > 0
    loss = stein_loss(spd_matrix, spd_matrix)
    assert loss == pytest.approx(log_abs_det + spd_matrix.shape[0], abs=1e-10)


def test_stein_loss_independent_evaluation(rng, make_spd):
    fit = make_spd(3)
    target = make_spd(3)
    _, log_abs_det = np.linalg.slogdet(fit)
    expected = log_abs_det + np.trace(np.linalg.inv(fit) @ target)
    assert stein_loss(fit, target) == pytest.approx(expected, abs=1e-10)


def test_stein_loss_minimized_at_target(make_spd):
    target = make_spd(4)
    assert stein_loss(target, target) < stein_loss(target * 1.1, target)
    assert stein_loss(target, target) < stein_loss(target + 0.2 * np.eye(4), target)


def test_stein_loss_lower_bound_on_random_fits(rng, make_spd):
    for p in (2, 4, 7):
        for _ in range(30):
            target = make_spd(p)
            bound = np.linalg.slogdet(target)[1] + p
            perturbation = rng.standard_normal((p, p))
            nearby = target + 0.05 * (perturbation + perturbation.T)
            for fit in (make_spd(p), nearby, target * (0.5 + rng.random())):
                if np.linalg.eigvalsh(fit)[0] <= 0:
                    continue
                gap = stein_loss(fit, target) - bound
                assert gap >= -1e-9
                if np.linalg.norm(fit - target) > 1e-6:
                    assert gap > 0


def test_stein_loss_not_positive_definite():
    fit = np.array([[1.0, 2.0], [2.0, 1.0]])
    with pytest.raises(NumericalError):
        stein_loss(fit, np.eye(2))


def test_stein_loss_shape_mismatch(spd_matrix):
    with pytest.raises(DimensionError):
        stein_loss(spd_matrix, np.eye(3))


def test_posterior_mean_cov(small_draws):
    omega_bar = posterior_mean_cov(small_draws)
    expected = small_draws.covariances().mean(axis=0)
    np.testing.assert_allclose(omega_bar, expected, rtol=1e-12, atol=1e-12)
    np.testing.assert_array_equal(omega_bar, omega_bar.T)


def test_posterior_mean_rotation_invariance(small_draws):
    rotations = ortho_group.rvs(small_draws.k, size=small_draws.n_draws, random_state=5)
    rotated = PosteriorDraws(
        loadings=np.einsum("mjk,mkl->mjl", small_draws.loadings, rotations),
        uniqueness=small_draws.uniqueness,
    )
    np.testing.assert_allclose(
        posterior_mean_cov(rotated), posterior_mean_cov(small_draws), rtol=0, atol=1e-10
    )


def test_posterior_mean_single_draw(rng):
    loadings = rng.standard_normal((1, 4, 2))
    uniqueness = 0.5 + rng.random((1, 4))
    draws = PosteriorDraws(loadings=loadings, uniqueness=uniqueness)
    np.testing.assert_allclose(
        posterior_mean_cov(draws),
        assemble_cov(loadings[0], uniqueness[0]),
        rtol=0,
        atol=1e-14,
    )


def test_posterior_draws_validation(rng):
    loadings = rng.standard_normal((3, 4, 2))
    with pytest.raises(DimensionError):
        PosteriorDraws(loadings=loadings, uniqueness=np.ones((3, 5)))
    uniqueness = np.ones((3, 4))
    uniqueness[1, 2] = -1.0
    with pytest.raises(NumericalError):
        PosteriorDraws(loadings=loadings, uniqueness=uniqueness)


def test_posterior_draws_properties(small_draws):
    assert small_draws.n_draws == 40
    assert small_draws.p == 6
    assert small_draws.k == 3
    assert small_draws.covariances().shape == (40, 6, 6)


def test_rmse_divides_by_all_entries():
    truth = np.eye(2)
    estimate = truth.copy()
    estimate[0, 1] = 1.0
    assert rmse(estimate, truth) == pytest.approx(0.5)
    assert rmse(truth, truth) == 0.0


def test_rmse_shape_mismatch():
    with pytest.raises(DimensionError):
        rmse(np.eye(2), np.eye(3))
