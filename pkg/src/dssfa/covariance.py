"""
Covariance algebra shared by the sampler, the optimizer and the summary.

Loadings matrices, uniqueness vectors and covariance matrices are plain
``numpy`` arrays of dtype float64:

* loadings ``B``: shape (p, k)
* uniqueness ``S``: shape (p,), the diagonal of Sigma, all entries > 0
* covariance ``Omega``: shape (p, p), symmetric

The functions below validate their input and never modify it.
"""
import logging
from dataclasses import dataclass

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve

from dssfa.exceptions import DimensionError, NumericalError

_logger = logging.getLogger(__name__)


def as_loadings(loadings) -> np.ndarray:
    """Check a loadings matrix and return it as a 2D float array"""
    loadings = np.asarray(loadings, dtype=np.float64)
    if loadings.ndim != 2 or loadings.shape[0] < 1 or loadings.shape[1] < 1:
        raise DimensionError(
            f"Loadings must be a p x k matrix with p, k >= 1. Got shape {loadings.shape}"
        )
    if not np.all(np.isfinite(loadings)):
        raise NumericalError("Loadings contain non-finite entries")
    return loadings


def as_uniqueness(uniqueness) -> np.ndarray:
    """Check a uniqueness vector and return it as a 1D float array"""
    uniqueness = np.asarray(uniqueness, dtype=np.float64)
    if uniqueness.ndim != 1:
        raise DimensionError(
            f"Uniqueness must be a vector. Got shape {uniqueness.shape}"
        )
    if not np.all(np.isfinite(uniqueness)) or np.any(uniqueness <= 0):
        raise NumericalError("Uniqueness entries must be finite and strictly positive")
    return uniqueness


def as_covariance(covariance) -> np.ndarray:
    covariance = np.asarray(covariance, dtype=np.float64)
    if covariance.ndim != 2 or covariance.shape[0] != covariance.shape[1]:
        raise DimensionError(
            f"Covariance must be a square matrix. Got shape {covariance.shape}"
        )
    scale = max(np.abs(covariance).max(), 1.0)
    if np.abs(covariance - covariance.T).max() > 1e-12 * scale:
        raise DimensionError("Covariance matrix is not symmetric")
    return covariance


@dataclass
class PosteriorDraws:
    """
    Retained draws of the factor model at a fixed working dimension k

    Args:
        loadings: array (M, p, k) with the loadings draws B_(m)
        uniqueness: array (M, p) with the idiosyncratic variances Sigma_(m)
        provenance: free text label of the sampler that produced the draws
    """

    loadings: np.ndarray
    uniqueness: np.ndarray
    provenance: str = ""

    def __post_init__(self):
        self.loadings = np.asarray(self.loadings, dtype=np.float64)
        self.uniqueness = np.asarray(self.uniqueness, dtype=np.float64)
        if self.loadings.ndim != 3 or self.uniqueness.ndim != 2:
            raise DimensionError(
                "Draws need loadings of shape (M, p, k) and uniqueness of shape (M, p)"
            )
        n_draws, n_var, _ = self.loadings.shape
        if n_draws < 1:
            raise DimensionError("At least one posterior draw is required")
        if self.uniqueness.shape != (n_draws, n_var):
            raise DimensionError(
                f"Uniqueness shape {self.uniqueness.shape} does not match "
                f"loadings shape {self.loadings.shape}"
            )
        if not np.all(np.isfinite(self.loadings)):
            raise NumericalError("Loadings draws contain non-finite entries")
        if not np.all(np.isfinite(self.uniqueness)) or np.any(self.uniqueness <= 0):
            raise NumericalError("Uniqueness draws must be finite and strictly positive")

    @property
    def n_draws(self) -> int:
        return self.loadings.shape[0]

    @property
    def p(self) -> int:
        return self.loadings.shape[1]

    @property
    def k(self) -> int:
        return self.loadings.shape[2]

    def covariances(self) -> np.ndarray:
        """All per-draw covariance matrices, shape (M, p, p)"""
        omegas = np.einsum("mjk,mqk->mjq", self.loadings, self.loadings)
        diagonal = np.arange(self.p)
        omegas[:, diagonal, diagonal] += self.uniqueness
        return omegas


def assemble_cov(loadings, uniqueness) -> np.ndarray:
    """
    Covariance matrix of the factor model

    Args:
        loadings: p x k loadings matrix B
        uniqueness: length p vector with the diagonal of Sigma

    Returns:
        np.ndarray: B B^T + diag(Sigma)
    """
    loadings = as_loadings(loadings)
    uniqueness = as_uniqueness(uniqueness)
    if loadings.shape[0] != uniqueness.size:
        raise DimensionError(
            f"Loadings have {loadings.shape[0]} rows but uniqueness has "
            f"{uniqueness.size} entries"
        )
    omega = loadings @ loadings.T
    omega[np.diag_indices_from(omega)] += uniqueness
    return omega


def cholesky(matrix: np.ndarray):
    """Lower Cholesky factor in scipy's ``cho_factor`` form.

    A failed factorization means the matrix is not positive definite and is
    reported as such; nothing is regularized here.
    """
    try:
        return cho_factor(matrix, lower=True, check_finite=True)
    except (LinAlgError, ValueError) as err:
        raise NumericalError(f"Matrix is not positive definite: {err}") from err


def log_det(factor) -> float:
    """log-determinant from a ``cho_factor`` result"""
    return 2.0 * float(np.log(np.diag(factor[0])).sum())


def stein_loss(fit, target) -> float:
    """
    Gaussian negative log-likelihood loss of a fitted covariance

    Args:
        fit: positive definite p x p matrix (the action)
        target: p x p matrix (the parameter or its posterior mean)

    Returns:
        float: log|fit| + tr(fit^-1 target)
    """
    fit = as_covariance(fit)
    target = np.asarray(target, dtype=np.float64)
    if target.shape != fit.shape:
        raise DimensionError(f"Fit {fit.shape} and target {target.shape} differ in shape")
    factor = cholesky(fit)
    return log_det(factor) + float(np.trace(cho_solve(factor, target)))


def posterior_mean_cov(draws: PosteriorDraws) -> np.ndarray:
    """
    Posterior mean of the covariance matrix, the average of B_(m) B_(m)^T + Sigma_(m)
    """
    omega_bar = np.einsum("mjk,mqk->jq", draws.loadings, draws.loadings)
    omega_bar /= draws.n_draws
    omega_bar[np.diag_indices_from(omega_bar)] += draws.uniqueness.mean(axis=0)
    # the einsum sum is not exactly symmetric in floating point
    return 0.5 * (omega_bar + omega_bar.T)


def rmse(estimate, truth) -> float:
    """Root mean squared error over all p^2 entries of two covariance matrices"""
    estimate = np.asarray(estimate, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if estimate.shape != truth.shape or estimate.ndim != 2:
        raise DimensionError(
            f"Cannot compare matrices with shapes {estimate.shape} and {truth.shape}"
        )
    return float(np.sqrt(np.mean((estimate - truth) ** 2)))
