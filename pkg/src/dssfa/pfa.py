"""
Penalized factor analysis of a given covariance target.

For every dimension k_tilde and penalty lambda we minimize

    log|B B^T + Sigma| + tr((B B^T + Sigma)^-1 Omega_bar) + lambda * sum|B|

over p x k_tilde loadings B and a diagonal Sigma >= floor. The minimization is
an EM algorithm that treats Omega_bar as the second moment matrix of the
observed vector and the factors as missing data. The M-step for the loadings
is a lasso problem per row, solved by cyclic coordinate descent with soft
thresholding. Every EM step decreases the penalized objective.
"""
import json
import logging
from dataclasses import dataclass, field
from multiprocessing import Pool
from pathlib import Path
from typing import List, NamedTuple

import numpy as np
from scipy.linalg import cho_solve

from dssfa.covariance import (
    as_covariance,
    assemble_cov,
    cholesky,
    log_det,
    stein_loss,
)
from dssfa.exceptions import ConfigError, FitPathFormatError, NumericalError
from dssfa.utils import make_progress_bar, matrix_digest, write_matrix_csv

_logger = logging.getLogger(__name__)

ZERO_COLUMN_TOLERANCE = 1e-12
SECOND_MOMENT_RIDGE = 1e-10
DEGENERATE_LAMBDA_MAX = 1e-12
# covers the round-off of the finite differences
LAMBDA_MAX_MARGIN = 1e-6
DESCENT_SLACK = 1e-12
LOWER_BOUND_SLACK = 1e-9


@dataclass
class PathConfig:
    """
    Settings of the penalized solution path

    Args:
        k_range: candidate dimensions k_tilde
        path_length: number of nonzero penalty values l
        tol: relative change of the penalized objective that ends the EM loop
        max_iter: maximum number of EM steps per (k_tilde, lambda)
        uniqueness_floor: lower bound of every uniqueness variance
        restarts: starts per (k_tilde, lambda); starts beyond the first are
            random perturbations of the first
        penalize: if False, only lambda_0 = 0 is fitted
        lambda_ratio: smallest nonzero lambda as a fraction of lambda_max
        cd_tol: largest coordinate change that ends the coordinate descent
        cd_max_cycles: maximum coordinate descent cycles per M-step
        seed: seed of the restart perturbations
        processes: number of worker processes over the dimensions
    """

    k_range: List[int] = field(default_factory=lambda: [1, 2, 3, 4, 5])
    path_length: int = 10
    tol: float = 1e-8
    max_iter: int = 2000
    uniqueness_floor: float = 1e-6
    restarts: int = 1
    penalize: bool = True
    lambda_ratio: float = 1e-3
    cd_tol: float = 1e-10
    cd_max_cycles: int = 100
    seed: int = 0
    processes: int = 1

    def __post_init__(self):
        self.k_range = sorted(set(int(k_tilde) for k_tilde in self.k_range))
        if not self.k_range:
            raise ConfigError("path.k_range may not be empty")
        if self.k_range[0] < 1:
            raise ConfigError(f"path.k_range entries must be >= 1. Got {self.k_range}")
        if self.path_length < 1:
            raise ConfigError(f"path.path_length must be >= 1. Got {self.path_length}")
        if not self.tol > 0:
            raise ConfigError(f"path.tol must be positive. Got {self.tol}")
        if self.max_iter < 1:
            raise ConfigError(f"path.max_iter must be >= 1. Got {self.max_iter}")
        if not self.uniqueness_floor > 0:
            raise ConfigError(
                f"path.uniqueness_floor must be positive. Got {self.uniqueness_floor}"
            )
        if self.restarts < 1:
            raise ConfigError(f"path.restarts must be >= 1. Got {self.restarts}")
        if not 0 < self.lambda_ratio < 1:
            raise ConfigError(
                f"path.lambda_ratio must lie in (0, 1). Got {self.lambda_ratio}"
            )
        if self.processes < 1:
            raise ConfigError(f"path.processes must be >= 1. Got {self.processes}")


@dataclass
class PenalizedFit:
    """Point estimate (B_hat, Sigma_hat) at one (k_tilde, lambda) grid point"""

    loadings: np.ndarray
    uniqueness: np.ndarray
    k_tilde: int
    lam: float
    lambda_index: int
    objective: float
    fit_term: float
    iterations: int
    converged: bool
    zero_columns: tuple = ()
    floor_active: tuple = ()
    ridged: bool = False
    ascent_steps: int = 0

    @property
    def effective_k(self) -> int:
        return self.k_tilde - len(self.zero_columns)

    @property
    def has_zero_columns(self) -> bool:
        return len(self.zero_columns) > 0

    def covariance(self) -> np.ndarray:
        return assemble_cov(self.loadings, self.uniqueness)

    def to_record(self) -> dict:
        return dict(
            k_tilde=self.k_tilde,
            lambda_index=self.lambda_index,
            lam=self.lam,
            objective=self.objective,
            fit_term=self.fit_term,
            iterations=self.iterations,
            converged=self.converged,
            zero_columns=list(self.zero_columns),
            effective_k=self.effective_k,
            floor_active=list(self.floor_active),
            ridged=self.ridged,
            ascent_steps=self.ascent_steps,
            loadings=self.loadings.tolist(),
            uniqueness=self.uniqueness.tolist(),
        )

    @classmethod
    def from_record(cls, record: dict):
        n_var = len(record["uniqueness"])
        loadings = np.asarray(record["loadings"], dtype=np.float64)
        return cls(
            loadings=loadings.reshape(n_var, int(record["k_tilde"])),
            uniqueness=np.asarray(record["uniqueness"], dtype=np.float64),
            k_tilde=int(record["k_tilde"]),
            lam=float(record["lam"]),
            lambda_index=int(record["lambda_index"]),
            objective=float(record["objective"]),
            fit_term=float(record["fit_term"]),
            iterations=int(record["iterations"]),
            converged=bool(record["converged"]),
            zero_columns=tuple(record["zero_columns"]),
            floor_active=tuple(record.get("floor_active", ())),
            ridged=bool(record.get("ridged", False)),
            ascent_steps=int(record.get("ascent_steps", 0)),
        )


@dataclass
class FitPath:
    """All penalized fits over the (k_tilde, lambda) grid of one target"""

    fits: List[PenalizedFit]
    omega_bar_digest: str
    lower_bound: float = float("nan")
    lambda_fallback: dict = field(default_factory=dict)

    @property
    def k_values(self):
        return sorted(set(fit.k_tilde for fit in self.fits))

    @property
    def p(self) -> int:
        return self.fits[0].loadings.shape[0]

    def fits_for(self, k_tilde) -> List[PenalizedFit]:
        selection = [fit for fit in self.fits if fit.k_tilde == k_tilde]
        return sorted(selection, key=lambda fit: fit.lambda_index)

    def lambdas(self, k_tilde) -> np.ndarray:
        return np.array([fit.lam for fit in self.fits_for(k_tilde)])

    def get(self, k_tilde, lambda_index) -> PenalizedFit:
        for fit in self.fits:
            if fit.k_tilde == k_tilde and fit.lambda_index == lambda_index:
                return fit
        raise KeyError(f"No fit at k_tilde={k_tilde}, lambda index {lambda_index}")

    def to_json(self, file_name: Path, config_digest: str = None):
        record = dict(
            omega_bar_digest=self.omega_bar_digest,
            lower_bound=self.lower_bound,
            lambda_fallback={str(key): value for key, value in self.lambda_fallback.items()},
            fits=[fit.to_record() for fit in self.fits],
        )
        if config_digest is not None:
            record["config_digest"] = config_digest
        _logger.info(f"Writing {len(self.fits)} fits to {file_name}")
        with open(file_name, "w", encoding="UTF-8") as stream:
            json.dump(record, stream, indent=1)

    @classmethod
    def from_json(cls, file_name: Path):
        file_name = Path(file_name)
        if not file_name.exists():
            raise FileNotFoundError(f"Fit path file not found {file_name.absolute()}")
        with open(file_name, "r", encoding="UTF-8") as stream:
            try:
                record = json.load(stream)
            except json.JSONDecodeError as err:
                raise FitPathFormatError(
                    f"Fit path file {file_name} is not valid json: {err}"
                ) from err
        try:
            fits = [PenalizedFit.from_record(fit) for fit in record["fits"]]
            path = cls(
                fits=fits,
                omega_bar_digest=record["omega_bar_digest"],
                lower_bound=float(record.get("lower_bound", float("nan"))),
                lambda_fallback={
                    int(key): value
                    for key, value in record.get("lambda_fallback", {}).items()
                },
            )
        except (KeyError, TypeError, ValueError, AttributeError) as err:
            raise FitPathFormatError(
                f"Fit path file {file_name} has a missing or invalid field: {err!r}"
            ) from err
        if not path.fits:
            raise FitPathFormatError(f"Fit path file {file_name} holds no fits")
        return path

    def write_loadings(self, output_directory: Path):
        """Write every B_hat as csv matrix. Returns the file names"""
        output_directory = Path(output_directory)
        output_directory.mkdir(exist_ok=True, parents=True)
        file_names = list()
        for fit in self.fits:
            file_name = output_directory / (
                f"loadings_k{fit.k_tilde}_l{fit.lambda_index}.csv"
            )
            write_matrix_csv(fit.loadings, file_name, column_prefix="f")
            file_names.append(file_name)
        return file_names


class EMStep(NamedTuple):
    loadings: np.ndarray
    uniqueness: np.ndarray
    ridged: bool


def objective(loadings, uniqueness, omega_bar, lam) -> float:
    """Penalized objective log|Omega| + tr(Omega^-1 Omega_bar) + lambda * sum|B|"""
    if lam < 0:
        raise ConfigError(f"lambda may not be negative. Got {lam}")
    fit = assemble_cov(loadings, uniqueness)
    penalty = lam * float(np.abs(loadings).sum()) if lam > 0 else 0.0
    return stein_loss(fit, omega_bar) + penalty


def objective_gradient(loadings, uniqueness, omega_bar):
    """
    Gradient of the smooth part log|Omega| + tr(Omega^-1 Omega_bar)

    Returns:
        tuple: derivative with respect to B (p x k) and to the uniqueness (p,)
    """
    factor = cholesky(assemble_cov(loadings, uniqueness))
    inverse = cho_solve(factor, np.eye(omega_bar.shape[0]))
    middle = inverse - inverse @ omega_bar @ inverse
    return 2.0 * middle @ loadings, np.diag(middle).copy()


def soft_threshold(z, gamma):
    """sign(z) * max(|z| - gamma, 0), elementwise"""
    if np.any(np.asarray(gamma) < 0):
        raise ConfigError(f"Threshold gamma may not be negative. Got {gamma}")
    return np.sign(z) * np.maximum(np.abs(z) - gamma, 0.0)


def e_step(loadings, uniqueness, omega_bar):
    """
    Conditional moments of the factors given the current parameters

    Returns:
        tuple: M1 = B^T Delta Omega_bar (k x p), M2 = I - B^T Delta B +
        B^T Delta Omega_bar Delta B (k x k) with Delta = Omega^-1, and a flag
        that tells if a ridge was added to M2
    """
    n_factor = loadings.shape[1]
    factor = cholesky(assemble_cov(loadings, uniqueness))
    delta_loadings = cho_solve(factor, loadings)
    cross_moment = delta_loadings.T @ omega_bar
    second_moment = (
        np.eye(n_factor)
        - loadings.T @ delta_loadings
        + cross_moment @ delta_loadings
    )
    second_moment = 0.5 * (second_moment + second_moment.T)
    ridged = False
    try:
        cholesky(second_moment)
    except NumericalError:
        _logger.warning("Factor second moment matrix is singular. Adding a ridge")
        second_moment[np.diag_indices(n_factor)] += SECOND_MOMENT_RIDGE
        ridged = True
    return cross_moment, second_moment, ridged


def em_step(
    loadings,
    uniqueness,
    omega_bar,
    lam,
    floor,
    cd_tol=1e-10,
    cd_max_cycles=100,
) -> EMStep:
    """
    One EM step of the penalized objective

    The loadings rows minimize (b^T M2 b - 2 M1[:, j]^T b) / sigma_j^2 +
    lambda * |b|_1 with the current sigma_j^2. All rows share M2, so each
    coordinate update runs over all rows at once. The uniqueness update is
    sigma_j^2 = max(floor, Omega_bar_jj - 2 b_j^T M1[:, j] + b_j^T M2 b_j).
    """
    cross_moment, second_moment, ridged = e_step(loadings, uniqueness, omega_bar)

    if lam == 0:
        new_loadings = np.linalg.solve(second_moment, cross_moment).T
    else:
        new_loadings = np.array(loadings, dtype=np.float64, copy=True)
        thresholds = 0.5 * lam * uniqueness
        # a row whose cross moments all lie within the threshold has minimizer 0
        new_loadings[np.abs(cross_moment).max(axis=0) <= thresholds] = 0.0
        diagonal = np.diag(second_moment)
        for _ in range(cd_max_cycles):
            max_change = 0.0
            for column in range(new_loadings.shape[1]):
                partial = (
                    cross_moment[column]
                    - new_loadings @ second_moment[:, column]
                    + new_loadings[:, column] * diagonal[column]
                )
                updated = soft_threshold(partial, thresholds) / diagonal[column]
                max_change = max(
                    max_change, float(np.abs(updated - new_loadings[:, column]).max())
                )
                new_loadings[:, column] = updated
            if max_change <= cd_tol:
                break

    residual_variance = (
        np.diag(omega_bar)
        - 2.0 * np.einsum("jq,qj->j", new_loadings, cross_moment)
        + np.einsum("jq,qr,jr->j", new_loadings, second_moment, new_loadings)
    )
    new_uniqueness = np.maximum(residual_variance, floor)
    return EMStep(loadings=new_loadings, uniqueness=new_uniqueness, ridged=ridged)


def initial_loadings(omega_bar, k_tilde, floor):
    """
    Scaled principal eigenvectors of the target

    The loadings are V_k (Lambda_k - s)^1/2 with s the mean of the discarded
    eigenvalues (zero when k_tilde = p), the uniqueness the remaining diagonal.
    """
    eigen_values, eigen_vectors = np.linalg.eigh(omega_bar)
    order = np.argsort(eigen_values)[::-1]
    eigen_values = eigen_values[order]
    eigen_vectors = eigen_vectors[:, order]
    if k_tilde < eigen_values.size:
        residual = float(eigen_values[k_tilde:].mean())
    else:
        residual = 0.0
    scales = np.sqrt(np.maximum(eigen_values[:k_tilde] - residual, floor))
    loadings = eigen_vectors[:, :k_tilde] * scales
    uniqueness = np.maximum(np.diag(omega_bar) - (loadings**2).sum(axis=1), floor)
    return loadings, uniqueness


def lambda_max(omega_bar, loadings, uniqueness, step=1e-6):
    """
    Smallest penalty for which the M-step built at (B, Sigma) returns B = 0

    The smooth part of the row j surrogate, h_j(b) = (b^T M2 b - 2 a_j^T b) /
    sigma_j^2, has a zero minimizer of h_j + lambda |b|_1 as soon as lambda
    exceeds every |dh_j/db_q| at b = 0. The derivatives are taken by central
    differences.

    Returns:
        tuple: the threshold and a flag that is True if the threshold was
        degenerate (below 1e-12) and replaced by 1
    """
    cross_moment, second_moment, _ = e_step(loadings, uniqueness, omega_bar)
    n_factor = second_moment.shape[0]

    def surrogate(rows):
        quadratic = np.einsum("jq,qr,jr->j", rows, second_moment, rows)
        linear = np.einsum("jq,qj->j", rows, cross_moment)
        return (quadratic - 2.0 * linear) / uniqueness

    gradient = np.zeros((omega_bar.shape[0], n_factor))
    for column in range(n_factor):
        shift = np.zeros((omega_bar.shape[0], n_factor))
        shift[:, column] = step
        gradient[:, column] = (surrogate(shift) - surrogate(-shift)) / (2.0 * step)
    threshold = float(np.abs(gradient).max())
    if threshold < DEGENERATE_LAMBDA_MAX:
        _logger.warning(
            f"lambda_max {threshold:g} is degenerate (diagonal target?). Using 1.0"
        )
        return 1.0, True
    return threshold * (1.0 + LAMBDA_MAX_MARGIN), False


def geometric_lambdas(largest, path_length, ratio=1e-3) -> np.ndarray:
    """lambda_0 = 0 followed by path_length values from ratio * largest up to largest"""
    if path_length == 1:
        nonzero = np.array([largest])
    else:
        exponents = np.arange(path_length - 1, -1, -1) / (path_length - 1)
        nonzero = largest * ratio**exponents
    return np.concatenate([[0.0], nonzero])


def solve_penalized(
    omega_bar,
    lam,
    start,
    config: PathConfig = None,
    lambda_index=0,
) -> PenalizedFit:
    """
    Run EM steps from ``start`` until the penalized objective settles

    Args:
        omega_bar: target covariance
        lam: penalty lambda >= 0
        start: tuple (loadings, uniqueness) to start from
        config: path settings (tolerances, floor)
        lambda_index: position of lambda on its path, stored on the fit

    Returns:
        PenalizedFit
    """
    if config is None:
        config = PathConfig()
    floor = config.uniqueness_floor
    loadings = np.array(start[0], dtype=np.float64, copy=True)
    uniqueness = np.maximum(np.array(start[1], dtype=np.float64), floor)
    k_tilde = loadings.shape[1]

    current = objective(loadings, uniqueness, omega_bar, lam)
    converged = False
    ridged = False
    ascent_steps = 0
    iteration = 0
    for iteration in range(1, config.max_iter + 1):
        step = em_step(
            loadings,
            uniqueness,
            omega_bar,
            lam,
            floor,
            cd_tol=config.cd_tol,
            cd_max_cycles=config.cd_max_cycles,
        )
        ridged = ridged or step.ridged
        updated = objective(step.loadings, step.uniqueness, omega_bar, lam)
        if not np.isfinite(updated):
            raise NumericalError(f"Objective became non-finite at EM step {iteration}")
        if updated > current + DESCENT_SLACK * abs(current):
            ascent_steps += 1
            _logger.debug(
                f"EM step {iteration} increased the objective by {updated - current:g}"
            )
        loadings, uniqueness = step.loadings, step.uniqueness
        change = abs(current - updated)
        current = updated
        if change <= config.tol * max(abs(current), 1.0):
            converged = True
            break

    if not converged:
        _logger.debug(
            f"EM for k_tilde={k_tilde}, lambda={lam:g} stopped after {iteration} steps"
        )
    zero_columns = tuple(
        int(index)
        for index in np.flatnonzero(np.abs(loadings).max(axis=0) < ZERO_COLUMN_TOLERANCE)
    )
    floor_active = tuple(int(index) for index in np.flatnonzero(uniqueness <= floor))
    fit_term = stein_loss(assemble_cov(loadings, uniqueness), omega_bar)
    return PenalizedFit(
        loadings=loadings,
        uniqueness=uniqueness,
        k_tilde=k_tilde,
        lam=float(lam),
        lambda_index=lambda_index,
        objective=current,
        fit_term=fit_term,
        iterations=iteration,
        converged=converged,
        zero_columns=zero_columns,
        floor_active=floor_active,
        ridged=ridged,
        ascent_steps=ascent_steps,
    )


def best_of_restarts(omega_bar, lam, start, config: PathConfig, lambda_index, k_tilde):
    """Solve from ``start`` and its random perturbations, keep the lowest objective"""
    best = solve_penalized(omega_bar, lam, start, config, lambda_index=lambda_index)
    if config.restarts == 1:
        return best
    rng = np.random.default_rng([config.seed, k_tilde, lambda_index])
    scale = np.sqrt(np.diag(omega_bar))[:, np.newaxis]
    for _ in range(config.restarts - 1):
        loadings = start[0] + 0.1 * scale * rng.standard_normal(start[0].shape)
        uniqueness = np.maximum(
            np.diag(omega_bar) - (loadings**2).sum(axis=1), config.uniqueness_floor
        )
        candidate = solve_penalized(
            omega_bar, lam, (loadings, uniqueness), config, lambda_index=lambda_index
        )
        if candidate.objective < best.objective:
            best = candidate
    return best


def lambda_grid(omega_bar, k_tilde, path_length, start=None, config: PathConfig = None):
    """
    Penalty path of one dimension: 0 followed by ``path_length`` increasing values

    The largest value is :func:`lambda_max` at the unpenalized solution, which
    is fitted here if ``start`` is not given.
    """
    if config is None:
        config = PathConfig()
    omega_bar = as_covariance(omega_bar)
    if start is None:
        start_fit = solve_penalized(
            omega_bar,
            0.0,
            initial_loadings(omega_bar, k_tilde, config.uniqueness_floor),
            config,
        )
        start = (start_fit.loadings, start_fit.uniqueness)
    largest, _ = lambda_max(omega_bar, start[0], start[1])
    return geometric_lambdas(largest, path_length, config.lambda_ratio)


def fit_dimension(omega_bar, k_tilde, config: PathConfig):
    """
    Solution path of one dimension, warm started along increasing lambda

    Returns:
        tuple: list of PenalizedFit and the degenerate lambda_max flag
    """
    floor = config.uniqueness_floor
    try:
        start = initial_loadings(omega_bar, k_tilde, floor)
        unpenalized = best_of_restarts(omega_bar, 0.0, start, config, 0, k_tilde)
    except NumericalError as err:
        raise NumericalError(f"k_tilde={k_tilde}, lambda index 0: {err}") from err
    fits = [unpenalized]
    fallback = False
    if config.penalize:
        largest, fallback = lambda_max(
            omega_bar, unpenalized.loadings, unpenalized.uniqueness
        )
        lambdas = geometric_lambdas(largest, config.path_length, config.lambda_ratio)
        previous = unpenalized
        for lambda_index, lam in enumerate(lambdas[1:], start=1):
            try:
                previous = best_of_restarts(
                    omega_bar,
                    lam,
                    (previous.loadings, previous.uniqueness),
                    config,
                    lambda_index,
                    k_tilde,
                )
            except NumericalError as err:
                raise NumericalError(
                    f"k_tilde={k_tilde}, lambda index {lambda_index}: {err}"
                ) from err
            fits.append(previous)

    n_flagged = sum(fit.has_zero_columns for fit in fits)
    n_floor = sum(len(fit.floor_active) > 0 for fit in fits)
    if n_floor:
        _logger.warning(
            f"k_tilde={k_tilde}: uniqueness floor active in {n_floor} of {len(fits)} fits"
        )
    _logger.info(
        f"k_tilde={k_tilde}: {len(fits)} fits, {n_flagged} with zeroed columns"
    )
    return fits, fallback


def _fit_dimension_job(arguments):
    return fit_dimension(*arguments)


def fit_path(omega_bar, config: PathConfig = None, show_progress=False) -> FitPath:
    """
    Penalized fits for every k_tilde in the range and every lambda on its path

    Fits whose loadings have zeroed columns are kept on the path; the summary
    excludes them.
    """
    if config is None:
        config = PathConfig()
    omega_bar = as_covariance(omega_bar)
    n_var = omega_bar.shape[0]
    if config.k_range[-1] > n_var:
        raise ConfigError(
            f"path.k_range goes up to {config.k_range[-1]} but the target has only "
            f"{n_var} variables"
        )
    lower_bound = log_det(cholesky(omega_bar)) + n_var

    jobs = [(omega_bar, k_tilde, config) for k_tilde in config.k_range]
    if config.processes > 1 and len(jobs) > 1:
        with Pool(processes=min(config.processes, len(jobs))) as pool:
            results = pool.map(_fit_dimension_job, jobs)
    else:
        progress_bar = make_progress_bar(len(jobs), "Path", show_progress=show_progress)
        results = list()
        for job in jobs:
            results.append(fit_dimension(*job))
            if progress_bar:
                progress_bar.update()
        if progress_bar:
            progress_bar.close()

    fits = list()
    lambda_fallback = dict()
    for k_tilde, (dimension_fits, fallback) in zip(config.k_range, results):
        fits.extend(dimension_fits)
        lambda_fallback[k_tilde] = fallback

    for fit in fits:
        if fit.fit_term < lower_bound - LOWER_BOUND_SLACK:
            _logger.warning(
                f"Fit k_tilde={fit.k_tilde}, lambda index {fit.lambda_index} has fit "
                f"term {fit.fit_term} below the lower bound {lower_bound}"
            )
    return FitPath(
        fits=fits,
        omega_bar_digest=matrix_digest(omega_bar),
        lower_bound=lower_bound,
        lambda_fallback=lambda_fallback,
    )
