"""
Gibbs sampler for the Gaussian factor model y_i = B f_i + e_i.

Two loadings priors are available:

* ``unconstrained``: b_jq | eta ~ N(0, eta) for every entry
* ``plt``: the same normal prior restricted to positive lower triangular
  loadings, b_jq = 0 for q > j and b_jj > 0 (Geweke and Zhou)

The uniqueness variances have independent IG(a, b) priors and eta has an
IG(a_eta, b_eta) prior (or is held fixed). The factors are sampled explicitly
every sweep.
"""
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import pandas as pd
from scipy.linalg import LinAlgError, cho_solve, solve_triangular
from scipy.special import ndtr, ndtri
from scipy.stats import invgamma

from dssfa.covariance import PosteriorDraws, cholesky
from dssfa.datagen import Dataset, make_rng, plt_rotate
from dssfa.exceptions import ConfigError, DrawsFormatError, NumericalError
from dssfa.utils import FLOAT_FORMAT, make_progress_bar

_logger = logging.getLogger(__name__)

PRIOR_FAMILIES = ("unconstrained", "plt")

DRAWS_MAGIC = b"DSSF"
DRAWS_VERSION = 1
DRAWS_HEADER_SIZE = 4 + 4 * 4
DRAWS_CSV_COLUMNS = ["draw", "entity", "row", "col", "value"]

# beyond this standardized bound the inverse cdf loses accuracy
TRUNCATION_TAIL_START = 8.0
INITIAL_UNIQUENESS_FLOOR = 1e-4


@dataclass
class PriorConfig:
    """
    Prior of the factor model

    Args:
        family: 'unconstrained' or 'plt'
        loading_shape: inverse gamma shape of the loadings variance eta
        loading_scale: inverse gamma scale of the loadings variance eta
        uniqueness_shape: inverse gamma shape of each sigma_j^2
        uniqueness_scale: inverse gamma scale of each sigma_j^2
        hierarchical: sample eta. If False, eta is fixed at ``loading_variance``
        loading_variance: value of eta in the non-hierarchical prior
    """

    family: str = "unconstrained"
    loading_shape: float = 1.0
    loading_scale: float = 1.0
    uniqueness_shape: float = 1.0
    uniqueness_scale: float = 1.0
    hierarchical: bool = True
    loading_variance: float = 1.0

    def __post_init__(self):
        if self.family not in PRIOR_FAMILIES:
            raise ConfigError(
                f"prior.family must be one of {PRIOR_FAMILIES}. Got {self.family!r}"
            )
        for name in (
            "loading_shape",
            "loading_scale",
            "uniqueness_shape",
            "uniqueness_scale",
            "loading_variance",
        ):
            value = getattr(self, name)
            if not value > 0:
                raise ConfigError(f"prior.{name} must be positive. Got {value}")


@dataclass
class ChainConfig:
    """
    Length and dimension of one chain

    Sweep s (counting from 0) is retained when s >= burnin and
    (s - burnin + 1) is a multiple of thin.
    """

    k: int = 5
    iterations: int = 10000
    burnin: int = 5000
    thin: int = 1
    seed: int = None

    def __post_init__(self):
        if self.k < 1:
            raise ConfigError(f"chain.k must be at least 1. Got {self.k}")
        if self.thin < 1:
            raise ConfigError(f"chain.thin must be at least 1. Got {self.thin}")
        if self.burnin < 0:
            raise ConfigError(f"chain.burnin may not be negative. Got {self.burnin}")
        if self.burnin >= self.iterations:
            raise ConfigError(
                f"chain.burnin ({self.burnin}) must be smaller than "
                f"chain.iterations ({self.iterations})"
            )
        if self.n_retained < 1:
            raise ConfigError(
                f"chain.thin ({self.thin}) leaves no draw after burnin "
                f"({self.iterations - self.burnin} sweeps)"
            )

    @property
    def n_retained(self) -> int:
        return (self.iterations - self.burnin) // self.thin


def sample_positive_normal(mean: float, sd: float, rng: np.random.Generator) -> float:
    """
    Draw from N(mean, sd^2) truncated to (0, inf)

    Inverse cdf sampling of the standardized variable above alpha = -mean/sd.
    Far in the tail the exponential rejection sampler of Robert (1995) is used.
    """
    alpha = -mean / sd
    if alpha < TRUNCATION_TAIL_START:
        mass = ndtr(-alpha)
        uniform = 1.0 - rng.random()
        level = np.clip(uniform * mass, 1e-300, 1.0 - 1e-16)
        standard = -ndtri(level)
        standard = max(standard, alpha)
    else:
        rate = 0.5 * (alpha + np.sqrt(alpha**2 + 4.0))
        while True:
            standard = alpha + rng.exponential(1.0 / rate)
            if rng.random() <= np.exp(-0.5 * (standard - rate) ** 2):
                break
    return mean + sd * standard


def sample_factors(rows, loadings, uniqueness, rng) -> np.ndarray:
    """f_i | B, Sigma, y_i ~ N(V B^T Sigma^-1 y_i, V), V = (I + B^T Sigma^-1 B)^-1"""
    n_factor = loadings.shape[1]
    scaled = loadings / uniqueness[:, np.newaxis]
    precision = np.eye(n_factor) + loadings.T @ scaled
    factor = cholesky(precision)
    mean = cho_solve(factor, scaled.T @ rows.T)
    noise = solve_triangular(
        factor[0],
        rng.standard_normal((n_factor, rows.shape[0])),
        lower=True,
        trans="T",
    )
    return (mean + noise).T


def sample_free_rows(gram, cross, uniqueness, eta, rng) -> np.ndarray:
    """
    Sample loadings rows without constraints, all rows at once

    Row j has precision gram / sigma_j^2 + I / eta and mean
    precision^-1 cross[:, j] / sigma_j^2.
    """
    n_factor = gram.shape[0]
    precisions = gram[np.newaxis] / uniqueness[:, np.newaxis, np.newaxis]
    precisions = precisions + np.eye(n_factor)[np.newaxis] / eta
    try:
        lower = np.linalg.cholesky(precisions)
    except LinAlgError as err:
        raise NumericalError(f"Loadings precision not positive definite: {err}") from err
    rhs = cross.T / uniqueness[:, np.newaxis]
    mean = np.linalg.solve(precisions, rhs[..., np.newaxis])[..., 0]
    standard = rng.standard_normal(mean.shape)
    noise = np.linalg.solve(np.swapaxes(lower, 1, 2), standard[..., np.newaxis])[..., 0]
    return mean + noise


def sample_plt_row(row_index, gram, cross_row, variance, eta, rng) -> np.ndarray:
    """
    Sample row j < k of a PLT loadings matrix

    The free entries are b_j0 .. b_jj. The diagonal entry is drawn from its
    marginal conditional truncated to (0, inf); the remaining entries follow
    from the normal conditional given the diagonal.
    """
    n_free = row_index + 1
    precision = gram[:n_free, :n_free] / variance + np.eye(n_free) / eta
    factor = cholesky(precision)
    mean = cho_solve(factor, cross_row[:n_free] / variance)
    covariance = cho_solve(factor, np.eye(n_free))
    diag_mean = mean[-1]
    diag_sd = np.sqrt(covariance[-1, -1])
    row = np.zeros(n_free)
    row[-1] = sample_positive_normal(diag_mean, diag_sd, rng)
    if n_free > 1:
        sub_precision = precision[:-1, :-1]
        sub_factor = cholesky(sub_precision)
        shift = cho_solve(sub_factor, precision[:-1, -1]) * (row[-1] - diag_mean)
        standard = rng.standard_normal(n_free - 1)
        noise = solve_triangular(sub_factor[0], standard, lower=True, trans="T")
        row[:-1] = mean[:-1] - shift + noise
    return row


def sample_uniqueness(residual_ss, n_obs, prior: PriorConfig, rng) -> np.ndarray:
    """sigma_j^2 | rest ~ IG(a + n/2, b + rss_j/2)"""
    shape = prior.uniqueness_shape + 0.5 * n_obs
    scale = prior.uniqueness_scale + 0.5 * np.asarray(residual_ss, dtype=np.float64)
    return np.atleast_1d(invgamma.rvs(shape, scale=scale, random_state=rng))


def sample_loading_variance(free_loadings, prior: PriorConfig, rng) -> float:
    """eta | B ~ IG(a_eta + n_free/2, b_eta + sum(b^2)/2) over the free loadings"""
    shape = prior.loading_shape + 0.5 * free_loadings.size
    scale = prior.loading_scale + 0.5 * float((free_loadings**2).sum())
    return float(invgamma.rvs(shape, scale=scale, random_state=rng))


class FactorGibbsSampler:
    """
    One Gibbs chain of the factor model at a fixed working dimension

    Args:
        data: observations. Centered in place if not centered yet
        prior: prior settings
        chain: chain length, dimension and seed
        show_progress: show a progress bar over the sweeps
    """

    def __init__(
        self,
        data: Dataset,
        prior: PriorConfig = None,
        chain: ChainConfig = None,
        show_progress=False,
    ):
        self.prior = prior if prior is not None else PriorConfig()
        self.chain = chain if chain is not None else ChainConfig()
        self.show_progress = show_progress

        if not data.centered:
            _logger.debug("Centering the data before sampling")
            data.center()
        self.data = data
        self.rows = data.rows
        self.n_obs, self.n_var = self.rows.shape
        self.n_factor = self.chain.k
        if self.n_factor > self.n_var:
            raise ConfigError(
                f"chain.k ({self.n_factor}) may not exceed the number of variables "
                f"({self.n_var})"
            )

        self.rng = make_rng(self.chain.seed)
        self.free_mask = np.ones((self.n_var, self.n_factor), dtype=bool)
        if self.prior.family == "plt":
            self.free_mask[np.triu_indices(self.n_factor, k=1)] = False

        self.loadings = None
        self.uniqueness = None
        self.factors = None
        self.eta = self.prior.loading_variance
        self.initialize()

    def initialize(self):
        """Start from scaled principal eigenvectors of the sample covariance"""
        covariance = self.rows.T @ self.rows / self.n_obs
        eigen_values, eigen_vectors = np.linalg.eigh(covariance)
        order = np.argsort(eigen_values)[::-1][: self.n_factor]
        scales = np.sqrt(np.maximum(eigen_values[order], 0.0))
        loadings = eigen_vectors[:, order] * scales
        if self.prior.family == "plt":
            loadings = plt_rotate(loadings)
        self.loadings = loadings
        self.uniqueness = np.maximum(
            np.diag(covariance) - (loadings**2).sum(axis=1), INITIAL_UNIQUENESS_FLOOR
        )

    @staticmethod
    def check_finite(values, sweep, block):
        if not np.all(np.isfinite(values)):
            raise NumericalError(
                f"Non-finite conditional parameters in sweep {sweep}, block {block}"
            )

    def update_loadings(self, sweep):
        gram = self.factors.T @ self.factors
        cross = self.factors.T @ self.rows
        loadings = np.zeros((self.n_var, self.n_factor))
        if self.prior.family == "plt":
            n_constrained = self.n_factor
            for row_index in range(n_constrained):
                loadings[row_index, : row_index + 1] = sample_plt_row(
                    row_index,
                    gram,
                    cross[:, row_index],
                    self.uniqueness[row_index],
                    self.eta,
                    self.rng,
                )
        else:
            n_constrained = 0
        if n_constrained < self.n_var:
            loadings[n_constrained:] = sample_free_rows(
                gram,
                cross[:, n_constrained:],
                self.uniqueness[n_constrained:],
                self.eta,
                self.rng,
            )
        self.check_finite(loadings, sweep, "loadings")
        self.loadings = loadings

    def sweep(self, sweep):
        """One pass over all blocks: factors, loadings, uniqueness, eta"""
        try:
            self.factors = sample_factors(
                self.rows, self.loadings, self.uniqueness, self.rng
            )
        except NumericalError as err:
            raise NumericalError(f"Sweep {sweep}, block factors: {err}") from err
        self.check_finite(self.factors, sweep, "factors")

        try:
            self.update_loadings(sweep)
        except NumericalError as err:
            if "block" in str(err):
                raise
            raise NumericalError(f"Sweep {sweep}, block loadings: {err}") from err

        residuals = self.rows - self.factors @ self.loadings.T
        self.uniqueness = sample_uniqueness(
            (residuals**2).sum(axis=0), self.n_obs, self.prior, self.rng
        )
        self.check_finite(self.uniqueness, sweep, "uniqueness")
        if np.any(self.uniqueness <= 0):
            raise NumericalError(f"Non-positive uniqueness in sweep {sweep}")

        if self.prior.hierarchical:
            self.eta = sample_loading_variance(
                self.loadings[self.free_mask], self.prior, self.rng
            )
            self.check_finite(self.eta, sweep, "eta")

    def run(self) -> PosteriorDraws:
        chain = self.chain
        n_retained = chain.n_retained
        loadings_draws = np.empty((n_retained, self.n_var, self.n_factor))
        uniqueness_draws = np.empty((n_retained, self.n_var))

        _logger.info(
            f"Running {chain.iterations} sweeps ({chain.burnin} burnin, thin "
            f"{chain.thin}) of the {self.prior.family} sampler with k={self.n_factor}"
        )
        progress_bar = make_progress_bar(
            chain.iterations, "Gibbs", show_progress=self.show_progress
        )
        retained = 0
        for sweep in range(chain.iterations):
            self.sweep(sweep)
            if sweep >= chain.burnin and (sweep - chain.burnin + 1) % chain.thin == 0:
                loadings_draws[retained] = self.loadings
                uniqueness_draws[retained] = self.uniqueness
                retained += 1
            if progress_bar:
                progress_bar.update()
        if progress_bar:
            progress_bar.close()

        provenance = (
            f"dssfa gibbs, {self.prior.family} prior, k={self.n_factor}, "
            f"seed={chain.seed}"
        )
        return PosteriorDraws(
            loadings=loadings_draws[:retained],
            uniqueness=uniqueness_draws[:retained],
            provenance=provenance,
        )


def run_gibbs(
    data: Dataset, prior: PriorConfig, chain: ChainConfig, show_progress=False
) -> PosteriorDraws:
    """Run one chain and return its retained draws"""
    sampler = FactorGibbsSampler(
        data=data, prior=prior, chain=chain, show_progress=show_progress
    )
    return sampler.run()


def write_draws(draws: PosteriorDraws, file_name: Path):
    """
    Persist posterior draws. A ``.csv`` suffix selects the long csv format,
    anything else the binary format

    Binary layout, all little endian: magic ``DSSF``, u32 version, u32 p,
    u32 k, u32 M, followed by M records of p*k loadings (row major) and p
    uniqueness variances as float64.
    """
    file_name = Path(file_name)
    if file_name.suffix.lower() == ".csv":
        write_draws_csv(draws, file_name)
        return
    header = DRAWS_MAGIC + np.array(
        [DRAWS_VERSION, draws.p, draws.k, draws.n_draws], dtype="<u4"
    ).tobytes()
    records = np.concatenate(
        [draws.loadings.reshape(draws.n_draws, -1), draws.uniqueness], axis=1
    )
    _logger.info(f"Writing {draws.n_draws} draws to {file_name}")
    with open(file_name, "wb") as stream:
        stream.write(header)
        stream.write(np.ascontiguousarray(records, dtype="<f8").tobytes())


def validate_uniqueness_draws(uniqueness, file_name):
    if not np.all(np.isfinite(uniqueness)) or np.any(uniqueness <= 0):
        raise DrawsFormatError(
            f"Draws file {file_name} has non-positive or non-finite uniqueness entries"
        )


def read_draws(file_name: Path) -> PosteriorDraws:
    """Read draws written by :func:`write_draws` (binary or csv)"""
    file_name = Path(file_name)
    if not file_name.exists():
        raise FileNotFoundError(f"Draws file not found {file_name.absolute()}")
    if file_name.suffix.lower() == ".csv":
        return read_draws_csv(file_name)

    payload = file_name.read_bytes()
    if len(payload) < DRAWS_HEADER_SIZE:
        raise DrawsFormatError(f"Draws file {file_name} is truncated in the header")
    if payload[:4] != DRAWS_MAGIC:
        raise DrawsFormatError(
            f"Draws file {file_name} does not start with {DRAWS_MAGIC!r}"
        )
    version, n_var, n_factor, n_draws = (
        int(value) for value in np.frombuffer(payload, dtype="<u4", count=4, offset=4)
    )
    if version != DRAWS_VERSION:
        raise DrawsFormatError(
            f"Draws file {file_name} has version {version}; only {DRAWS_VERSION} is known"
        )
    record_size = n_var * n_factor + n_var
    expected = DRAWS_HEADER_SIZE + 8 * n_draws * record_size
    if len(payload) != expected:
        raise DrawsFormatError(
            f"Draws file {file_name} has {len(payload)} bytes where {expected} "
            f"are expected (truncated payload)"
        )
    records = np.frombuffer(payload, dtype="<f8", offset=DRAWS_HEADER_SIZE)
    records = records.reshape(n_draws, record_size).astype(np.float64)
    loadings = records[:, : n_var * n_factor].reshape(n_draws, n_var, n_factor)
    uniqueness = records[:, n_var * n_factor :]
    validate_uniqueness_draws(uniqueness, file_name)
    try:
        return PosteriorDraws(
            loadings=loadings, uniqueness=uniqueness, provenance=file_name.name
        )
    except (NumericalError, ValueError) as err:
        raise DrawsFormatError(f"Invalid draws in {file_name}: {err}") from err


def write_draws_csv(draws: PosteriorDraws, file_name: Path):
    """Long format with columns draw, entity, row, col, value (S uses col 0)"""
    draw_index, row_index, col_index = np.meshgrid(
        np.arange(draws.n_draws), np.arange(draws.p), np.arange(draws.k), indexing="ij"
    )
    loadings_df = pd.DataFrame(
        dict(
            draw=draw_index.ravel(),
            entity="B",
            row=row_index.ravel(),
            col=col_index.ravel(),
            value=draws.loadings.ravel(),
        )
    )
    uniqueness_df = pd.DataFrame(
        dict(
            draw=np.repeat(np.arange(draws.n_draws), draws.p),
            entity="S",
            row=np.tile(np.arange(draws.p), draws.n_draws),
            col=0,
            value=draws.uniqueness.ravel(),
        )
    )
    draws_df = pd.concat([loadings_df, uniqueness_df], ignore_index=True)
    _logger.info(f"Writing {draws.n_draws} draws to {file_name}")
    draws_df[DRAWS_CSV_COLUMNS].to_csv(file_name, index=False, float_format=FLOAT_FORMAT)


def read_draws_csv(file_name: Path) -> PosteriorDraws:
    """
    Read long format draws, for instance exported from an external sampler

    Draw labels may be any integers; they are ordered ascending. Rows and
    columns count from 0.
    """
    draws_df = pd.read_csv(file_name, float_precision="round_trip")
    missing = set(DRAWS_CSV_COLUMNS).difference(draws_df.columns)
    if missing:
        raise DrawsFormatError(f"Draws csv {file_name} misses columns {sorted(missing)}")
    entities = set(draws_df["entity"].unique())
    if not entities.issubset({"B", "S"}) or "S" not in entities:
        raise DrawsFormatError(
            f"Draws csv {file_name} has entities {sorted(entities)}; expected B and S"
        )

    labels = np.sort(draws_df["draw"].unique())
    draw_position = np.searchsorted(labels, draws_df["draw"].to_numpy())
    is_loading = (draws_df["entity"] == "B").to_numpy()
    rows = draws_df["row"].to_numpy(dtype=int)
    cols = draws_df["col"].to_numpy(dtype=int)
    values = draws_df["value"].to_numpy(dtype=np.float64)
    if rows.min() < 0 or cols.min() < 0:
        raise DrawsFormatError(f"Draws csv {file_name} has negative indices")

    n_draws = labels.size
    n_var = int(rows.max()) + 1
    n_factor = int(cols[is_loading].max()) + 1 if is_loading.any() else 0
    if n_factor < 1:
        raise DrawsFormatError(f"Draws csv {file_name} has no loadings entries")
    if np.any(cols[~is_loading] != 0):
        raise DrawsFormatError(f"Draws csv {file_name} has uniqueness with col != 0")

    loadings = np.full((n_draws, n_var, n_factor), np.nan)
    uniqueness = np.full((n_draws, n_var), np.nan)
    loadings[draw_position[is_loading], rows[is_loading], cols[is_loading]] = values[
        is_loading
    ]
    uniqueness[draw_position[~is_loading], rows[~is_loading]] = values[~is_loading]
    if is_loading.sum() != loadings.size or (~is_loading).sum() != uniqueness.size:
        raise DrawsFormatError(
            f"Draws csv {file_name} does not have exactly one value per entry"
        )
    if np.isnan(loadings).any():
        raise DrawsFormatError(f"Draws csv {file_name} is missing loadings entries")
    validate_uniqueness_draws(uniqueness, file_name)
    try:
        return PosteriorDraws(
            loadings=loadings, uniqueness=uniqueness, provenance=Path(file_name).name
        )
    except (NumericalError, ValueError) as err:
        raise DrawsFormatError(f"Invalid draws in {file_name}: {err}") from err
