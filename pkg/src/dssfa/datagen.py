"""
Synthetic data for the toy example and the simulation study.

Random streams: every public function takes a ``seed`` that is either an
integer, a ``numpy.random.SeedSequence`` or a ready ``Generator``. A replicate
``r`` of a study with base seed ``s`` uses the integer seed ``s + r``; inside a
replicate :func:`split_seed` spawns independent child streams (data first,
then the sampler) so results do not depend on how replicates are scheduled.
"""
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd

from dssfa.covariance import as_loadings, as_uniqueness, assemble_cov
from dssfa.exceptions import ConfigError, DataFormatError, DimensionError
from dssfa.utils import FLOAT_FORMAT, read_matrix_csv, write_matrix_csv

_logger = logging.getLogger(__name__)

# Eight physical variables, two factors (Harman, Modern Factor Analysis)
HARMAN_LOADINGS = np.array(
    [
        [0.879, 0.272],
        [0.919, 0.210],
        [0.890, 0.182],
        [0.858, 0.246],
        [0.238, 0.900],
        [0.183, 0.792],
        [0.135, 0.729],
        [0.250, 0.684],
    ]
)

TRUTH_FILES = dict(loadings="B0.csv", uniqueness="Sigma0.csv", covariance="Omega0.csv")


def make_rng(seed=None) -> np.random.Generator:
    """Turn an integer, SeedSequence or Generator into a Generator"""
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def split_seed(seed, n_streams: int):
    """Independent child seed sequences of an integer seed"""
    if isinstance(seed, np.random.SeedSequence):
        sequence = seed
    else:
        sequence = np.random.SeedSequence(seed)
    return sequence.spawn(n_streams)


@dataclass
class GroundTruth:
    """True parameters of a simulated factor model"""

    loadings: np.ndarray
    uniqueness: np.ndarray
    covariance: np.ndarray = field(default=None)

    def __post_init__(self):
        self.loadings = as_loadings(self.loadings)
        self.uniqueness = as_uniqueness(self.uniqueness)
        assembled = assemble_cov(self.loadings, self.uniqueness)
        if self.covariance is None:
            self.covariance = assembled
        else:
            self.covariance = np.asarray(self.covariance, dtype=np.float64)
            if not np.allclose(self.covariance, assembled, rtol=0, atol=1e-12):
                raise DimensionError(
                    "Covariance of the ground truth does not equal B0 B0^T + Sigma0"
                )

    @property
    def p(self) -> int:
        return self.loadings.shape[0]

    @property
    def k0(self) -> int:
        return self.loadings.shape[1]

    def write(self, output_directory: Path):
        """Write B0, Sigma0 and Omega0 as csv files. Returns the file names"""
        output_directory = Path(output_directory)
        output_directory.mkdir(exist_ok=True, parents=True)
        file_names = list()
        for key, matrix in (
            ("loadings", self.loadings),
            ("uniqueness", self.uniqueness),
            ("covariance", self.covariance),
        ):
            file_name = output_directory / TRUTH_FILES[key]
            write_matrix_csv(matrix, file_name)
            file_names.append(file_name)
        return file_names

    @classmethod
    def read(cls, input_directory: Path):
        input_directory = Path(input_directory)
        return cls(
            loadings=read_matrix_csv(input_directory / TRUTH_FILES["loadings"]),
            uniqueness=read_matrix_csv(
                input_directory / TRUTH_FILES["uniqueness"], squeeze=True
            ),
            covariance=read_matrix_csv(input_directory / TRUTH_FILES["covariance"]),
        )


@dataclass
class Dataset:
    """n x p matrix of observations, one row per subject"""

    rows: np.ndarray
    centered: bool = False

    def __post_init__(self):
        self.rows = np.asarray(self.rows, dtype=np.float64)
        if self.rows.ndim != 2 or self.rows.shape[0] < 2:
            raise DimensionError(
                f"A dataset needs at least two rows of observations. Got {self.rows.shape}"
            )
        if not np.all(np.isfinite(self.rows)):
            raise DimensionError("Dataset contains non-finite values")

    @property
    def n(self) -> int:
        return self.rows.shape[0]

    @property
    def p(self) -> int:
        return self.rows.shape[1]

    @property
    def columns(self):
        return [f"v{index + 1}" for index in range(self.p)]

    def center(self):
        """Subtract the column means in place"""
        if not self.centered:
            self.rows -= self.rows.mean(axis=0)
            self.centered = True
        return self

    def sample_covariance(self) -> np.ndarray:
        centered = self.rows - self.rows.mean(axis=0)
        return centered.T @ centered / self.n

    def to_csv(self, file_name: Path):
        data_df = pd.DataFrame(self.rows, columns=self.columns)
        _logger.info(f"Writing {self.n} x {self.p} dataset to {file_name}")
        data_df.to_csv(file_name, index=False, float_format=FLOAT_FORMAT)

    @classmethod
    def from_csv(cls, file_name: Path):
        file_name = Path(file_name)
        if not file_name.exists():
            raise FileNotFoundError(f"Data file not found {file_name.absolute()}")
        _logger.info(f"Reading dataset from {file_name}")
        try:
            data_df = pd.read_csv(file_name, float_precision="round_trip")
        except (pd.errors.ParserError, pd.errors.EmptyDataError) as err:
            raise DataFormatError(
                f"Data file {file_name} cannot be parsed: {err}"
            ) from err
        expected = [f"v{index + 1}" for index in range(len(data_df.columns))]
        if data_df.columns.tolist() != expected:
            raise DataFormatError(
                f"Data file {file_name} must have columns v1..v{len(expected)}. "
                f"Got {data_df.columns.tolist()}"
            )
        if data_df.isna().to_numpy().any():
            raise DataFormatError(
                f"Data file {file_name} has empty cells or short rows"
            )
        try:
            rows = data_df.to_numpy(dtype=np.float64)
        except ValueError as err:
            raise DataFormatError(
                f"Data file {file_name} has non-numeric cells"
            ) from err
        return cls(rows=rows)


def harman_toy_truth() -> GroundTruth:
    """
    Toy example truth: Harman's 8 x 2 loadings with Sigma0 = diag(I - B0 B0^T)

    All variables of the resulting covariance have unit variance.
    """
    loadings = HARMAN_LOADINGS.copy()
    uniqueness = 1.0 - (loadings**2).sum(axis=1)
    covariance = loadings @ loadings.T
    covariance[np.diag_indices_from(covariance)] = 1.0
    return GroundTruth(loadings=loadings, uniqueness=uniqueness, covariance=covariance)


def plt_rotate(raw_loadings) -> np.ndarray:
    """
    Rotate a loadings matrix to positive lower triangular form

    With raw^T = Q R (QR decomposition), raw = R^T Q^T, so ``R^T`` is a rotation
    of ``raw``. Flipping column signs makes the diagonal non-negative.

    Args:
        raw_loadings: p x k matrix with k <= p

    Returns:
        np.ndarray: p x k matrix L with L[j, q] = 0 for q > j, L[q, q] >= 0 and
        L L^T = raw raw^T
    """
    raw_loadings = as_loadings(raw_loadings)
    n_var, n_factor = raw_loadings.shape
    if n_factor > n_var:
        raise DimensionError(f"Cannot rotate {n_factor} factors of {n_var} variables")
    _, upper = np.linalg.qr(raw_loadings.T)
    lower = upper.T
    signs = np.sign(np.diag(lower))
    signs[signs == 0] = 1.0
    lower = lower * signs
    # qr leaves round-off above the diagonal at exactly zero; make sure
    lower[np.triu_indices(n_factor, k=1)] = 0.0
    return lower


def random_plt_loadings(p: int, k0: int, seed=None) -> np.ndarray:
    """Standard normal p x k0 loadings rotated to positive lower triangular form.

    The raw draw is the first ``standard_normal((p, k0))`` call of the
    generator made from ``seed``.
    """
    if k0 > p:
        raise ConfigError(f"k0 ({k0}) may not exceed p ({p})")
    rng = make_rng(seed)
    raw_loadings = rng.standard_normal((p, k0))
    return plt_rotate(raw_loadings)


def random_truth(p: int, k0: int, sigma: float, seed=None) -> GroundTruth:
    """Simulation study truth with PLT loadings and Sigma0 = sigma^2 I"""
    if sigma <= 0:
        raise ConfigError(f"sigma must be positive. Got {sigma}")
    loadings = random_plt_loadings(p, k0, seed=seed)
    return GroundTruth(loadings=loadings, uniqueness=np.full(p, sigma**2))


def simulate_normal(truth: GroundTruth, n: int, seed=None) -> Dataset:
    """n observations y = B0 f + e, f ~ N(0, I), e ~ N(0, Sigma0)"""
    rng = make_rng(seed)
    factors = rng.standard_normal((n, truth.k0))
    errors = rng.standard_normal((n, truth.p)) * np.sqrt(truth.uniqueness)
    return Dataset(rows=factors @ truth.loadings.T + errors)


def simulate_t(truth: GroundTruth, n: int, nu: float, seed=None) -> Dataset:
    """
    n observations with multivariate t factors and errors

    Factors follow t(0, I, nu) and errors t(0, Sigma0, nu), independently. Each
    vector is a normal vector divided by one shared sqrt(chi2(nu) / nu).
    """
    if nu <= 2:
        raise ConfigError(f"Degrees of freedom nu must exceed 2. Got {nu}")
    rng = make_rng(seed)
    factors = rng.standard_normal((n, truth.k0))
    factors /= np.sqrt(rng.chisquare(nu, size=n) / nu)[:, np.newaxis]
    errors = rng.standard_normal((n, truth.p)) * np.sqrt(truth.uniqueness)
    errors /= np.sqrt(rng.chisquare(nu, size=n) / nu)[:, np.newaxis]
    return Dataset(rows=factors @ truth.loadings.T + errors)
