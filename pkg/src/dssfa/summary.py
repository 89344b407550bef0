"""
Posterior summary of the penalized fits.

Every fit on the path is scored by its Stein loss against each posterior
draw. The losses of the full model (working dimension, no penalty) set the
acceptance threshold; the selection is the smallest dimension, and within it
the largest penalty, whose expected loss stays below that threshold.
"""
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import List

import numpy as np
import pandas as pd
from scipy.linalg import cho_solve

from dssfa.covariance import PosteriorDraws, cholesky, log_det
from dssfa.exceptions import ConfigError, DimensionError, MissingFullModelError
from dssfa.pfa import FitPath, PenalizedFit
from dssfa.utils import FLOAT_FORMAT

_logger = logging.getLogger(__name__)

SUMMARY_FILE = "summary.csv"
FULL_MODEL_LOSSES_FILE = "fullmodel_losses.csv"
SELECTION_FILE = "selection.json"


@dataclass
class LossEntry:
    """Loss of one (k_tilde, lambda) fit against the posterior"""

    k_tilde: int
    lambda_index: int
    lam: float
    expected_loss: float
    excluded: bool
    sparsity: float
    effective_k: int
    per_draw_losses: np.ndarray = None

    @property
    def key(self):
        return self.k_tilde, self.lambda_index


@dataclass
class LossGrid:
    entries: List[LossEntry]
    full_model_key: tuple
    n_draws: int

    def get(self, k_tilde, lambda_index) -> LossEntry:
        for entry in self.entries:
            if entry.key == (k_tilde, lambda_index):
                return entry
        raise KeyError(f"No loss entry at k_tilde={k_tilde}, lambda index {lambda_index}")

    @property
    def full_model(self) -> LossEntry:
        return self.get(*self.full_model_key)

    def to_dataframe(self) -> pd.DataFrame:
        records = [
            dict(
                k_tilde=entry.k_tilde,
                lambda_index=entry.lambda_index,
                lam=entry.lam,
                expected_loss=entry.expected_loss,
                excluded=entry.excluded,
                sparsity=entry.sparsity,
                effective_k=entry.effective_k,
            )
            for entry in self.entries
        ]
        return pd.DataFrame.from_records(records).rename(columns=dict(lam="lambda"))


@dataclass
class SelectionResult:
    k_selected: int
    lambda_selected: float
    lambda_index: int
    quantile: float
    threshold: float
    sparsity: float
    expected_loss: float
    feasible_set: list = field(default_factory=list)
    fallback: bool = False

    @property
    def key(self):
        return self.k_selected, self.lambda_index

    def to_dict(self) -> dict:
        return dict(
            k_selected=self.k_selected,
            lambda_selected=self.lambda_selected,
            lambda_index=self.lambda_index,
            quantile=self.quantile,
            threshold=self.threshold,
            sparsity=self.sparsity,
            expected_loss=self.expected_loss,
            feasible_set=[list(key) for key in self.feasible_set],
            fallback=self.fallback,
        )


def sparsity(loadings) -> float:
    """Fraction of exactly zero loadings entries"""
    loadings = np.asarray(loadings)
    if loadings.size == 0:
        raise DimensionError("Cannot compute the sparsity of an empty loadings matrix")
    return float(np.count_nonzero(loadings == 0)) / loadings.size


def draw_losses(fit_covariance, covariances) -> np.ndarray:
    """Stein loss of one fitted covariance against a stack of M covariances"""
    factor = cholesky(fit_covariance)
    inverse = cho_solve(factor, np.eye(fit_covariance.shape[0]))
    traces = np.einsum("ij,mji->m", inverse, covariances)
    return log_det(factor) + traces


def loss_grid(path: FitPath, draws: PosteriorDraws, keep_all=False) -> LossGrid:
    """
    Per-draw and expected losses of every fit on the path

    Args:
        path: penalized fits over the (k_tilde, lambda) grid
        draws: posterior draws the fits are scored against
        keep_all: keep the per-draw losses of every fit instead of only the
            full model

    Returns:
        LossGrid: fits with zeroed columns are marked excluded and carry a NaN
        expected loss
    """
    if path.p != draws.p:
        raise DimensionError(f"Path has p={path.p} but the draws have p={draws.p}")
    full_model_key = (draws.k, 0)
    try:
        path.get(*full_model_key)
    except KeyError as err:
        raise MissingFullModelError(
            f"Path has no full model fit at k_tilde={draws.k}, lambda index 0"
        ) from err

    covariances = draws.covariances()
    entries = list()
    for fit in sorted(path.fits, key=lambda item: (item.k_tilde, item.lambda_index)):
        is_full_model = (fit.k_tilde, fit.lambda_index) == full_model_key
        if is_full_model and fit.has_zero_columns:
            _logger.warning("The full model fit has zeroed columns; keeping it anyway")
        entries.append(score_fit(fit, covariances, is_full_model, keep_all))

    n_excluded = sum(entry.excluded for entry in entries)
    _logger.info(
        f"Scored {len(entries) - n_excluded} fits against {draws.n_draws} draws; "
        f"{n_excluded} excluded for zeroed columns"
    )
    return LossGrid(entries=entries, full_model_key=full_model_key, n_draws=draws.n_draws)


def score_fit(fit: PenalizedFit, covariances, is_full_model, keep_all) -> LossEntry:
    excluded = fit.has_zero_columns and not is_full_model
    losses = None
    expected_loss = float("nan")
    if not excluded:
        losses = draw_losses(fit.covariance(), covariances)
        expected_loss = float(losses.mean())
    return LossEntry(
        k_tilde=fit.k_tilde,
        lambda_index=fit.lambda_index,
        lam=fit.lam,
        expected_loss=expected_loss,
        excluded=excluded,
        sparsity=sparsity(fit.loadings),
        effective_k=fit.effective_k,
        per_draw_losses=losses if (keep_all or is_full_model) else None,
    )


def full_model_quantile(grid: LossGrid, quantile: float) -> float:
    """Empirical quantile of the full model losses, linear interpolation"""
    if not 0 < quantile < 1:
        raise ConfigError(f"Quantile must lie in (0, 1). Got {quantile}")
    losses = grid.full_model.per_draw_losses
    return float(np.quantile(losses, quantile, method="linear"))


def select(grid: LossGrid, threshold: float, quantile: float = float("nan")) -> SelectionResult:
    """
    Smallest feasible dimension, then its largest feasible penalty

    A fit is feasible if it is not excluded and its expected loss does not
    exceed the threshold. Without feasible fits the full model is returned
    with ``fallback`` set.
    """
    feasible = [
        entry
        for entry in grid.entries
        if not entry.excluded and entry.expected_loss <= threshold
    ]
    if feasible:
        chosen = min(
            feasible,
            key=lambda entry: (entry.k_tilde, -entry.lam, -entry.lambda_index),
        )
        fallback = False
    else:
        _logger.warning(
            f"No fit has an expected loss below {threshold}. Returning the full model"
        )
        chosen = grid.full_model
        fallback = True
    return SelectionResult(
        k_selected=chosen.k_tilde,
        lambda_selected=chosen.lam,
        lambda_index=chosen.lambda_index,
        quantile=quantile,
        threshold=threshold,
        sparsity=chosen.sparsity,
        expected_loss=chosen.expected_loss,
        feasible_set=[entry.key for entry in feasible],
        fallback=fallback,
    )


def summarize(path: FitPath, draws: PosteriorDraws, quantile: float):
    """Loss grid, threshold and selection at one quantile"""
    grid = loss_grid(path, draws)
    threshold = full_model_quantile(grid, quantile)
    selection = select(grid, threshold, quantile=quantile)
    _logger.info(
        f"q={quantile}: selected k_tilde={selection.k_selected}, "
        f"lambda index {selection.lambda_index}, sparsity {selection.sparsity:.3f}"
    )
    return grid, threshold, selection


def emit_summary(
    grid: LossGrid,
    selection: SelectionResult,
    output_directory: Path,
    config_digest: str = None,
):
    """
    Write the summary table, the full model losses and the selection

    Returns:
        list: the written file names
    """
    output_directory = Path(output_directory)
    output_directory.mkdir(exist_ok=True, parents=True)

    summary_df = grid.to_dataframe()
    summary_df["feasible"] = (~summary_df["excluded"]) & (
        summary_df["expected_loss"] <= selection.threshold
    )
    summary_df["selected"] = [entry.key == selection.key for entry in grid.entries]
    columns = [
        "k_tilde",
        "lambda_index",
        "lambda",
        "expected_loss",
        "excluded",
        "feasible",
        "selected",
        "sparsity",
        "effective_k",
    ]
    summary_file = output_directory / SUMMARY_FILE
    _logger.info(f"Writing summary to {summary_file}")
    summary_df[columns].to_csv(summary_file, index=False, float_format=FLOAT_FORMAT)

    losses_file = output_directory / FULL_MODEL_LOSSES_FILE
    losses_df = pd.DataFrame(dict(loss=grid.full_model.per_draw_losses))
    losses_df.to_csv(losses_file, index=False, float_format=FLOAT_FORMAT)

    selection_file = output_directory / SELECTION_FILE
    record = selection.to_dict()
    if config_digest is not None:
        record["config_digest"] = config_digest
    with open(selection_file, "w", encoding="UTF-8") as stream:
        json.dump(record, stream, indent=1)

    return [summary_file, losses_file, selection_file]
