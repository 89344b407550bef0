"""
Simulation study harness.

A replicate simulates data from a random truth, samples the posterior at the
working dimension, fits the unpenalized path over all smaller dimensions and
selects a dimension at every requested quantile. Replicates are independent
given their seed and run on a process pool; results are ordered by scenario
and replicate index, not by completion.
"""
import logging
from dataclasses import dataclass, replace
from multiprocessing import Pool
from pathlib import Path

import numpy as np
import pandas as pd

from dssfa.covariance import posterior_mean_cov, rmse
from dssfa.datagen import split_seed
from dssfa.exceptions import DSSFAError
from dssfa.gibbs import ChainConfig, PriorConfig, run_gibbs
from dssfa.pfa import PathConfig, fit_path
from dssfa.settings import GenerationConfig, RunConfig
from dssfa.summary import full_model_quantile, loss_grid, select
from dssfa.utils import FLOAT_FORMAT, make_progress_bar

_logger = logging.getLogger(__name__)

REPORT_FILE = "bench_report.csv"
REPLICATES_FILE = "bench_replicates.csv"


@dataclass
class ReplicateJob:
    scenario: str
    replicate: int
    seed: int
    generation: GenerationConfig
    prior: PriorConfig
    chain: ChainConfig
    path: PathConfig
    quantiles: tuple


def make_jobs(config: RunConfig):
    """One job per scenario and replicate, seeded by base_seed + replicate"""
    bench = config.bench
    base_settings = dict(config.settings["generation"], truth="random")
    jobs = list()
    for scenario in bench.scenarios:
        overrides = {
            key: value for key, value in scenario.items() if key not in ("name", "family")
        }
        generation = GenerationConfig(**dict(base_settings, **overrides))
        prior = config.prior
        if "family" in scenario:
            prior = replace(prior, family=scenario["family"])
        path = replace(config.path, penalize=False, processes=1)
        for replicate in range(bench.replicates):
            seed = generation.base_seed + replicate
            jobs.append(
                ReplicateJob(
                    scenario=scenario["name"],
                    replicate=replicate,
                    seed=seed,
                    generation=generation,
                    prior=prior,
                    chain=replace(
                        config.chain,
                        iterations=bench.iterations,
                        burnin=bench.burnin,
                    ),
                    path=path,
                    quantiles=tuple(bench.quantiles),
                )
            )
    return jobs


def run_replicate(job: ReplicateJob):
    """
    Run one replicate of a scenario

    Returns:
        list: one record per quantile. A failed replicate gives records with
        the error message and no selection
    """
    base = dict(
        scenario=job.scenario,
        replicate=job.replicate,
        seed=job.seed,
        k0=job.generation.k0,
    )
    truth_seed, data_seed, chain_seed = split_seed(job.seed, 3)
    try:
        truth = job.generation.make_truth(seed=truth_seed)
        data = job.generation.simulate(truth, seed=data_seed)
        draws = run_gibbs(data, job.prior, replace(job.chain, seed=chain_seed))
        omega_bar = posterior_mean_cov(draws)
        path = fit_path(omega_bar, replace(job.path, k_range=range(1, draws.k + 1)))
        grid = loss_grid(path, draws)
        bound_gap = min(fit.fit_term for fit in path.fits) - path.lower_bound
        records = list()
        for quantile in job.quantiles:
            threshold = full_model_quantile(grid, quantile)
            selection = select(grid, threshold, quantile=quantile)
            estimate = path.get(*selection.key).covariance()
            records.append(
                dict(
                    base,
                    quantile=quantile,
                    k_selected=selection.k_selected,
                    correct=selection.k_selected == truth.k0,
                    rmse=rmse(estimate, truth.covariance),
                    threshold=threshold,
                    fallback=selection.fallback,
                    bound_gap=bound_gap,
                    error=None,
                )
            )
    except (DSSFAError, np.linalg.LinAlgError) as err:
        _logger.warning(f"Replicate {job.replicate} of {job.scenario} failed: {err}")
        return [dict(base, quantile=quantile, error=str(err)) for quantile in job.quantiles]

    selected = ", ".join(
        f"q={record['quantile']}: k={record['k_selected']}" for record in records
    )
    _logger.info(f"{job.scenario} replicate {job.replicate}: {selected}")
    return records


def run_bench(config: RunConfig, show_progress=False) -> pd.DataFrame:
    """Run all replicates of all scenarios. Returns the per replicate table"""
    jobs = make_jobs(config)
    n_processes = min(config.n_processes, len(jobs))
    _logger.info(f"Running {len(jobs)} replicates on {n_processes} processes")

    progress_bar = make_progress_bar(len(jobs), "Bench", show_progress=show_progress)
    records = list()
    if n_processes > 1:
        with Pool(processes=n_processes) as pool:
            for job_records in pool.imap(run_replicate, jobs):
                records.extend(job_records)
                if progress_bar:
                    progress_bar.update()
    else:
        for job in jobs:
            records.extend(run_replicate(job))
            if progress_bar:
                progress_bar.update()
    if progress_bar:
        progress_bar.close()

    replicates_df = pd.DataFrame.from_records(records)
    for column in ("k_selected", "correct", "rmse", "threshold", "fallback", "bound_gap"):
        if column not in replicates_df.columns:
            replicates_df[column] = np.nan
    return replicates_df


def make_report(replicates_df: pd.DataFrame) -> pd.DataFrame:
    """
    Per scenario and quantile: correct selection proportion over the
    successful replicates, RMSE quartiles and the number of failures
    """
    failed = replicates_df["error"].notna()
    records = list()
    for (scenario, quantile), group_df in replicates_df.groupby(
        ["scenario", "quantile"], sort=False
    ):
        success_df = group_df[~failed.loc[group_df.index]]
        n_success = len(success_df.index)
        if n_success:
            proportion = float(success_df["correct"].astype(bool).mean())
            quartiles = np.quantile(success_df["rmse"].to_numpy(dtype=float), [0.25, 0.5, 0.75])
        else:
            proportion = np.nan
            quartiles = np.full(3, np.nan)
        records.append(
            dict(
                scenario=scenario,
                quantile=quantile,
                n_replicates=len(group_df.index),
                n_failed=len(group_df.index) - n_success,
                proportion_correct=proportion,
                rmse_q25=quartiles[0],
                rmse_median=quartiles[1],
                rmse_q75=quartiles[2],
                min_bound_gap=success_df["bound_gap"].min() if n_success else np.nan,
            )
        )
    return pd.DataFrame.from_records(records)


def write_report(
    report_df: pd.DataFrame,
    replicates_df: pd.DataFrame,
    output_directory: Path,
    report_to_xls=False,
):
    """Write the report and the per replicate table. Returns the file names"""
    output_directory = Path(output_directory)
    output_directory.mkdir(exist_ok=True, parents=True)
    report_file = output_directory / REPORT_FILE
    replicates_file = output_directory / REPLICATES_FILE
    _logger.info(f"Writing bench report to {report_file}")
    report_df.to_csv(report_file, index=False, float_format=FLOAT_FORMAT)
    replicates_df.to_csv(replicates_file, index=False, float_format=FLOAT_FORMAT)
    file_names = [report_file, replicates_file]

    if report_to_xls:
        excel_file = report_file.with_suffix(".xlsx")
        _logger.info(f"Writing bench report to {excel_file}")
        with pd.ExcelWriter(str(excel_file), engine="openpyxl") as writer:
            report_df.to_excel(excel_writer=writer, sheet_name="report", index=False)
            replicates_df.to_excel(excel_writer=writer, sheet_name="replicates", index=False)
        file_names.append(excel_file)
    return file_names
