"""
Desk scale reproductions of the toy example and the simulation study.

These runs take minutes; select them with ``pytest -m slow``.
"""
import numpy as np
import pytest

from dssfa.bench import make_report, run_bench
from dssfa.covariance import posterior_mean_cov, rmse
from dssfa.datagen import harman_toy_truth, random_truth, simulate_normal, split_seed
from dssfa.gibbs import ChainConfig, PriorConfig, run_gibbs
from dssfa.pfa import PathConfig, fit_path
from dssfa.settings import RunConfig
from dssfa.summary import summarize

pytestmark = pytest.mark.slow

N_TOY_RUNS = 10


def toy_run(seed):
    _, data_seed, chain_seed = split_seed(seed, 3)
    data = simulate_normal(harman_toy_truth(), 100, seed=data_seed)
    chain = ChainConfig(k=5, iterations=10000, burnin=5000, seed=chain_seed)
    draws = run_gibbs(data, PriorConfig(), chain)
    omega_bar = posterior_mean_cov(draws)
    path = fit_path(omega_bar, PathConfig(k_range=[1, 2, 3, 4, 5], path_length=10))
    _, _, selection = summarize(path, draws, 0.95)
    return omega_bar, path, selection


@pytest.fixture(scope="module")
def toy_runs():
    return [toy_run(seed) for seed in range(N_TOY_RUNS)]


def bench_config(tmp_path, **bench):
    config = RunConfig.from_file(out=tmp_path)
    config.settings["bench"].update(bench)
    return RunConfig(settings=config.settings)


def test_toy_selects_two_factors(toy_runs):
    selections = [selection for _, _, selection in toy_runs]
    n_correct = sum(selection.k_selected == 2 for selection in selections)
    assert n_correct >= 9
    for selection in selections:
        if selection.k_selected == 2:
            assert 0.09 <= selection.sparsity <= 0.29


def test_toy_posterior_mean_diagonal(toy_runs):
    for omega_bar, _, _ in toy_runs:
        diagonal = np.diag(omega_bar)
        assert np.all((diagonal >= 0.7) & (diagonal <= 1.3))


def test_toy_path_shape(toy_runs):
    _, path, _ = toy_runs[0]

    def surviving(k_tilde):
        return sum(not fit.has_zero_columns for fit in path.fits_for(k_tilde))

    for k_tilde in (3, 4, 5):
        assert surviving(k_tilde) < surviving(2)


def test_toy_lower_bound(toy_runs):
    for _, path, _ in toy_runs:
        for fit in path.fits:
            assert fit.fit_term >= path.lower_bound - 1e-9


def test_simulation_study_normal(tmp_path):
    config = bench_config(
        tmp_path,
        replicates=30,
        scenarios=[
            dict(name="normal_s02", sigma=0.2),
            dict(name="normal_s05", sigma=0.5),
        ],
    )
    report_df = make_report(run_bench(config))
    assert (report_df["n_failed"] == 0).all()
    assert (report_df["proportion_correct"] >= 0.9).all()
    assert (report_df["min_bound_gap"] >= -1e-9).all()


def test_simulation_study_heavy_tails(tmp_path):
    config = bench_config(
        tmp_path,
        replicates=30,
        scenarios=[
            dict(name="t10_s05", sigma=0.5, dist="t", nu=10),
            dict(name="t3_s05", sigma=0.5, dist="t", nu=3),
        ],
    )
    report_df = make_report(run_bench(config)).set_index(["scenario", "quantile"])
    assert (report_df.loc["t10_s05", "proportion_correct"] >= 0.9).all()
    assert (report_df.loc["t3_s05", "proportion_correct"] >= 0.4).all()
    assert (report_df["min_bound_gap"] >= -1e-9).all()


def test_rmse_decreases_with_sample_size(tmp_path):
    config = bench_config(
        tmp_path,
        replicates=10,
        quantiles=[0.95],
        scenarios=[
            dict(name="n100", sigma=0.2, n=100),
            dict(name="n500", sigma=0.2, n=500),
            dict(name="n1000", sigma=0.2, n=1000),
        ],
    )
    report_df = make_report(run_bench(config))
    report_df = report_df.set_index("scenario")
    medians = report_df.loc[["n100", "n500", "n1000"], "rmse_median"]
    assert np.all(np.diff(medians.to_numpy()) < 0)


def posterior_rmse(truth, n, seed):
    _, data_seed, chain_seed = split_seed(seed, 3)
    data = simulate_normal(truth, n, seed=data_seed)
    chain = ChainConfig(k=4, iterations=4000, burnin=2000, seed=chain_seed)
    draws = run_gibbs(data, PriorConfig(), chain)
    return rmse(posterior_mean_cov(draws), truth.covariance)


def test_posterior_mean_converges_to_truth():
    n_closer = 0
    for replicate in range(10):
        truth_seed, *_ = split_seed(replicate, 3)
        truth = random_truth(8, 2, sigma=0.2, seed=truth_seed)
        small = posterior_rmse(truth, 100, seed=100 + replicate)
        large = posterior_rmse(truth, 1000, seed=100 + replicate)
        n_closer += large < small
    assert n_closer >= 8
