import json

import numpy as np
import pandas as pd
import pytest
import yaml

from dssfa import __version__
from dssfa.covariance import posterior_mean_cov
from dssfa.factor_analyse import (
    EXIT_CONFIG,
    EXIT_IO,
    EXIT_NUMERICAL,
    EXIT_SUCCESS,
    main,
    parse_args,
)
from dssfa.gibbs import read_draws
from dssfa.pfa import FitPath, PathConfig, fit_path
from dssfa.summary import SELECTION_FILE, SUMMARY_FILE
from dssfa.utils import matrix_digest

SMALL_SETTINGS = """
generation:
  n: 60
sampler:
  chain:
    k: 3
    iterations: 200
    burnin: 100
path:
  k_range: [1, 2, 3]
  path_length: 3
"""


@pytest.fixture
def settings_file(tmp_path):
    file_name = tmp_path / "settings.yml"
    file_name.write_text(SMALL_SETTINGS, encoding="UTF-8")
    return file_name


@pytest.fixture
def data_file(tmp_path, settings_file):
    out = tmp_path / "data"
    exit_code = main(["simulate", "--config", str(settings_file), "--out", str(out)])
    assert exit_code == EXIT_SUCCESS
    return out / "replicate_000" / "data.csv"


@pytest.fixture
def draws_file(tmp_path, settings_file, data_file):
    run = tmp_path / "run"
    arguments = ["--config", str(settings_file), "--out", str(run), "--no_progress"]
    assert main(["sample", str(data_file)] + arguments) == EXIT_SUCCESS
    return run / "draws.bin"


def common_arguments(settings_file, out):
    return ["--config", str(settings_file), "--out", str(out), "--no_progress", "--quiet"]


def test_parse_args():
    args = parse_args(["fit", "run/draws.bin", "--lambda-path", "4", "--debug"])
    assert args.command == "fit"
    assert args.lambda_path == 4
    assert args.loglevel == 10
    assert not args.no_progress


def test_version(capsys):
    assert main(["version"]) == EXIT_SUCCESS
    assert f"dssfa {__version__}" in capsys.readouterr().out


def test_simulate_writes_truth_and_data(tmp_path, data_file):
    replicate_directory = data_file.parent
    for name in ("B0.csv", "Sigma0.csv", "Omega0.csv", "data.csv", "manifest.yml"):
        assert (replicate_directory / name).exists()
    data_df = pd.read_csv(data_file)
    assert data_df.shape == (60, 8)


def test_simulate_is_deterministic(tmp_path, settings_file, data_file):
    again = tmp_path / "again"
    main(["simulate"] + common_arguments(settings_file, again))
    assert (again / "replicate_000" / "data.csv").read_bytes() == data_file.read_bytes()

    other = tmp_path / "other"
    main(["simulate", "--seed", "1"] + common_arguments(settings_file, other))
    assert (other / "replicate_000" / "data.csv").read_bytes() != data_file.read_bytes()


def test_sample_is_deterministic(tmp_path, settings_file, data_file, draws_file):
    again = tmp_path / "again"
    assert main(["sample", str(data_file)] + common_arguments(settings_file, again)) == 0
    assert (again / "draws.bin").read_bytes() == draws_file.read_bytes()
    draws = read_draws(draws_file)
    assert (draws.n_draws, draws.p, draws.k) == (100, 8, 3)


def test_sample_csv_draws(tmp_path, settings_file, data_file, draws_file):
    out = tmp_path / "csv"
    arguments = ["sample", str(data_file), "--draws_file", "draws.csv"]
    assert main(arguments + common_arguments(settings_file, out)) == EXIT_SUCCESS
    from_csv = read_draws(out / "draws.csv")
    from_binary = read_draws(draws_file)
    np.testing.assert_array_equal(from_csv.loadings, from_binary.loadings)


def test_fit_and_summarize(tmp_path, settings_file, draws_file, capsys):
    run = draws_file.parent
    arguments = common_arguments(settings_file, run)
    assert main(["fit", str(draws_file)] + arguments) == EXIT_SUCCESS
    path_file = run / "fitpath.json"
    path = FitPath.from_json(path_file)
    assert path.k_values == [1, 2, 3]
    assert len(path.fits) == 3 * 4
    draws = read_draws(draws_file)
    assert path.omega_bar_digest == matrix_digest(posterior_mean_cov(draws))
    assert (run / "loadings" / "loadings_k3_l0.csv").exists()
    assert (run / "omega_bar.csv").exists()

    exit_code = main(["summarize", str(draws_file), str(path_file)] + arguments)
    assert exit_code == EXIT_SUCCESS
    assert "Selected k_tilde=" in capsys.readouterr().out
    summary_df = pd.read_csv(run / SUMMARY_FILE)
    assert summary_df["selected"].sum() == 1
    with open(run / SELECTION_FILE, encoding="UTF-8") as stream:
        selection = json.load(stream)
    assert selection["quantile"] == 0.95
    assert 1 <= selection["k_selected"] <= 3

    with open(run / "manifest.yml", encoding="UTF-8") as stream:
        manifest = yaml.safe_load(stream)
    files = manifest["files"]
    for name in ("draws.bin", "fitpath.json", "omega_bar.csv", SUMMARY_FILE):
        assert name in files
    digests = set(entry["config_digest"] for entry in files.values())
    assert len(digests) == 1


def test_lambda_path_override(tmp_path, settings_file, draws_file):
    out = tmp_path / "wide"
    arguments = ["fit", str(draws_file), "--lambda-path", "1"]
    assert main(arguments + common_arguments(settings_file, out)) == EXIT_SUCCESS
    path = FitPath.from_json(out / "fitpath.json")
    assert path.k_values == [1, 2, 3]
    assert len(path.fits_for(3)) == 2


def test_invalid_quantile_exit_code(tmp_path, settings_file, draws_file):
    run = draws_file.parent
    arguments = common_arguments(settings_file, run)
    main(["fit", str(draws_file)] + arguments)
    exit_code = main(
        ["summarize", str(draws_file), str(run / "fitpath.json"), "--quantile", "1.5"]
        + arguments
    )
    assert exit_code == EXIT_CONFIG


def test_unknown_settings_exit_code(tmp_path):
    file_name = tmp_path / "bad.yml"
    file_name.write_text("sampler:\n  sweeps: 3\n", encoding="UTF-8")
    assert main(["simulate", "--config", str(file_name), "--quiet"]) == EXIT_CONFIG


def test_missing_full_model_exit_code(tmp_path, settings_file, draws_file):
    draws = read_draws(draws_file)
    path = fit_path(posterior_mean_cov(draws), PathConfig(k_range=[1, 2], path_length=1))
    path_file = tmp_path / "partial.json"
    path.to_json(path_file)
    exit_code = main(
        ["summarize", str(draws_file), str(path_file)]
        + common_arguments(settings_file, tmp_path / "partial")
    )
    assert exit_code == EXIT_NUMERICAL


def test_corrupt_draws_exit_code(tmp_path, settings_file):
    draws_file = tmp_path / "corrupt.bin"
    draws_file.write_bytes(b"XXXX" + bytes(40))
    exit_code = main(["fit", str(draws_file)] + common_arguments(settings_file, tmp_path))
    assert exit_code == EXIT_IO


def test_missing_data_exit_code(tmp_path, settings_file):
    exit_code = main(
        ["sample", str(tmp_path / "missing.csv")]
        + common_arguments(settings_file, tmp_path / "run")
    )
    assert exit_code == EXIT_IO


@pytest.mark.parametrize(
    "text",
    [
        '{"fits": [',
        '{"fits": [{"k_tilde": 1}], "k_values": [1]}',
        '{"k_values": [1, 2], "fits": []}',
    ],
)
def test_corrupt_fit_path_exit_code(tmp_path, settings_file, draws_file, text):
    path_file = tmp_path / "corrupt.json"
    path_file.write_text(text, encoding="UTF-8")
    exit_code = main(
        ["summarize", str(draws_file), str(path_file)]
        + common_arguments(settings_file, tmp_path / "corrupt")
    )
    assert exit_code == EXIT_IO


def test_bad_data_header_exit_code(tmp_path, settings_file):
    data_file = tmp_path / "data.csv"
    data_file.write_text("x,y\n1.0,2.0\n3.0,4.0\n", encoding="UTF-8")
    exit_code = main(
        ["sample", str(data_file)] + common_arguments(settings_file, tmp_path / "run")
    )
    assert exit_code == EXIT_IO


def test_sample_uses_replicate_chain_stream(
    tmp_path, settings_file, data_file, draws_file
):
    second = tmp_path / "copy" / "replicate_001" / "data.csv"
    second.parent.mkdir(parents=True)
    second.write_bytes(data_file.read_bytes())
    out = tmp_path / "second"
    assert main(["sample", str(second)] + common_arguments(settings_file, out)) == 0
    assert (out / "draws.bin").read_bytes() != draws_file.read_bytes()

    out = tmp_path / "forced"
    arguments = ["sample", str(second), "--replicate", "0"]
    assert main(arguments + common_arguments(settings_file, out)) == 0
    assert (out / "draws.bin").read_bytes() == draws_file.read_bytes()
