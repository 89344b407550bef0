from pathlib import Path

import pytest

from dssfa.exceptions import ConfigError
from dssfa.settings import (
    DEFAULT_SETTINGS,
    GenerationConfig,
    RunConfig,
    merge_settings,
    read_settings_file,
)


def write_yaml(tmp_path, text, name="settings.yml"):
    file_name = tmp_path / name
    file_name.write_text(text, encoding="UTF-8")
    return file_name


def test_defaults():
    config = RunConfig.from_file()
    assert config.output_directory == Path("output")
    assert config.generation.truth == "harman"
    assert config.generation.n == 100
    assert config.prior.family == "unconstrained"
    assert config.chain.k == 5
    assert config.chain.iterations == 10000
    assert config.chain.burnin == 5000
    assert config.path.k_range == [1, 2, 3, 4, 5]
    assert config.path.path_length == 10
    assert config.quantile == 0.95
    assert config.bench.quantiles == [0.95, 0.99]
    assert config.n_processes >= 1


def test_digest_is_stable_and_sensitive():
    first = RunConfig.from_file()
    second = RunConfig.from_file()
    assert first.digest == second.digest
    assert RunConfig.from_file(quantile=0.99).digest != first.digest


def test_settings_file_is_merged(tmp_path):
    file_name = write_yaml(
        tmp_path,
        "generation:\n"
        "  n: 250\n"
        "sampler:\n"
        "  chain:\n"
        "    k: 4\n"
        "    iterations: 400\n"
        "    burnin: 100\n"
        "path:\n"
        "  k_range: [1, 2, 3, 4]\n",
    )
    config = RunConfig.from_file(file_name)
    assert config.generation.n == 250
    assert config.generation.sigma == 0.5
    assert config.chain.k == 4
    assert config.chain.thin == 1
    assert config.path.k_range == [1, 2, 3, 4]
    assert config.path.tol == 1e-8


def test_overrides_win_over_file(tmp_path):
    file_name = write_yaml(tmp_path, "summary:\n  quantile: 0.9\n")
    config = RunConfig.from_file(
        file_name, quantile=0.99, out=tmp_path / "run", seed=12, k=3, lambda_path=4
    )
    assert config.quantile == 0.99
    assert config.output_directory == tmp_path / "run"
    assert config.generation.base_seed == 12
    assert config.chain.k == 3
    assert config.path.path_length == 4
    assert RunConfig.from_file(file_name, quantile=None).quantile == 0.9


def test_threads_set_the_processes():
    config = RunConfig.from_file(threads=3)
    assert config.n_processes == 3
    assert config.path.processes == 3


def test_unknown_field(tmp_path):
    file_name = write_yaml(tmp_path, "sampler:\n  chain:\n    sweeps: 10\n")
    with pytest.raises(ConfigError, match="sampler.chain.sweeps"):
        RunConfig.from_file(file_name)


def test_unknown_override():
    with pytest.raises(ConfigError):
        RunConfig.from_file(iterations=10)


def test_section_must_be_mapping():
    with pytest.raises(ConfigError, match="path"):
        merge_settings(DEFAULT_SETTINGS, dict(path=[1, 2]))


def test_invalid_yaml(tmp_path):
    file_name = write_yaml(tmp_path, "generation: [n: 1\n")
    with pytest.raises(ConfigError, match="yaml"):
        read_settings_file(file_name)
    file_name = write_yaml(tmp_path, "- 1\n- 2\n", name="list.yml")
    with pytest.raises(ConfigError, match="mapping"):
        read_settings_file(file_name)


def test_empty_settings_file(tmp_path):
    file_name = write_yaml(tmp_path, "")
    assert RunConfig.from_file(file_name).digest == RunConfig.from_file().digest


def test_missing_settings_file(tmp_path):
    with pytest.raises(FileNotFoundError):
        RunConfig.from_file(tmp_path / "missing.yml")


@pytest.mark.parametrize("quantile", [0.0, 1.0, 1.2])
def test_invalid_quantile(quantile):
    with pytest.raises(ConfigError, match="quantile"):
        RunConfig.from_file(quantile=quantile)


@pytest.mark.parametrize(
    "fields, name",
    [
        (dict(dist="cauchy"), "dist"),
        (dict(dist="t", nu=2.0), "nu"),
        (dict(truth="wishart"), "truth"),
        (dict(truth="random", p=4, k0=5), "k0"),
        (dict(n=1), "n"),
    ],
)
def test_invalid_generation(fields, name):
    with pytest.raises(ConfigError, match=name):
        GenerationConfig(**fields)


def test_invalid_bench_scenarios(tmp_path):
    file_name = write_yaml(
        tmp_path,
        "bench:\n  scenarios:\n    - {name: a, sigma: 0.2}\n    - {name: a, sigma: 0.5}\n",
    )
    with pytest.raises(ConfigError, match="unique"):
        RunConfig.from_file(file_name)


@pytest.mark.parametrize(
    "scenario, message",
    [
        ("{name: a, sigmaa: 0.2}", "sigmaa"),
        ("{name: a, family: lower}", "family"),
    ],
)
def test_invalid_bench_scenario_fields(tmp_path, scenario, message):
    file_name = write_yaml(tmp_path, f"bench:\n  scenarios:\n    - {scenario}\n")
    with pytest.raises(ConfigError, match=message):
        RunConfig.from_file(file_name)


def test_invalid_chain_in_file(tmp_path):
    file_name = write_yaml(tmp_path, "sampler:\n  chain:\n    burnin: 20000\n")
    with pytest.raises(ConfigError, match="burnin"):
        RunConfig.from_file(file_name)


def test_harman_truth_ignores_dimensions():
    generation = GenerationConfig(p=30, k0=7)
    truth = generation.make_truth(seed=1)
    assert truth.p == 8
    assert truth.k0 == 2


def test_random_truth_from_generation():
    generation = GenerationConfig(truth="random", p=10, k0=3, sigma=0.2, n=40)
    truth = generation.make_truth(seed=3)
    data = generation.simulate(truth, seed=4)
    assert truth.p == 10
    assert data.rows.shape == (40, 10)
