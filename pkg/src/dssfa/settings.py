"""
Run settings: a yaml settings file merged over built-in defaults.

The defaults reproduce the toy example: Harman's eight physical variables,
n = 100 normal observations, a k = 5 unconstrained chain of 10000 sweeps of
which 5000 are burnin, a path of 10 nonzero penalties and the 95% quantile.

Layout of the settings file (every key is optional)::

    general:
      output_directory: output
      threads: null            # null: number of physical cores
    generation:
      truth: harman            # harman or random
      p: 15                    # only used for the random truth
      k0: 3
      n: 100
      sigma: 0.5
      dist: normal             # normal or t
      nu: 10
      replicates: 1
      base_seed: 0
    sampler:
      prior: {family: unconstrained, loading_shape: 1.0, ...}
      chain: {k: 5, iterations: 10000, burnin: 5000, thin: 1, seed: null}
    path: {k_range: [1, 2, 3, 4, 5], path_length: 10, tol: 1.0e-8, ...}
    summary:
      quantile: 0.95
    bench:
      replicates: 30
      quantiles: [0.95, 0.99]
      iterations: 6000
      burnin: 3000
      scenarios:
        - {name: normal_s02, sigma: 0.2}
"""
import codecs
import copy
import logging
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import List

import psutil
import yaml

from dssfa.datagen import (
    Dataset,
    GroundTruth,
    harman_toy_truth,
    random_truth,
    simulate_normal,
    simulate_t,
)
from dssfa.exceptions import ConfigError
from dssfa.gibbs import PRIOR_FAMILIES, ChainConfig, PriorConfig
from dssfa.pfa import PathConfig
from dssfa.utils import dict_digest

_logger = logging.getLogger(__name__)

TRUTHS = ("harman", "random")
DISTRIBUTIONS = ("normal", "t")


@dataclass
class GenerationConfig:
    """
    How synthetic data is generated

    For the harman truth p = 8 and k0 = 2 are fixed and the p, k0 and sigma
    fields are not used.
    """

    truth: str = "harman"
    p: int = 15
    k0: int = 3
    n: int = 100
    sigma: float = 0.5
    dist: str = "normal"
    nu: float = 10.0
    replicates: int = 1
    base_seed: int = 0

    def __post_init__(self):
        if self.truth not in TRUTHS:
            raise ConfigError(f"generation.truth must be one of {TRUTHS}. Got {self.truth!r}")
        if self.dist not in DISTRIBUTIONS:
            raise ConfigError(
                f"generation.dist must be one of {DISTRIBUTIONS}. Got {self.dist!r}"
            )
        if self.n < 2:
            raise ConfigError(f"generation.n must be at least 2. Got {self.n}")
        if self.replicates < 1:
            raise ConfigError(f"generation.replicates must be >= 1. Got {self.replicates}")
        if self.truth == "random":
            if not 1 <= self.k0 <= self.p:
                raise ConfigError(
                    f"generation.k0 must lie in [1, p={self.p}]. Got {self.k0}"
                )
            if not self.sigma > 0:
                raise ConfigError(f"generation.sigma must be positive. Got {self.sigma}")
        if self.dist == "t" and not self.nu > 2:
            raise ConfigError(f"generation.nu must exceed 2. Got {self.nu}")

    def make_truth(self, seed=None) -> GroundTruth:
        if self.truth == "harman":
            return harman_toy_truth()
        return random_truth(self.p, self.k0, self.sigma, seed=seed)

    def simulate(self, truth: GroundTruth, seed=None) -> Dataset:
        if self.dist == "t":
            return simulate_t(truth, self.n, self.nu, seed=seed)
        return simulate_normal(truth, self.n, seed=seed)


@dataclass
class BenchConfig:
    """
    Simulation study: every scenario overrides the generation settings and
    optionally the prior family; all scenarios use a random truth
    """

    replicates: int = 30
    quantiles: List[float] = field(default_factory=lambda: [0.95, 0.99])
    iterations: int = 6000
    burnin: int = 3000
    scenarios: List[dict] = field(default_factory=list)

    def __post_init__(self):
        if self.replicates < 1:
            raise ConfigError(f"bench.replicates must be >= 1. Got {self.replicates}")
        for quantile in self.quantiles:
            check_quantile(quantile, "bench.quantiles")
        if not self.scenarios:
            raise ConfigError("bench.scenarios may not be empty")
        names = [scenario.get("name") for scenario in self.scenarios]
        if None in names or len(set(names)) != len(names):
            raise ConfigError(f"bench.scenarios need unique names. Got {names}")
        allowed = {item.name for item in fields(GenerationConfig)} | {"name", "family"}
        for scenario in self.scenarios:
            unknown = sorted(set(scenario) - allowed)
            if unknown:
                raise ConfigError(
                    f"bench.scenarios[{scenario['name']}]: unknown fields {unknown}. "
                    f"Allowed: {sorted(allowed)}"
                )
            family = scenario.get("family", PRIOR_FAMILIES[0])
            if family not in PRIOR_FAMILIES:
                raise ConfigError(
                    f"bench.scenarios[{scenario['name']}]: family must be one of "
                    f"{PRIOR_FAMILIES}. Got {family!r}"
                )


DEFAULT_SCENARIOS = [
    dict(name="normal_s02", sigma=0.2),
    dict(name="normal_s05", sigma=0.5),
    dict(name="t10_s05", sigma=0.5, dist="t", nu=10),
    dict(name="t3_s05", sigma=0.5, dist="t", nu=3),
]

DEFAULT_SETTINGS = dict(
    general=dict(output_directory="output", threads=None),
    generation=asdict(GenerationConfig()),
    sampler=dict(prior=asdict(PriorConfig()), chain=asdict(ChainConfig())),
    path={
        key: value for key, value in asdict(PathConfig()).items() if key != "processes"
    },
    summary=dict(quantile=0.95),
    bench=dict(
        replicates=30,
        quantiles=[0.95, 0.99],
        iterations=6000,
        burnin=3000,
        scenarios=DEFAULT_SCENARIOS,
    ),
)

# command line flag -> position in the settings tree
OVERRIDES = dict(
    out=("general", "output_directory"),
    threads=("general", "threads"),
    seed=("generation", "base_seed"),
    quantile=("summary", "quantile"),
    k=("sampler", "chain", "k"),
    lambda_path=("path", "path_length"),
)


def check_quantile(quantile, name):
    if not 0 < quantile < 1:
        raise ConfigError(f"{name} must lie in (0, 1). Got {quantile}")


def read_settings_file(file_name: Path) -> dict:
    file_name = Path(file_name)
    if not file_name.exists():
        raise FileNotFoundError(f"Settings file not found {file_name.absolute()}")
    _logger.info(f"Reading settings file {file_name}")
    with codecs.open(file_name.as_posix(), "r", encoding="UTF-8") as stream:
        try:
            settings = yaml.load(stream=stream, Loader=yaml.SafeLoader)
        except yaml.YAMLError as err:
            raise ConfigError(f"Settings file {file_name} is not valid yaml: {err}") from err
    if settings is None:
        settings = dict()
    if not isinstance(settings, dict):
        raise ConfigError(f"Settings file {file_name} must contain a mapping")
    return settings


def merge_settings(defaults: dict, settings: dict, prefix="") -> dict:
    """Recursively overwrite ``defaults`` by ``settings``; unknown keys are an error"""
    merged = copy.deepcopy(defaults)
    for key, value in settings.items():
        name = f"{prefix}{key}"
        if key not in defaults:
            raise ConfigError(f"Unknown settings field {name}")
        if isinstance(defaults[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"Settings field {name} must be a mapping")
            merged[key] = merge_settings(defaults[key], value, prefix=f"{name}.")
        else:
            merged[key] = value
    return merged


def build_config(section, settings: dict, name: str):
    try:
        return section(**settings)
    except TypeError as err:
        raise ConfigError(f"Invalid fields in {name}: {err}") from err


@dataclass
class RunConfig:
    """Resolved and validated settings of one run"""

    settings: dict = field(default_factory=lambda: copy.deepcopy(DEFAULT_SETTINGS))

    def __post_init__(self):
        general = self.settings["general"]
        self.output_directory = Path(general["output_directory"])
        self.threads = general["threads"]
        if self.threads is not None and self.threads < 1:
            raise ConfigError(f"general.threads must be >= 1. Got {self.threads}")

        self.generation = build_config(
            GenerationConfig, self.settings["generation"], "generation"
        )
        self.prior = build_config(PriorConfig, self.settings["sampler"]["prior"], "sampler.prior")
        self.chain = build_config(ChainConfig, self.settings["sampler"]["chain"], "sampler.chain")
        self.path = build_config(
            PathConfig, dict(self.settings["path"], processes=self.n_processes), "path"
        )
        self.quantile = self.settings["summary"]["quantile"]
        check_quantile(self.quantile, "summary.quantile")
        self.bench = build_config(BenchConfig, self.settings["bench"], "bench")
        self.digest = dict_digest(self.settings)

    @property
    def n_processes(self) -> int:
        if self.threads is not None:
            return self.threads
        return psutil.cpu_count(logical=False) or 1

    @classmethod
    def from_file(cls, file_name: Path = None, **overrides):
        """
        Defaults, overwritten by the settings file, overwritten by the flags

        Args:
            file_name: yaml settings file. If None, only the defaults are used
            **overrides: command line values keyed as in OVERRIDES. None means
                not given
        """
        settings = copy.deepcopy(DEFAULT_SETTINGS)
        if file_name is not None:
            settings = merge_settings(settings, read_settings_file(file_name))
        for key, value in overrides.items():
            if key not in OVERRIDES:
                raise ConfigError(f"Unknown override {key}")
            if value is None:
                continue
            branch = settings
            *parents, leaf = OVERRIDES[key]
            for parent in parents:
                branch = branch[parent]
            branch[leaf] = str(value) if isinstance(value, Path) else value
        return cls(settings=settings)
