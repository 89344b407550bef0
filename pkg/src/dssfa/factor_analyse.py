"""
Command line front end of the decoupling shrinkage and selection pipeline.

Subcommands::

    dssfa simulate  --config run.yml --out data/
    dssfa sample    data/replicate_000/data.csv --out run/
    dssfa fit       run/draws.bin --out run/
    dssfa summarize run/draws.bin run/fitpath.json --quantile 0.95 --out run/
    dssfa bench     --config bench.yml --out bench/ --threads 4
    dssfa version

Exit codes: 0 success, 2 invalid settings or arguments, 3 numerical failure,
4 unreadable or invalid input files.
"""
import argparse
import logging
import re
import sys
from dataclasses import replace
from datetime import datetime
from pathlib import Path

from dssfa import __version__
from dssfa.bench import make_report, run_bench, write_report
from dssfa.covariance import posterior_mean_cov
from dssfa.datagen import Dataset, split_seed
from dssfa.exceptions import (
    ConfigError,
    DataFormatError,
    DimensionError,
    DrawsFormatError,
    FitPathFormatError,
    MissingFullModelError,
    NumericalError,
)
from dssfa.gibbs import read_draws, run_gibbs, write_draws
from dssfa.pfa import FitPath, fit_path
from dssfa.settings import RunConfig
from dssfa.summary import emit_summary, summarize
from dssfa.utils import matrix_digest, write_manifest, write_matrix_csv

logging.basicConfig(
    format="%(asctime)s %(filename)25s[%(lineno)4s] - %(levelname)-8s : %(message)s",
    level=logging.WARNING,
)
_logger = logging.getLogger()

EXIT_SUCCESS = 0
EXIT_CONFIG = 2
EXIT_NUMERICAL = 3
EXIT_IO = 4

DATA_FILE = "data.csv"
DRAWS_FILE = "draws.bin"
OMEGA_BAR_FILE = "omega_bar.csv"
FIT_PATH_FILE = "fitpath.json"
LOADINGS_DIRECTORY = "loadings"
REPLICATE_PATTERN = re.compile(r"replicate_(\d+)")


def parse_args(args=None):
    """Parse command line parameters

    Args:
      args ([str]): command line parameters as list of strings. None takes
        sys.argv

    Returns:
      :obj:`argparse.Namespace`: command line parameters namespace
    """
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="Yaml settings file")
    common.add_argument("--out", type=Path, help="Output directory")
    common.add_argument("--seed", type=int, help="Base seed of the random streams")
    common.add_argument("--quantile", type=float, help="Quantile of the full model loss")
    common.add_argument("--threads", type=int, help="Number of worker processes")
    common.add_argument("--k", type=int, help="Working dimension of the sampler")
    common.add_argument(
        "--lambda-path",
        dest="lambda_path",
        type=int,
        help="Number of nonzero penalties on the path",
    )
    common.add_argument(
        "--quiet",
        dest="loglevel",
        help="set loglevel to WARNING",
        action="store_const",
        const=logging.WARNING,
        default=logging.INFO,
    )
    common.add_argument(
        "--verbose",
        dest="loglevel",
        help="set loglevel to INFO",
        action="store_const",
        const=logging.INFO,
        default=logging.INFO,
    )
    common.add_argument(
        "--debug",
        dest="loglevel",
        help="set loglevel to DEBUG",
        action="store_const",
        const=logging.DEBUG,
    )
    common.add_argument(
        "--no_progress",
        action="store_true",
        help="Do not show progress bars",
    )

    parser = argparse.ArgumentParser(
        description="Sparse factor analysis of a Bayesian factor posterior"
    )
    parser.add_argument(
        "--version",
        action="version",
        version=f"dssfa version: {__version__}",
    )
    subparsers = parser.add_subparsers(dest="command", metavar="command")
    subparsers.required = True

    subparsers.add_parser(
        "simulate", parents=[common], help="Write synthetic data and its ground truth"
    )
    sample_parser = subparsers.add_parser(
        "sample", parents=[common], help="Sample the factor model posterior"
    )
    sample_parser.add_argument("data", type=Path, help="Data csv file")
    sample_parser.add_argument(
        "--replicate",
        type=int,
        help="Replicate whose chain stream is used when chain.seed is not set. "
        "Default: taken from a replicate_XXX directory of the data file, else 0",
    )
    sample_parser.add_argument(
        "--draws_file",
        default=DRAWS_FILE,
        help="Name of the draws file in the output directory. A .csv suffix "
        "writes the csv format",
    )
    fit_parser = subparsers.add_parser(
        "fit", parents=[common], help="Fit the penalized path to the posterior mean"
    )
    fit_parser.add_argument("draws", type=Path, help="Posterior draws file")
    summarize_parser = subparsers.add_parser(
        "summarize", parents=[common], help="Score the path and select a model"
    )
    summarize_parser.add_argument("draws", type=Path, help="Posterior draws file")
    summarize_parser.add_argument("fitpath", type=Path, help="Fit path json file")
    bench_parser = subparsers.add_parser(
        "bench", parents=[common], help="Run the simulation study"
    )
    bench_parser.add_argument(
        "--report_to_xls",
        action="store_true",
        help="Also write the report as Excel file",
    )
    subparsers.add_parser("version", parents=[common], help="Show the version")

    return parser.parse_args(args)


def load_config(args) -> RunConfig:
    return RunConfig.from_file(
        args.config,
        out=args.out,
        seed=args.seed,
        quantile=args.quantile,
        threads=args.threads,
        k=args.k,
        lambda_path=args.lambda_path,
    )


def replicate_seeds(config: RunConfig, replicate=0):
    """Truth, data and chain streams of one replicate"""
    return split_seed(config.generation.base_seed + replicate, 3)


def cmd_simulate(config: RunConfig):
    """Write data.csv and the ground truth of every replicate"""
    written = list()
    for replicate in range(config.generation.replicates):
        truth_seed, data_seed, _ = replicate_seeds(config, replicate)
        truth = config.generation.make_truth(seed=truth_seed)
        data = config.generation.simulate(truth, seed=data_seed)
        replicate_directory = config.output_directory / f"replicate_{replicate:03d}"
        file_names = truth.write(replicate_directory)
        data_file = replicate_directory / DATA_FILE
        data.to_csv(data_file)
        file_names.append(data_file)
        write_manifest(replicate_directory, file_names, config.digest)
        written.extend(file_names)
    return written


def data_replicate(data_file: Path) -> int:
    """Replicate index of a data file written by simulate, 0 for other files"""
    match = REPLICATE_PATTERN.fullmatch(Path(data_file).parent.name)
    return int(match.group(1)) if match else 0


def cmd_sample(
    config: RunConfig,
    data_file: Path,
    draws_file=DRAWS_FILE,
    show_progress=False,
    replicate=None,
):
    """Run the sampler on a data file and persist the retained draws"""
    data = Dataset.from_csv(data_file)
    chain = config.chain
    if chain.seed is None:
        if replicate is None:
            replicate = data_replicate(data_file)
        _, _, chain_seed = replicate_seeds(config, replicate)
        _logger.info(f"Using the chain stream of replicate {replicate}")
        chain = replace(chain, seed=chain_seed)
    draws = run_gibbs(data, config.prior, chain, show_progress=show_progress)
    config.output_directory.mkdir(exist_ok=True, parents=True)
    output_file = config.output_directory / draws_file
    write_draws(draws, output_file)
    write_manifest(config.output_directory, [output_file], config.digest)
    return output_file


def cmd_fit(config: RunConfig, draws_file: Path, show_progress=False):
    """
    Fit the penalized path to the posterior mean covariance

    Dimensions above the working dimension of the draws are dropped from the
    range; the working dimension itself is always fitted.
    """
    draws = read_draws(draws_file)
    omega_bar = posterior_mean_cov(draws)
    k_range = [k_tilde for k_tilde in config.path.k_range if k_tilde <= draws.k]
    path_config = replace(config.path, k_range=sorted(set(k_range + [draws.k])))
    path = fit_path(omega_bar, path_config, show_progress=show_progress)

    output_directory = config.output_directory
    output_directory.mkdir(exist_ok=True, parents=True)
    omega_bar_file = output_directory / OMEGA_BAR_FILE
    write_matrix_csv(omega_bar, omega_bar_file)
    path_file = output_directory / FIT_PATH_FILE
    path.to_json(path_file, config_digest=config.digest)
    loadings_files = path.write_loadings(output_directory / LOADINGS_DIRECTORY)
    write_manifest(
        output_directory, [omega_bar_file, path_file] + loadings_files, config.digest
    )
    return path_file


def cmd_summarize(config: RunConfig, draws_file: Path, path_file: Path):
    """Loss grid, threshold and selection at the configured quantile"""
    draws = read_draws(draws_file)
    path = FitPath.from_json(path_file)
    digest = matrix_digest(posterior_mean_cov(draws))
    if digest != path.omega_bar_digest:
        _logger.warning(
            f"Fit path {path_file} was not fitted to the posterior mean of {draws_file}"
        )
    grid, threshold, selection = summarize(path, draws, config.quantile)
    file_names = emit_summary(
        grid, selection, config.output_directory, config_digest=config.digest
    )
    write_manifest(config.output_directory, file_names, config.digest)
    print(
        f"Selected k_tilde={selection.k_selected} at lambda index "
        f"{selection.lambda_index} (lambda={selection.lambda_selected:.6g}, "
        f"sparsity {selection.sparsity:.3f}, threshold {threshold:.6g})"
    )
    return selection


def cmd_bench(config: RunConfig, report_to_xls=False, show_progress=False):
    replicates_df = run_bench(config, show_progress=show_progress)
    report_df = make_report(replicates_df)
    file_names = write_report(
        report_df, replicates_df, config.output_directory, report_to_xls=report_to_xls
    )
    write_manifest(config.output_directory, file_names, config.digest)
    print(report_df.to_string(index=False))
    return report_df


def run_command(args):
    if args.command == "version":
        print(f"dssfa {__version__}")
        return

    config = load_config(args)
    show_progress = not args.no_progress and args.loglevel <= logging.INFO
    _logger.info(f"Resolved settings with digest {config.digest}")
    if args.command == "simulate":
        cmd_simulate(config)
    elif args.command == "sample":
        cmd_sample(
            config,
            args.data,
            args.draws_file,
            show_progress=show_progress,
            replicate=args.replicate,
        )
    elif args.command == "fit":
        cmd_fit(config, args.draws, show_progress=show_progress)
    elif args.command == "summarize":
        cmd_summarize(config, args.draws, args.fitpath)
    elif args.command == "bench":
        cmd_bench(config, report_to_xls=args.report_to_xls, show_progress=show_progress)


def main(args=None) -> int:
    """Run one subcommand and return its exit code"""
    args = parse_args(args)
    _logger.setLevel(args.loglevel)
    print("-" * 100)
    now = datetime.now()
    print(f"Starting dssfa {args.command} ({__version__}) at {now}")
    print("-" * 100)

    try:
        run_command(args)
    except (ConfigError, DimensionError) as err:
        _logger.error(f"Invalid settings: {err}")
        return EXIT_CONFIG
    except (NumericalError, MissingFullModelError) as err:
        _logger.error(f"Numerical failure: {err}")
        return EXIT_NUMERICAL
    except (DrawsFormatError, DataFormatError, FitPathFormatError, OSError) as err:
        _logger.error(f"Input/output failure: {err}")
        return EXIT_IO
    return EXIT_SUCCESS


def run():
    """Entry point of the console script"""
    sys.exit(main(sys.argv[1:]))


if __name__ == "__main__":
    run()
