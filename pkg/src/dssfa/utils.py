import codecs
import hashlib
import json
import logging
import sys
from pathlib import Path

import numpy as np
import pandas as pd
import yaml
from tqdm import tqdm

from dssfa import __version__

_logger = logging.getLogger(__name__)

# 17 significant digits reproduce every float64 exactly
FLOAT_FORMAT = "%.17g"


def make_progress_bar(total, description, show_progress=False):
    """Return a tqdm progress bar or None if we do not show progress"""
    if not show_progress:
        return None
    progress_bar = tqdm(
        total=total,
        file=sys.stdout,
        position=0,
        ncols=100,
        leave=True,
        colour="GREEN",
    )
    progress_bar.set_description("{:10s}".format(description))
    return progress_bar


def matrix_digest(matrix) -> str:
    """sha256 of the little-endian float64 bytes of a matrix"""
    data = np.ascontiguousarray(matrix, dtype="<f8")
    digest = hashlib.sha256()
    digest.update(np.asarray(data.shape, dtype="<u8").tobytes())
    digest.update(data.tobytes())
    return digest.hexdigest()


def dict_digest(settings: dict) -> str:
    """sha256 of the canonical json representation of a settings tree"""
    canonical = json.dumps(settings, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("UTF-8")).hexdigest()


def write_matrix_csv(matrix, file_name: Path, column_prefix="c"):
    """
    Write a matrix or vector as headered csv with round trip exact decimals

    Args:
        matrix: 1D or 2D array. A vector is written as a single column
        file_name: output file
        column_prefix: prefix of the column names, numbered from 1
    """
    matrix = np.asarray(matrix, dtype=np.float64)
    if matrix.ndim == 1:
        matrix = matrix[:, np.newaxis]
    columns = [f"{column_prefix}{index + 1}" for index in range(matrix.shape[1])]
    data_df = pd.DataFrame(matrix, columns=columns)
    _logger.debug(f"Writing {matrix.shape} matrix to {file_name}")
    data_df.to_csv(file_name, index=False, float_format=FLOAT_FORMAT)


def read_matrix_csv(file_name: Path, squeeze=False) -> np.ndarray:
    """Read a matrix written by :func:`write_matrix_csv`"""
    file_name = Path(file_name)
    if not file_name.exists():
        raise FileNotFoundError(f"Matrix file not found {file_name.absolute()}")
    data_df = pd.read_csv(file_name, dtype=np.float64, float_precision="round_trip")
    matrix = data_df.to_numpy()
    if squeeze and matrix.shape[1] == 1:
        matrix = matrix[:, 0]
    return matrix


def write_manifest(output_directory: Path, file_names, config_digest: str):
    """
    Declare the config digest that produced the files in an output directory

    An existing manifest is extended, so several commands can write into the
    same directory.
    """
    output_directory = Path(output_directory)
    manifest_file = output_directory / "manifest.yml"
    manifest = dict()
    if manifest_file.exists():
        with codecs.open(manifest_file.as_posix(), "r", encoding="UTF-8") as stream:
            manifest = yaml.load(stream=stream, Loader=yaml.SafeLoader) or dict()
    files = manifest.get("files", dict())
    for file_name in file_names:
        relative = Path(file_name).relative_to(output_directory).as_posix()
        files[relative] = dict(config_digest=config_digest, version=__version__)
    manifest["files"] = files
    _logger.debug(f"Writing manifest {manifest_file}")
    with codecs.open(manifest_file.as_posix(), "w", encoding="UTF-8") as stream:
        yaml.dump(data=manifest, stream=stream, Dumper=yaml.SafeDumper)
    return manifest_file
