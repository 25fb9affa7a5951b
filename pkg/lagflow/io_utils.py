import csv
import json
import os
import struct

from typing import Any, Dict, Iterable, List, Sequence, Tuple

import numpy as np

from lagflow.errors import InvalidInputError
from lagflow.log import get_logger


logger = get_logger()

GRID_MAGIC = b"LAGF1"


def read_grid_samples(path: str) -> Tuple[np.ndarray, float]:
    """
    Read a LAGF1 grid-field file.
    Header: magic, then d, N_x per axis, N_t (int64) and T (float64), all little-endian.
    Body: float64 samples, row-major, time-major, shape (N_t, N_1..N_d, d).
    """
    with open(path, "rb") as f:
        blob = f.read()

    if not blob.startswith(GRID_MAGIC):
        raise InvalidInputError(f"{path} is not a LAGF1 grid file.")
    offset = len(GRID_MAGIC)
    try:
        (dim,) = struct.unpack_from("<q", blob, offset)
        offset += 8
        if not 1 <= dim <= 3:
            raise InvalidInputError(f"{path}: unsupported dimension {dim}.")
        resolution = struct.unpack_from(f"<{dim}q", blob, offset)
        offset += 8 * dim
        (n_t,) = struct.unpack_from("<q", blob, offset)
        offset += 8
        (horizon,) = struct.unpack_from("<d", blob, offset)
        offset += 8
    except struct.error as e:
        raise InvalidInputError(f"{path}: truncated header ({e}).")

    shape = (n_t,) + tuple(resolution) + (dim,)
    expected = int(np.prod(shape)) * 8
    if len(blob) - offset != expected:
        raise InvalidInputError(f"{path}: expected {expected} bytes of samples, found {len(blob) - offset}.")
    samples = np.frombuffer(blob, dtype="<f8", offset=offset).reshape(shape).astype(float)
    return samples, float(horizon)


def write_grid_samples(path: str, samples: np.ndarray, horizon: float):
    """Write samples of shape (N_t, N_1..N_d, d) in the LAGF1 layout."""
    samples = np.ascontiguousarray(samples, dtype="<f8")
    dim = samples.shape[-1]
    resolution = samples.shape[1:-1]
    header = GRID_MAGIC + struct.pack(f"<q{dim}qqd", dim, *resolution, samples.shape[0], float(horizon))
    with open(path, "wb") as f:
        f.write(header)
        f.write(samples.tobytes(order="C"))
    logger.debug(f"Grid samples {samples.shape} written to {path}")


def _format(value: Any) -> str:
    """Format numbers with repr so reruns produce identical files."""
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    if isinstance(value, (np.integer,)):
        return str(int(value))
    return str(value)


def write_csv(path: str, header: Sequence[str], rows: Iterable[Sequence[Any]]):
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(header)
        for row in rows:
            writer.writerow([_format(v) for v in row])


def read_csv(path: str) -> Tuple[List[str], List[List[str]]]:
    if not os.path.exists(path):
        raise FileNotFoundError(f"CSV file not found: {path}")
    with open(path, "r", newline="") as f:
        reader = csv.reader(f)
        try:
            header = next(reader)
        except StopIteration:
            return [], []
        return header, [row for row in reader if row]


def coordinate_header(dim: int) -> List[str]:
    return [f"x_{k + 1}" for k in range(dim)]


def write_json(path: str, payload: Dict[str, Any]):
    with open(path, "w") as f:
        json.dump(payload, f, indent=2, sort_keys=True, default=_json_default)
        f.write("\n")


def _json_default(value: Any):
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, (np.floating,)):
        return float(value)
    if isinstance(value, (np.integer,)):
        return int(value)
    if isinstance(value, (np.bool_,)):
        return bool(value)
    raise TypeError(f"Object of type {type(value).__name__} is not JSON serializable")


def ensure_dir(path: str) -> str:
    os.makedirs(path, exist_ok=True)
    return path
