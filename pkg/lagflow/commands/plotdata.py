import argparse
import json
import math
import os

from typing import Dict, List, Tuple

from lagflow.commands.fit import SeriesKey, find_fit, fits_by_key, fit_rates, load_series
from lagflow.errors import InvalidInputError
from lagflow.log import get_logger


logger = get_logger()

DAT_COLUMNS = ("h", "mean_err", "stderr", "fit_power", "fit_log_inverse")


def register_arguments(parser: argparse.ArgumentParser):
    """Register command-line arguments for the plotdata command."""
    parser.add_argument("rundir", help="Run directory holding results.csv.")
    parser.add_argument("--output-dir", "-o", default=None, help="Where the .dat files go (default: <rundir>/plotdata).")
    parser.add_argument("--debug", action="store_true", default=False, help="Show debug output on the console.")


def _read_summary(rundir: str) -> Dict:
    path = os.path.join(rundir, "summary.json")
    if not os.path.exists(path):
        return {}
    with open(path, "r") as f:
        return json.load(f)


def _header(scheme: str, metric: str) -> List[str]:
    return [f"# lagflow plot data: scheme={scheme} metric={metric}",
            "# one block per sample time, blocks separated by two blank lines (gnuplot index)",
            "# " + " ".join(DAT_COLUMNS)]


def _stderr(var_err: float, n_reps: int, mean_of_n: bool) -> float:
    """Standard error of mean_err; for mean_of_n runs var_err is already the variance of the mean."""
    if mean_of_n:
        return math.sqrt(var_err)
    return math.sqrt(var_err / n_reps) if n_reps > 0 else math.nan


def emit_plotdata(rundir: str, output_dir: str = None) -> List[str]:
    """One gnuplot .dat file per (scheme, metric), with the fitted curves sampled at each h."""
    series = load_series(os.path.join(rundir, "results.csv"))
    summary = _read_summary(rundir)
    config = summary.get("config", {})
    mean_of_n = config.get("aggregate") == "mean_of_n"
    fits = fits_by_key(fit_rates(rundir))

    out_dir = output_dir or os.path.join(rundir, "plotdata")
    os.makedirs(out_dir, exist_ok=True)

    files: Dict[Tuple[str, str], List[SeriesKey]] = {}
    for key in series:
        files.setdefault((key[0], key[1]), []).append(key)

    if not files:
        if config:
            name = f"{config.get('scheme', 'results')}_{config.get('metric', {}).get('kind', 'w1')}.dat"
            scheme, metric = config.get("scheme", ""), config.get("metric", {}).get("kind", "")
        else:
            name, scheme, metric = "results.dat", "", ""
        path = os.path.join(out_dir, name)
        with open(path, "w") as f:
            f.write("\n".join(_header(scheme, metric)) + "\n")
        logger.info(f"No results rows; wrote header-only {path}")
        return [path]

    written = []
    for (scheme, metric), keys in files.items():
        path = os.path.join(out_dir, f"{scheme}_{metric}.dat")
        lines = _header(scheme, metric)
        for block, key in enumerate(sorted(keys, key=lambda k: (k[3], k[2]))):
            if block > 0:
                lines += ["", ""]
            alpha = "" if math.isnan(key[2]) else f" alpha={key[2]!r}"
            lines.append(f"# t={key[3]!r}{alpha}")
            fit = find_fit(fits, key)
            for h, mean_err, var_err, n_reps in sorted(series[key], key=lambda p: -p[0]):
                power = float(fit.fits["power"].evaluate(h)) if fit else math.nan
                log_inverse = float(fit.fits["log_inverse"].evaluate(h)) if fit else math.nan
                values = (h, mean_err, _stderr(var_err, n_reps, mean_of_n), power, log_inverse)
                lines.append(" ".join(repr(float(v)) for v in values))
        with open(path, "w") as f:
            f.write("\n".join(lines) + "\n")
        written.append(path)
        logger.info(f"Plot data written to {path}")
    return written


def plotdata_cli(args: argparse.Namespace) -> int:
    """Write gnuplot data of a run directory through CLI arguments."""
    try:
        emit_plotdata(args.rundir, args.output_dir)
    except (FileNotFoundError, InvalidInputError) as e:
        logger.error(str(e))
        return 2
    return 0
