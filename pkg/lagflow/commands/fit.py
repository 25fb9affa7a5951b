import argparse
import math
import os

from dataclasses import dataclass
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from scipy.stats import linregress

from lagflow.errors import InvalidInputError
from lagflow.io_utils import read_csv, write_json
from lagflow.log import get_logger


logger = get_logger()

MODELS = ("power", "log_inverse")
MIN_FIT_POINTS = 3

# (scheme, metric, alpha, t)
SeriesKey = Tuple[str, str, float, float]


def register_arguments(parser: argparse.ArgumentParser):
    """Register command-line arguments for the fit command."""
    parser.add_argument("rundir", help="Run directory holding results.csv.")
    parser.add_argument("--output", "-o", default=None, help="Output file (default: <rundir>/fits.json).")
    parser.add_argument("--model", "-m", choices=MODELS + ("both",), default="both",
                        help="Rate model to fit: C*h^beta (power), C*|log h|^-q (log_inverse) or both.")
    parser.add_argument("--debug", action="store_true", default=False, help="Show debug output on the console.")


@dataclass(frozen=True)
class RateFit:
    """err ~ C h^exponent (power) or err ~ C |log h|^(-exponent) (log_inverse)."""
    model: str
    C: float
    exponent: float
    exponent_stderr: float
    residual_rms: float
    points: Tuple[Tuple[float, float], ...]

    def evaluate(self, h) -> np.ndarray:
        h = np.asarray(h, dtype=float)
        if self.model == "power":
            return self.C * h ** self.exponent
        return self.C * np.abs(np.log(h)) ** (-self.exponent)

    def to_json(self) -> Dict[str, Any]:
        return {
            "model": self.model,
            "C": self.C,
            "exponent": self.exponent,
            "exponent_stderr": self.exponent_stderr,
            "residual_rms": self.residual_rms,
            "points": [list(p) for p in self.points],
        }


def _usable(h: Sequence[float], err: Sequence[float]) -> Tuple[np.ndarray, np.ndarray]:
    h = np.asarray(h, dtype=float)
    err = np.asarray(err, dtype=float)
    if h.shape != err.shape:
        raise InvalidInputError(f"{h.size} step sizes against {err.size} errors.")
    keep = np.isfinite(h) & np.isfinite(err) & (h > 0.0) & (h < 1.0) & (err > 0.0)
    if np.count_nonzero(keep) < MIN_FIT_POINTS:
        raise InvalidInputError(f"A rate fit needs at least {MIN_FIT_POINTS} points with 0 < h < 1 and err > 0, "
                                f"got {np.count_nonzero(keep)}.")
    if np.unique(h[keep]).size < 2:
        raise InvalidInputError("A rate fit needs at least two distinct step sizes.")
    return h[keep], err[keep]


def _fit(model: str, x: np.ndarray, h: np.ndarray, err: np.ndarray) -> RateFit:
    y = np.log(err)
    line = linregress(x, y)
    residuals = y - (line.intercept + line.slope * x)
    exponent = line.slope if model == "power" else -line.slope
    return RateFit(model=model, C=float(math.exp(line.intercept)), exponent=float(exponent),
                   exponent_stderr=float(line.stderr), residual_rms=float(np.sqrt(np.mean(residuals ** 2))),
                   points=tuple((float(a), float(b)) for a, b in zip(h, err)))


def fit_power(h: Sequence[float], err: Sequence[float]) -> RateFit:
    """Least squares of log(err) against log(h)."""
    h, err = _usable(h, err)
    return _fit("power", np.log(h), h, err)


def fit_log_inverse(h: Sequence[float], err: Sequence[float]) -> RateFit:
    """Least squares of log(err) against log|log h|."""
    h, err = _usable(h, err)
    return _fit("log_inverse", np.log(np.abs(np.log(h))), h, err)


def is_monotone(h: Sequence[float], err: Sequence[float]) -> bool:
    """True when the error never grows as h shrinks."""
    order = np.argsort(h)
    return bool(np.all(np.diff(np.asarray(err, dtype=float)[order]) >= 0.0))


@dataclass(frozen=True)
class SeriesFit:
    key: SeriesKey
    fits: Dict[str, RateFit]
    best: str
    low_confidence: bool

    def to_json(self) -> Dict[str, Any]:
        scheme, metric, alpha, t = self.key
        return {
            "scheme": scheme,
            "metric": metric,
            "alpha": None if math.isnan(alpha) else alpha,
            "t": t,
            "best": self.best,
            "low_confidence": self.low_confidence,
            "fits": {name: fit.to_json() for name, fit in self.fits.items()},
        }


def load_series(results_path: str) -> Dict[SeriesKey, List[Tuple[float, float, float, int]]]:
    """Rows of results.csv grouped by (scheme, metric, alpha, t): (h, mean_err, var_err, n_reps), in file order."""
    if not os.path.exists(results_path):
        raise FileNotFoundError(f"No results file at {results_path}")
    header, rows = read_csv(results_path)
    try:
        col = {name: header.index(name) for name in ("scheme", "metric", "alpha", "h", "t", "mean_err", "var_err",
                                                      "n_reps")}
    except ValueError as e:
        raise InvalidInputError(f"{results_path} lacks a results column: {e}")

    series: Dict[SeriesKey, List[Tuple[float, float, float, int]]] = {}
    for row in rows:
        key = (row[col["scheme"]], row[col["metric"]], float(row[col["alpha"]]), float(row[col["t"]]))
        series.setdefault(key, []).append((float(row[col["h"]]), float(row[col["mean_err"]]),
                                           float(row[col["var_err"]]), int(row[col["n_reps"]])))
    return series


_FITTERS = {"power": fit_power, "log_inverse": fit_log_inverse}


def resolve_models(model: str = "both") -> Tuple[str, ...]:
    """`power`, `log_inverse` or `both`."""
    if model == "both":
        return MODELS
    if model not in MODELS:
        raise InvalidInputError(f"Unknown rate model '{model}', expected one of {MODELS + ('both',)}.")
    return (model,)


def fit_series(key: SeriesKey, h: Sequence[float], err: Sequence[float], models: Sequence[str] = MODELS) -> SeriesFit:
    if not models:
        raise InvalidInputError("At least one rate model is needed.")
    fits = {name: _FITTERS[name](h, err) for name in models}
    best = min(fits, key=lambda name: fits[name].residual_rms)
    low_confidence = not is_monotone(h, err)
    if low_confidence:
        logger.warning(f"Errors of {key} are not monotone in h; fits flagged low-confidence")
    return SeriesFit(key=key, fits=fits, best=best, low_confidence=low_confidence)


def fit_rates(rundir: str, models: Sequence[str] = MODELS) -> List[SeriesFit]:
    """The requested rate models for every (scheme, metric, alpha, t) series of a run; series too short to fit are
    skipped.
    """
    models = tuple(models)
    unknown = [name for name in models if name not in MODELS]
    if unknown or not models:
        raise InvalidInputError(f"Unknown rate models {unknown}, expected some of {MODELS}.")
    series = load_series(os.path.join(rundir, "results.csv"))
    result = []
    for key, points in series.items():
        h = [p[0] for p in points]
        err = [p[1] for p in points]
        try:
            result.append(fit_series(key, h, err, models))
        except InvalidInputError as e:
            logger.info(f"Series {key} not fitted: {e}")
    return result


def fits_by_key(fits: Sequence[SeriesFit]) -> Dict[SeriesKey, SeriesFit]:
    return {fit.key: fit for fit in fits}


def find_fit(fits: Dict[SeriesKey, SeriesFit], key: SeriesKey) -> Optional[SeriesFit]:
    """Lookup that treats NaN alphas as equal."""
    if key in fits:
        return fits[key]
    scheme, metric, alpha, t = key
    for (s, m, a, tt), fit in fits.items():
        if s == scheme and m == metric and tt == t and (a == alpha or (math.isnan(a) and math.isnan(alpha))):
            return fit
    return None


def fit_cli(args: argparse.Namespace) -> int:
    """Fit convergence rates of a run directory through CLI arguments."""
    try:
        fits = fit_rates(args.rundir, resolve_models(getattr(args, "model", "both")))
    except (FileNotFoundError, InvalidInputError) as e:
        logger.error(str(e))
        return 2

    output = args.output or os.path.join(args.rundir, "fits.json")
    write_json(output, {"series": [fit.to_json() for fit in fits]})
    for fit in fits:
        scheme, metric, alpha, t = fit.key
        flag = " (low confidence)" if fit.low_confidence else ""
        parts = [f"{name} {'beta' if name == 'power' else 'q'}={rate.exponent:.3f}+-{rate.exponent_stderr:.3f} "
                 f"(rms {rate.residual_rms:.3g})" for name, rate in fit.fits.items()]
        logger.info(f"{scheme}/{metric} t={t:g}: {', '.join(parts)}, best {fit.best}{flag}")
    logger.info(f"{len(fits)} fits written to {output}")
    return 0
