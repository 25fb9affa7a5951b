"""Discrete measures on the torus and their Wasserstein distances (exact, entropic, splitting bound, dual check)."""
from dataclasses import dataclass, field as dataclass_field
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np
import ot

from lagflow.errors import CapacityError, ConvergenceError, InvalidInputError
from lagflow.io_utils import coordinate_header, read_csv, write_csv
from lagflow.log import get_logger
from lagflow.torus import TorusPoint, as_points, distance_matrix, max_distance, wrap_array


logger = get_logger()

METRIC_KINDS = ("euclidean_torus", "logarithmic")
EXACT_MAX_ATOMS = 5000
ENTROPIC_MAX_ATOMS = 8000
WEIGHT_FLOOR = 1e-14
MASS_TOLERANCE = 1e-8
MARGINAL_TOLERANCE = 1e-6


@dataclass(frozen=True, eq=False)
class DiscreteMeasure:
    """Weighted atoms sum_k w_k delta_{x_k}; points are (n, d), weights (n,), both read-only."""
    points: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        points = wrap_array(np.array(as_points(self.points), dtype=float))
        weights = self.weights
        if not (isinstance(weights, np.ndarray) and weights.dtype == float and weights.ndim == 1
                and not weights.flags.writeable):
            weights = np.array(weights, dtype=float).reshape(-1)
        if len(weights) != len(points):
            raise InvalidInputError(f"{len(points)} atoms but {len(weights)} weights.")
        if not np.all(np.isfinite(weights)) or np.any(weights < 0.0):
            raise InvalidInputError("Measure weights must be finite and non-negative.")
        points.setflags(write=False)
        weights.setflags(write=False)
        object.__setattr__(self, "points", points)
        object.__setattr__(self, "weights", weights)

    @classmethod
    def from_atoms(cls, atoms: Sequence[Tuple[TorusPoint, float]]) -> "DiscreteMeasure":
        return cls(points=np.array([p.coords for p, _ in atoms], dtype=float), weights=[w for _, w in atoms])

    @classmethod
    def dirac(cls, point, weight: float = 1.0) -> "DiscreteMeasure":
        return cls(points=as_points(point), weights=[weight])

    @property
    def dim(self) -> int:
        return self.points.shape[1]

    @property
    def size(self) -> int:
        return len(self.weights)

    @property
    def total_mass(self) -> float:
        return float(np.sum(self.weights))

    def atoms(self) -> List[Tuple[TorusPoint, float]]:
        return [(TorusPoint(tuple(float(c) for c in x)), float(w)) for x, w in zip(self.points, self.weights)]

    def normalized(self) -> "DiscreteMeasure":
        mass = self.total_mass
        if mass <= 0.0:
            raise InvalidInputError("Cannot normalize a measure without mass.")
        return DiscreteMeasure(points=self.points, weights=self.weights / mass)


@dataclass(frozen=True)
class GroundMetric:
    """Torus geodesic distance, or log(1 + |x - y| / h^alpha)."""
    kind: str = "euclidean_torus"
    alpha: float = 0.5
    h: float = 1.0

    def __post_init__(self):
        if self.kind not in METRIC_KINDS:
            raise InvalidInputError(f"Unknown ground metric '{self.kind}', expected one of {METRIC_KINDS}.")
        if self.kind == "logarithmic":
            if not 0.0 <= self.alpha <= 1.0:
                raise InvalidInputError(f"Logarithmic metric needs alpha in [0, 1], got {self.alpha}.")
            if self.h <= 0.0:
                raise InvalidInputError(f"Logarithmic metric needs h > 0, got {self.h}.")

    @classmethod
    def logarithmic(cls, alpha: float, dt: float, dx: float) -> "GroundMetric":
        return cls(kind="logarithmic", alpha=alpha, h=max(dt, dx))

    @property
    def label(self) -> str:
        return "w1" if self.kind == "euclidean_torus" else "log"

    def cost(self, distances: np.ndarray) -> np.ndarray:
        if self.kind == "euclidean_torus":
            return distances
        return np.log1p(distances / self.h ** self.alpha)

    def cost_matrix(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        return self.cost(distance_matrix(x, y))

    def diameter(self, dim: int) -> float:
        return float(self.cost(np.asarray(max_distance(dim))))


@dataclass(frozen=True, eq=False)
class TransportResult:
    cost: float
    plan: List[Tuple[int, int, float]]
    support_mu: np.ndarray = dataclass_field(repr=False)
    support_nu: np.ndarray = dataclass_field(repr=False)
    dual_mu: np.ndarray = dataclass_field(repr=False)
    dual_nu: np.ndarray = dataclass_field(repr=False)


@dataclass(frozen=True)
class EntropicResult:
    cost: float
    debiased_cost: float
    lower: float
    upper: float
    marginal_violation: float
    epsilon: float


def pushforward(measure: DiscreteMeasure, transform: Callable[[np.ndarray], np.ndarray]) -> DiscreteMeasure:
    """Move every atom by `transform` (a batch map on (n, d) arrays); weights are shared, never copied."""
    moved = wrap_array(np.array(transform(measure.points), dtype=float).reshape(measure.points.shape))
    return DiscreteMeasure(points=moved, weights=measure.weights)


def merge_measures(measures: Sequence[DiscreteMeasure], scale: float = 1.0) -> DiscreteMeasure:
    """Concatenate atoms of several measures, weights multiplied by `scale`; atoms are never merged."""
    if not measures:
        raise InvalidInputError("Nothing to merge.")
    return DiscreteMeasure(points=np.vstack([m.points for m in measures]),
                           weights=np.concatenate([m.weights for m in measures]) * scale)


def resample_measure(measure: DiscreteMeasure, n_atoms: int, seed: int = 0) -> DiscreteMeasure:
    """Systematic resampling onto at most n_atoms of the measure's own atoms, total mass kept.

    Atom k keeps floor or ceil of n_atoms * w_k / M draws, so the result is
    within M / n_atoms per atom of the input in weight.
    """
    if n_atoms < 1:
        raise InvalidInputError(f"Need at least one atom, got {n_atoms}.")
    if measure.size <= n_atoms:
        return measure
    mass = measure.total_mass
    offset = np.random.default_rng(seed).random()
    edges = np.cumsum(measure.weights) / mass
    picks = np.searchsorted(edges, (np.arange(n_atoms) + offset) / n_atoms, side="right")
    picks = np.minimum(picks, measure.size - 1)
    chosen, counts = np.unique(picks, return_counts=True)
    logger.debug(f"Resampled {measure.size} atoms onto {len(chosen)}")
    return DiscreteMeasure(points=measure.points[chosen], weights=counts * (mass / n_atoms))


def _prepare(mu: DiscreteMeasure, nu: DiscreteMeasure, cap: int):
    if mu.dim != nu.dim:
        raise InvalidInputError(f"Measures live in different dimensions: {mu.dim} vs {nu.dim}.")
    keep_mu = np.flatnonzero(mu.weights >= WEIGHT_FLOOR)
    keep_nu = np.flatnonzero(nu.weights >= WEIGHT_FLOOR)
    a, b = mu.weights[keep_mu], nu.weights[keep_nu]
    mass_a, mass_b = float(np.sum(a)), float(np.sum(b))
    if mass_a <= 0.0 or mass_b <= 0.0:
        raise InvalidInputError("Both measures need positive mass.")
    if abs(mass_a - mass_b) > MASS_TOLERANCE * max(mass_a, mass_b):
        raise InvalidInputError(f"Mass mismatch: {mass_a!r} vs {mass_b!r}.")
    if max(len(a), len(b)) > cap:
        raise CapacityError(f"Supports of {len(a)} and {len(b)} atoms exceed the cap of {cap}; "
                            f"use the entropic solver or coarsen the measures.")
    return keep_mu, keep_nu, np.ascontiguousarray(a), np.ascontiguousarray(b * (mass_a / mass_b))


def wasserstein_exact(mu: DiscreteMeasure, nu: DiscreteMeasure, metric: GroundMetric = GroundMetric()) -> TransportResult:
    """Optimal transport cost by POT's network simplex."""
    keep_mu, keep_nu, a, b = _prepare(mu, nu, EXACT_MAX_ATOMS)
    M = np.ascontiguousarray(metric.cost_matrix(mu.points[keep_mu], nu.points[keep_nu]))
    G, log = ot.emd(a, b, M, numItermax=10_000_000, log=True)
    if log.get("warning"):
        logger.warning(f"Network simplex: {log['warning']}")

    rows, cols = np.nonzero(G > 0.0)
    plan = [(int(keep_mu[i]), int(keep_nu[j]), float(G[i, j])) for i, j in zip(rows, cols)]
    cost = float(np.sum(G * M))
    logger.debug(f"Exact OT ({metric.label}) on {len(a)}x{len(b)} atoms: cost={cost:.10g}")
    return TransportResult(cost=cost, plan=plan, support_mu=keep_mu, support_nu=keep_nu,
                           dual_mu=np.asarray(log["u"], dtype=float), dual_nu=np.asarray(log["v"], dtype=float))


def _entropy(p: np.ndarray) -> float:
    p = p[p > 0.0]
    return float(-np.sum(p * np.log(p)))


def _sinkhorn_cost(a, b, M, epsilon, max_iter):
    G = ot.sinkhorn(a, b, M, epsilon, method="sinkhorn_log", numItermax=max_iter, stopThr=1e-10)
    violation = float(max(np.sum(np.abs(G.sum(axis=1) - a)), np.sum(np.abs(G.sum(axis=0) - b))))
    return float(np.sum(G * M)), violation


def wasserstein_entropic(
    mu: DiscreteMeasure,
    nu: DiscreteMeasure,
    metric: GroundMetric = GroundMetric(),
    epsilon: float = 0.01,
    max_iter: int = 10000,
) -> EntropicResult:
    """Entropy-regularized cost with a bracket around the exact value.

    The solve runs on probability marginals; with C the transport cost of the
    regularized plan, the exact cost lies in [C - eps*min(H(a), H(b)), C + violation*max(M)],
    everything scaled by the common mass.
    """
    keep_mu, keep_nu, a, b = _prepare(mu, nu, ENTROPIC_MAX_ATOMS)
    if epsilon < 1e-3 * metric.diameter(mu.dim):
        raise InvalidInputError(f"epsilon={epsilon} is below 1e-3 of the metric diameter.")
    mass = float(np.sum(a))
    a, b = a / mass, b / np.sum(b)
    x, y = mu.points[keep_mu], nu.points[keep_nu]
    M = metric.cost_matrix(x, y)

    cost, violation = _sinkhorn_cost(a, b, M, epsilon, max_iter)
    if violation > MARGINAL_TOLERANCE:
        raise ConvergenceError(f"Sinkhorn stopped with marginal violation {violation:.3g} after {max_iter} iterations.",
                               violation=violation, iterations=max_iter)
    self_mu, _ = _sinkhorn_cost(a, a, metric.cost_matrix(x, x), epsilon, max_iter)
    self_nu, _ = _sinkhorn_cost(b, b, metric.cost_matrix(y, y), epsilon, max_iter)
    debiased = cost - 0.5 * (self_mu + self_nu)

    lower = cost - epsilon * min(_entropy(a), _entropy(b))
    upper = cost + violation * float(np.max(M))
    logger.debug(f"Entropic OT ({metric.label}, eps={epsilon:g}) on {len(a)}x{len(b)} atoms: "
                 f"cost={cost:.8g}, violation={violation:.2g}")
    return EntropicResult(cost=mass * cost, debiased_cost=mass * debiased, lower=mass * lower, upper=mass * upper,
                          marginal_violation=violation, epsilon=epsilon)


def splitting_upper_bound(
    parts_mu: Sequence[DiscreteMeasure],
    parts_nu: Sequence[DiscreteMeasure],
    metric: GroundMetric = GroundMetric(),
) -> float:
    """sum_i M_i W(mu_i / M_i, nu_i / M_i), an upper bound for W(sum mu_i, sum nu_i)."""
    if len(parts_mu) != len(parts_nu):
        raise InvalidInputError(f"{len(parts_mu)} parts of mu against {len(parts_nu)} parts of nu.")
    bound = 0.0
    for k, (part_mu, part_nu) in enumerate(zip(parts_mu, parts_nu)):
        mass_mu, mass_nu = part_mu.total_mass, part_nu.total_mass
        if abs(mass_mu - mass_nu) > MASS_TOLERANCE * max(mass_mu, mass_nu, 1e-300):
            raise InvalidInputError(f"Part {k} is not mass-matched: {mass_mu!r} vs {mass_nu!r}.")
        if mass_mu < WEIGHT_FLOOR:
            continue
        bound += mass_mu * wasserstein_exact(part_mu.normalized(), part_nu.normalized(), metric).cost
    return bound


def _union_points(mu: DiscreteMeasure, nu: DiscreteMeasure) -> np.ndarray:
    return np.vstack([mu.points, nu.points])


def optimal_potential(mu: DiscreteMeasure, nu: DiscreteMeasure, metric: GroundMetric = GroundMetric(),
                      result: Optional[TransportResult] = None) -> np.ndarray:
    """Kantorovich potential on the union support (mu atoms first), as the c-transform of the solver's duals."""
    result = result or wasserstein_exact(mu, nu, metric)
    targets = nu.points[result.support_nu]
    return np.min(metric.cost_matrix(_union_points(mu, nu), targets) - result.dual_nu[None, :], axis=1)


def kr_dual_gap(
    mu: DiscreteMeasure,
    nu: DiscreteMeasure,
    metric: GroundMetric,
    potential: Sequence[float],
) -> float:
    """Exact cost minus sum f d(mu - nu) for a 1-Lipschitz f given on the union support (mu atoms first)."""
    f = np.asarray(potential, dtype=float).reshape(-1)
    if len(f) != mu.size + nu.size:
        raise InvalidInputError(f"Potential has {len(f)} values, union support has {mu.size + nu.size} points.")
    support = _union_points(mu, nu)
    excess = np.abs(f[:, None] - f[None, :]) - metric.cost_matrix(support, support)
    if np.max(excess) > 1e-9:
        raise InvalidInputError(f"Potential is not 1-Lipschitz for the ground metric (excess {np.max(excess):.3g}).")
    pairing = float(np.dot(f[:mu.size], mu.weights) - np.dot(f[mu.size:], nu.weights))
    return wasserstein_exact(mu, nu, metric).cost - pairing


# --- CSV -----------------------------------------------------------------------------------------

def write_measure(path: str, measure: DiscreteMeasure):
    rows = ([float(w)] + [float(c) for c in x] for x, w in zip(measure.points, measure.weights))
    write_csv(path, ["weight"] + coordinate_header(measure.dim), rows)


def read_measure(path: str) -> DiscreteMeasure:
    header, rows = read_csv(path)
    if not header or header[0] != "weight":
        raise InvalidInputError(f"{path} is not a measure CSV (header {header}).")
    if not rows:
        raise InvalidInputError(f"{path} holds no atoms.")
    data = np.array(rows, dtype=float)
    return DiscreteMeasure(points=data[:, 1:], weights=data[:, 0])


def write_plan(path: str, result: TransportResult, mu: DiscreteMeasure, nu: DiscreteMeasure,
               metric: GroundMetric = GroundMetric()):
    rows = []
    for i, j, mass in result.plan:
        ground = float(metric.cost_matrix(mu.points[i:i + 1], nu.points[j:j + 1])[0, 0])
        rows.append([i, j, mass, ground])
    write_csv(path, ["i", "j", "mass", "ground_cost"], rows)


def read_plan(path: str) -> List[Tuple[int, int, float, float]]:
    header, rows = read_csv(path)
    if header != ["i", "j", "mass", "ground_cost"]:
        raise InvalidInputError(f"{path} is not a plan CSV (header {header}).")
    return [(int(r[0]), int(r[1]), float(r[2]), float(r[3])) for r in rows]


def exact_or_entropic(mu: DiscreteMeasure, nu: DiscreteMeasure, metric: GroundMetric,
                      epsilon: Optional[float] = None) -> Tuple[float, bool]:
    """Exact cost when the supports fit, otherwise the entropic upper value; the flag marks the fallback."""
    try:
        return wasserstein_exact(mu, nu, metric).cost, False
    except CapacityError:
        eps = epsilon if epsilon is not None else max(0.01 * metric.diameter(mu.dim), 1e-3)
        logger.warning(f"Supports {mu.size}x{nu.size} above the exact cap; falling back to entropic (eps={eps:g})")
        return wasserstein_entropic(mu, nu, metric, epsilon=eps).cost, True

