"""Particle schemes for the continuity equation, reference solutions, error curves and the Monte Carlo harness."""
import math
import time

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field as dataclass_field
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from scipy.stats import qmc

from lagflow.errors import InvalidInputError, RoughFieldError, UnsupportedRegimeError
from lagflow.fields import VelocityField
from lagflow.flow import (
    FlowConfig,
    MeanFlowState,
    ParticleEnsemble,
    bilipschitz_probe,
    effective_field,
    euler_flow_advance,
    euler_flow_map,
    jacobian_determinants,
    mean_euler_flow_advance,
    reference_advance,
)
from lagflow.log import get_logger
from lagflow.mesh import Mesh, cell_masses, locate_many, quadrature_cloud, sample_representative
from lagflow.torus import as_points, displacement_array, wrap_array
from lagflow.transport import (
    EXACT_MAX_ATOMS,
    DiscreteMeasure,
    GroundMetric,
    exact_or_entropic,
    merge_measures,
    resample_measure,
)


logger = get_logger()

SCHEMES = ("singular", "diffuse")
AGGREGATES = ("per_rep", "mean_of_n")
DENSITY_NAMES = ("uniform", "sinusoidal", "truncated_singular")
CHEBYSHEV_KS = (2, 3, 5)
REFERENCE_MASS_TOLERANCE = 1e-3
REFERENCE_MAX_PARTICLES = EXACT_MAX_ATOMS
PARTICLES_PER_ATOM = 16


# --- Initial densities ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class InitialDensity:
    """Bounded non-negative density on the d-torus, callable on (n, d) arrays."""
    name: str
    dim: int
    func: Callable[[np.ndarray], np.ndarray] = dataclass_field(repr=False)
    sup_bound: float
    truncation: Optional[float] = None
    params: Dict[str, Any] = dataclass_field(default_factory=dict)

    def __call__(self, points) -> np.ndarray:
        X = wrap_array(np.array(as_points(points, self.dim), dtype=float))
        return np.asarray(self.func(X), dtype=float).reshape(len(X))


def catalog_density(name: str, dim: int = 2, params: Optional[Dict[str, Any]] = None) -> InitialDensity:
    params = dict(params or {})
    if name == "uniform":
        level = float(params.get("level", 1.0))
        if level < 0.0:
            raise InvalidInputError(f"Uniform density level must be non-negative, got {level}.")
        return InitialDensity("uniform", dim, lambda X: np.full(len(X), level), sup_bound=level,
                              params={"level": level})

    if name == "sinusoidal":
        amplitude = float(params.get("amplitude", 0.5))
        k = int(params.get("wavenumber", 1))
        if not 0.0 <= amplitude <= 1.0:
            raise InvalidInputError(f"Sinusoidal amplitude must lie in [0, 1], got {amplitude}.")

        def bump(X):
            return 1.0 + amplitude * np.prod(np.sin(2.0 * np.pi * k * X), axis=1)

        return InitialDensity("sinusoidal", dim, bump, sup_bound=1.0 + amplitude,
                              params={"amplitude": amplitude, "wavenumber": k})

    if name == "truncated_singular":
        if "K" not in params:
            raise InvalidInputError("truncated_singular needs the truncation level K.")
        level = float(params["K"])
        beta = float(params.get("beta", 0.5 * dim))
        center = np.asarray(params.get("center", [0.5] * dim), dtype=float)
        if level <= 0.0:
            raise InvalidInputError(f"Truncation level K must be positive, got {level}.")
        if not 0.0 < beta < dim:
            raise InvalidInputError(f"truncated_singular needs 0 < beta < d, got {beta}.")

        def singular(X):
            r = np.linalg.norm(displacement_array(center, X), axis=1)
            with np.errstate(divide="ignore"):
                values = np.where(r > 0.0, r ** -beta, np.inf)
            # rho0 * 1{rho0 <= K}
            return np.where(values <= level, values, 0.0)

        return InitialDensity("truncated_singular", dim, singular, sup_bound=level, truncation=level,
                              params={"K": level, "beta": beta, "center": center.tolist()})

    raise InvalidInputError(f"Unknown initial density '{name}', expected one of {DENSITY_NAMES}.")


@dataclass(frozen=True, eq=False)
class CellwiseDensity:
    """Piecewise-constant density sum_i values[i] 1_{Q_i}."""
    mesh: Mesh
    values: np.ndarray

    def __call__(self, points) -> np.ndarray:
        return self.values[locate_many(self.mesh, points)]

    @property
    def masses(self) -> np.ndarray:
        return self.values * np.array([c.volume for c in self.mesh.cells])


def piecewise_constant(mesh: Mesh, rho0: Callable, quad_per_cell: int = 64) -> CellwiseDensity:
    """M_i / |Q_i| on every cell."""
    volumes = np.array([c.volume for c in mesh.cells])
    return CellwiseDensity(mesh=mesh, values=cell_masses(mesh, rho0, quad_per_cell) / volumes)


# --- Scheme runs ---------------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class SchemeRun:
    scheme: str
    mesh: Mesh
    field: VelocityField
    cfg: FlowConfig
    seed: Optional[int]
    sample_times: Tuple[float, ...]
    snapshots: Tuple[DiscreteMeasure, ...]
    delta: Optional[float] = None
    diagnostics: Dict[str, Any] = dataclass_field(default_factory=dict)
    cell_ids: Optional[np.ndarray] = dataclass_field(default=None, repr=False)
    starts: Optional[np.ndarray] = dataclass_field(default=None, repr=False)

    @property
    def total_mass(self) -> float:
        return self.snapshots[0].total_mass

    def to_json(self) -> Dict[str, Any]:
        return {
            "scheme": self.scheme,
            "field": self.field.metadata.name,
            "mesh": {"kind": self.mesh.kind, "n_cells": self.mesh.n_cells, "dx": self.mesh.dx,
                     "volume_ratio": self.mesh.volume_ratio},
            "dt": self.cfg.dt,
            "T": self.cfg.T,
            "delta_rule": self.cfg.delta_rule,
            "delta": self.delta,
            "seed": self.seed,
            "sample_times": list(self.sample_times),
            "atoms": self.snapshots[0].size,
            "total_mass": self.total_mass,
            "diagnostics": self.diagnostics,
        }


def _check_sample_times(sample_times: Sequence[float], T: float) -> Tuple[float, ...]:
    times = tuple(float(t) for t in sample_times)
    if not times:
        raise InvalidInputError("At least one sample time is needed.")
    if any(b < a for a, b in zip(times, times[1:])):
        raise InvalidInputError(f"Sample times must be non-decreasing: {times}.")
    if times[0] < 0.0 or times[-1] > T + 1e-12 * max(1.0, T):
        raise InvalidInputError(f"Sample times {times} leave [0, {T}].")
    return times


def flow_diagnostics(field: VelocityField, cfg: FlowConfig, t: float, n_probe: int = 256,
                     fd_step: float = 1e-5, seed: int = 0) -> Dict[str, float]:
    """Minimum Jacobian determinant and extreme distance ratios of the Euler flow at time t."""
    evaluator = euler_flow_map(field, cfg)
    probes = qmc.Halton(d=field.dim, scramble=True, seed=seed).random(n_probe)
    partners = np.random.default_rng(seed).random((n_probe, field.dim))
    bounds = bilipschitz_probe(evaluator, t, probes, partners)
    return {
        "min_det": float(np.min(jacobian_determinants(evaluator, t, probes, fd_step))),
        "min_ratio": bounds.min_ratio,
        "max_ratio": bounds.max_ratio,
    }


def run_singular(
    field: VelocityField,
    mesh: Mesh,
    rho0: Callable,
    cfg: FlowConfig,
    seed: int,
    sample_times: Sequence[float],
    rep_mode: str = "uniform",
    quad_per_cell: int = 64,
    masses: Optional[np.ndarray] = None,
    diagnostics: bool = False,
) -> SchemeRun:
    """Dirac masses M_i at one random point per cell, carried by the Euler flow."""
    times = _check_sample_times(sample_times, cfg.T)
    if masses is None:
        masses = cell_masses(mesh, rho0, quad_per_cell)
    if np.sum(masses) <= 0.0:
        raise InvalidInputError("Initial density has no mass on the mesh.")

    rng = np.random.default_rng(seed)
    active = np.flatnonzero(masses > 0.0)
    starts = np.array([
        sample_representative(mesh, int(i), rng, rep_mode, rho0=rho0, mass=float(masses[i]),
                              quad_per_cell=quad_per_cell).coords
        for i in active
    ])
    weights = np.array(masses[active], dtype=float)
    weights.setflags(write=False)

    u_eff = effective_field(field, cfg)
    ensemble = ParticleEnsemble.start(starts)
    snapshots = []
    for t in times:
        ensemble = euler_flow_advance(field, cfg, ensemble, t, u_eff=u_eff)
        snapshots.append(DiscreteMeasure(points=ensemble.positions, weights=weights))

    extra = flow_diagnostics(field, cfg, times[-1], seed=seed) if diagnostics else {}
    logger.debug(f"Singular run: {len(active)} atoms, seed={seed}, dt={cfg.dt:g}, dx={mesh.dx:.4g}")
    return SchemeRun(scheme="singular", mesh=mesh, field=field, cfg=cfg, seed=seed, sample_times=times,
                     snapshots=tuple(snapshots), delta=cfg.resolve_delta(field), diagnostics=extra, cell_ids=active,
                     starts=ensemble.provenance)


def run_diffuse(
    field: VelocityField,
    mesh: Mesh,
    rho0_bar: Union[CellwiseDensity, Callable],
    cfg: FlowConfig,
    sample_times: Sequence[float],
    quad_per_cell: int = 16,
) -> SchemeRun:
    """Quadrature clouds of every cell, each cell moved rigidly by the mean Euler flow.

    `quad_per_cell` sets the resolution of the output cloud and of the cell averages
    inside the flow; the cell masses of a CellwiseDensity are computed beforehand.
    """
    if field.metadata.p <= field.dim:
        raise UnsupportedRegimeError(
            f"The diffuse scheme needs p > d; '{field.metadata.name}' declares p={field.metadata.p} in d={field.dim}.")
    times = _check_sample_times(sample_times, cfg.T)

    owners, nodes, node_weights = quadrature_cloud(mesh, quad_per_cell)
    if isinstance(rho0_bar, CellwiseDensity):
        density = rho0_bar.values[owners]
    else:
        density = np.asarray(rho0_bar(wrap_array(np.array(nodes))), dtype=float).reshape(len(nodes))
        if np.any(density < 0.0):
            raise InvalidInputError("Cell-wise density must be non-negative.")
    weights = node_weights * density
    weights.setflags(write=False)

    anchors = np.array([c.anchor.coords for c in mesh.cells])
    state = MeanFlowState.start(mesh, quad_per_cell)
    snapshots = []
    for t in times:
        state = mean_euler_flow_advance(field, cfg, mesh, anchors, t, state=state)
        snapshots.append(DiscreteMeasure(points=nodes + state.translations[owners], weights=weights))

    logger.debug(f"Diffuse run: {mesh.n_cells} cells x {quad_per_cell} nodes, dt={cfg.dt:g}, dx={mesh.dx:.4g}")
    # each cell is translated rigidly, so the flow map has unit Jacobian inside the cells
    return SchemeRun(scheme="diffuse", mesh=mesh, field=field, cfg=cfg, seed=None, sample_times=times,
                     snapshots=tuple(snapshots), delta=cfg.resolve_delta(field), diagnostics={"min_det": 1.0},
                     cell_ids=owners, starts=wrap_array(np.array(nodes)))


# --- Reference solutions -------------------------------------------------------------------------

@dataclass(frozen=True)
class SelfReference:
    """Finest-level run of a scheme standing in for rho(t) of a rough field.

    Singular self-references use the frozen master seed; diffuse ones are
    deterministic and `quad_per_cell` sets their cloud resolution.
    """
    mesh: Mesh
    cfg: FlowConfig
    master_seed: int = 0
    rep_mode: str = "uniform"
    quad_per_cell: int = 64
    scheme: str = "singular"


@dataclass(frozen=True, eq=False)
class ReferenceSolution:
    kind: str
    sample_times: Tuple[float, ...]
    snapshots: Tuple[DiscreteMeasure, ...]
    initial_points: np.ndarray = dataclass_field(repr=False)

    @property
    def n_particles(self) -> int:
        return self.snapshots[0].size


def _density_cloud(rho0: Callable, dim: int, n: int, sup_bound: Optional[float], seed: int):
    """First n accepted points of a scrambled Halton acceptance-rejection in d+1 dimensions."""
    sampler = qmc.Halton(d=dim + 1, scramble=True, seed=seed)
    bound = sup_bound
    accepted, seen_values = [], []
    count = 0
    while count < n:
        batch = sampler.random(max(4 * n, 1024))
        values = np.asarray(rho0(batch[:, :dim]), dtype=float).reshape(len(batch))
        if bound is None:
            bound = float(np.max(values))
        if bound <= 0.0:
            raise InvalidInputError("Initial density vanishes on the probe points.")
        seen_values.append(values)
        keep = batch[batch[:, dim] * bound <= values, :dim]
        accepted.append(keep)
        count += len(keep)
    points = np.vstack(accepted)[:n]
    return points, float(np.mean(np.concatenate(seen_values)))


def reference_size(scheme_atoms: int, particles_per_atom: int = PARTICLES_PER_ATOM) -> int:
    """Particles of a default reference cloud: particles_per_atom per scheme atom, within the exact-solver cap."""
    return max(1, min(particles_per_atom * scheme_atoms, REFERENCE_MAX_PARTICLES))


def reference_solution(
    field: VelocityField,
    rho0: Callable,
    sample_times: Sequence[float],
    n_ref_particles: int,
    dt_ref: float,
    scheme_atoms: Optional[int] = None,
    self_reference: Optional[SelfReference] = None,
    mass: Optional[float] = None,
    seed: int = 0,
) -> ReferenceSolution:
    """Stand-in for rho(t) = Phi(t)_# rho0: an equal-weight cloud drawn from rho0 and carried by RK4.

    Rough fields are refused unless a SelfReference is supplied, in which case the
    reference is that run. `mass` fixes the cloud's total mass, which is
    otherwise the quadrature estimate of the integral of rho0.
    """
    times = tuple(float(t) for t in sample_times)
    if self_reference is not None:
        if self_reference.scheme == "diffuse":
            run = run_diffuse(field, self_reference.mesh, piecewise_constant(self_reference.mesh, rho0), self_reference.cfg,
                              times, quad_per_cell=self_reference.quad_per_cell)
        else:
            run = run_singular(field, self_reference.mesh, rho0, self_reference.cfg, self_reference.master_seed, times,
                               rep_mode=self_reference.rep_mode, quad_per_cell=self_reference.quad_per_cell)
        logger.info(f"Self-reference ({self_reference.scheme}): {run.snapshots[0].size} atoms at dt={self_reference.cfg.dt:g}, "
                    f"dx={self_reference.mesh.dx:.4g}, master seed {self_reference.master_seed}")
        return ReferenceSolution(kind="self", sample_times=times, snapshots=run.snapshots,
                                 initial_points=run.starts)
    if field.metadata.rough:
        raise RoughFieldError(f"Field '{field.metadata.name}' is rough; pass a SelfReference instead.")
    if n_ref_particles < 1:
        raise InvalidInputError(f"Reference cloud needs at least one particle, got {n_ref_particles}.")
    if n_ref_particles > REFERENCE_MAX_PARTICLES:
        logger.warning(f"Reference cloud of {n_ref_particles} particles capped at {REFERENCE_MAX_PARTICLES}")
        n_ref_particles = REFERENCE_MAX_PARTICLES
    if scheme_atoms is not None and n_ref_particles < PARTICLES_PER_ATOM * scheme_atoms:
        logger.warning(f"Reference cloud of {n_ref_particles} particles is below {PARTICLES_PER_ATOM}x the "
                       f"{scheme_atoms} scheme atoms")

    sup_bound = getattr(rho0, "sup_bound", None)
    points, estimate = _density_cloud(rho0, field.dim, n_ref_particles, sup_bound, seed)
    total = estimate if mass is None else mass
    weights = np.full(n_ref_particles, total / n_ref_particles)
    weights.setflags(write=False)

    snapshots = []
    current, t_now = points, 0.0
    for t in times:
        current = reference_advance(field, current, t_now, t, dt_ref)
        t_now = max(t_now, t)
        snapshots.append(DiscreteMeasure(points=current, weights=weights))
    logger.debug(f"Reference cloud of {n_ref_particles} particles advanced with dt_ref={dt_ref:g}")
    return ReferenceSolution(kind="rk4", sample_times=times, snapshots=tuple(snapshots), initial_points=points)


# --- Errors --------------------------------------------------------------------------------------

@dataclass(frozen=True)
class ErrorPoint:
    t: float
    distance: float
    entropic: bool = False


ReferenceLike = Union[ReferenceSolution, SchemeRun, Sequence[DiscreteMeasure]]


def _snapshots_of(reference: ReferenceLike) -> Tuple[DiscreteMeasure, ...]:
    if isinstance(reference, (ReferenceSolution, SchemeRun)):
        return reference.snapshots
    return tuple(reference)


def measure_distance(reference: DiscreteMeasure, approx: DiscreteMeasure, metric: GroundMetric,
                     epsilon: Optional[float] = None) -> Tuple[float, bool]:
    """Distance after rescaling the reference to the approximation's mass, when they agree to 1e-3."""
    ref_mass, mass = reference.total_mass, approx.total_mass
    if abs(ref_mass - mass) > REFERENCE_MASS_TOLERANCE * max(ref_mass, mass):
        raise InvalidInputError(f"Reference mass {ref_mass!r} and scheme mass {mass!r} disagree.")
    if ref_mass != mass:
        reference = DiscreteMeasure(points=reference.points, weights=reference.weights * (mass / ref_mass))
    return exact_or_entropic(reference, approx, metric, epsilon)


def error_curve(run: SchemeRun, reference: ReferenceLike, metric: GroundMetric,
                epsilon: Optional[float] = None) -> List[ErrorPoint]:
    """Distance between the run and the reference at every sample time."""
    ref_snapshots = _snapshots_of(reference)
    if len(ref_snapshots) != len(run.snapshots):
        raise InvalidInputError(f"{len(run.snapshots)} run snapshots against {len(ref_snapshots)} reference ones.")
    if isinstance(reference, (ReferenceSolution, SchemeRun)):
        if any(abs(a - b) > 1e-12 for a, b in zip(reference.sample_times, run.sample_times)):
            raise InvalidInputError("Run and reference sample times differ.")

    curve = []
    for t, ref, snap in zip(run.sample_times, ref_snapshots, run.snapshots):
        distance, entropic = measure_distance(ref, snap, metric, epsilon)
        curve.append(ErrorPoint(t=t, distance=distance, entropic=entropic))
    return curve


# --- Monte Carlo ---------------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class McSummary:
    n_reps: int
    aggregate: str
    sample_times: Tuple[float, ...]
    seeds: Tuple[int, ...]
    errors: np.ndarray
    mean_error: np.ndarray
    variance: np.ndarray
    worst_error: np.ndarray
    exceedance: Dict[int, np.ndarray]
    exceedance_bound: Dict[int, float]
    mean_of_n_error: Optional[np.ndarray] = None
    mean_of_n_resampled: bool = False
    entropic: bool = False
    min_det: Optional[float] = None
    atoms: int = 0

    @property
    def stderr(self) -> np.ndarray:
        return np.sqrt(self.variance / self.n_reps)

    def to_json(self) -> Dict[str, Any]:
        return {
            "n_reps": self.n_reps,
            "aggregate": self.aggregate,
            "sample_times": list(self.sample_times),
            "seeds": list(self.seeds),
            "mean_error": self.mean_error.tolist(),
            "variance": self.variance.tolist(),
            "worst_error": self.worst_error.tolist(),
            "exceedance": {str(k): v.tolist() for k, v in self.exceedance.items()},
            "exceedance_bound": {str(k): v for k, v in self.exceedance_bound.items()},
            "mean_of_n_error": None if self.mean_of_n_error is None else self.mean_of_n_error.tolist(),
            "mean_of_n_resampled": self.mean_of_n_resampled,
            "entropic": self.entropic,
            "min_det": self.min_det,
        }


def chebyshev_exceedance(errors: np.ndarray, ks: Sequence[int] = CHEBYSHEV_KS) -> Dict[int, np.ndarray]:
    """Fraction of replications with |X_i - mean| >= k * std, per column."""
    errors = np.atleast_2d(errors)
    mean = errors.mean(axis=0)
    std = errors.std(axis=0, ddof=1)
    deviation = np.abs(errors - mean)
    return {k: np.mean((deviation >= k * std) & (std > 0.0), axis=0) for k in ks}


def monte_carlo(
    field: VelocityField,
    mesh: Mesh,
    rho0: Callable,
    cfg: FlowConfig,
    metric: GroundMetric,
    n_reps: int,
    base_seed: int,
    sample_times: Sequence[float],
    aggregate: str = "per_rep",
    reference: Optional[ReferenceLike] = None,
    rep_mode: str = "uniform",
    quad_per_cell: int = 64,
    workers: int = 1,
    diagnostics: bool = False,
) -> McSummary:
    """Independent singular runs with seeds base_seed + i and the statistics of their errors.

    Without a reference, an RK4 cloud of 16 particles per atom at dt/16 is built, capped at
    REFERENCE_MAX_PARTICLES. Under mean_of_n the merged replications are resampled onto
    EXACT_MAX_ATOMS atoms when they outgrow the exact solver.
    """
    if n_reps < 2:
        raise InvalidInputError(f"Monte Carlo needs at least 2 replications, got {n_reps}.")
    if aggregate not in AGGREGATES:
        raise InvalidInputError(f"Unknown aggregate '{aggregate}', expected one of {AGGREGATES}.")
    times = _check_sample_times(sample_times, cfg.T)
    masses = cell_masses(mesh, rho0, quad_per_cell)
    atoms = int(np.count_nonzero(masses > 0.0))
    if reference is None:
        reference = reference_solution(field, rho0, times, reference_size(atoms), cfg.dt / 16, scheme_atoms=atoms,
                                       mass=float(np.sum(masses)))
    ref_snapshots = _snapshots_of(reference)

    def replicate(index: int):
        seed = base_seed + index
        run = run_singular(field, mesh, rho0, cfg, seed, times, rep_mode=rep_mode, quad_per_cell=quad_per_cell,
                           masses=masses, diagnostics=diagnostics)
        curve = error_curve(run, ref_snapshots, metric)
        return run, curve

    started = time.perf_counter()
    with ThreadPoolExecutor(max_workers=max(1, workers)) as executor:
        outcomes = list(executor.map(replicate, range(n_reps)))

    errors = np.array([[p.distance for p in curve] for _, curve in outcomes])
    entropic = any(p.entropic for _, curve in outcomes for p in curve)
    mean_of_n = None
    resampled = False
    if aggregate == "mean_of_n":
        mean_of_n = np.empty(len(times))
        for k, ref in enumerate(ref_snapshots):
            merged = merge_measures([run.snapshots[k] for run, _ in outcomes], scale=1.0 / n_reps)
            if merged.size > EXACT_MAX_ATOMS:
                logger.warning(f"Mean of {n_reps} replications has {merged.size} atoms; resampling onto {EXACT_MAX_ATOMS}")
                merged = resample_measure(merged, EXACT_MAX_ATOMS, seed=base_seed + k)
                resampled = True
            mean_of_n[k], fallback = measure_distance(ref, merged, metric)
            entropic = entropic or fallback

    min_det = None
    if diagnostics:
        min_det = min(run.diagnostics["min_det"] for run, _ in outcomes)
    logger.info(f"Monte Carlo: {n_reps} reps x {len(times)} times in {time.perf_counter() - started:.2f}s, "
                f"mean error at t={times[-1]:g}: {errors[:, -1].mean():.6g}")
    return McSummary(
        n_reps=n_reps,
        aggregate=aggregate,
        sample_times=times,
        seeds=tuple(base_seed + i for i in range(n_reps)),
        errors=errors,
        mean_error=errors.mean(axis=0),
        variance=errors.var(axis=0, ddof=1),
        worst_error=errors.max(axis=0),
        exceedance=chebyshev_exceedance(errors),
        exceedance_bound={k: 1.0 / k ** 2 for k in CHEBYSHEV_KS},
        mean_of_n_error=mean_of_n,
        mean_of_n_resampled=resampled,
        entropic=entropic,
        min_det=min_det,
        atoms=atoms,
    )


@dataclass(frozen=True)
class VarianceRatio:
    group_size: int
    variance_of_means: float
    predicted: float

    @property
    def ratio(self) -> float:
        return self.variance_of_means / self.predicted if self.predicted > 0.0 else math.nan


def variance_scaling(errors: Sequence[float], group_sizes: Sequence[int], n_outer: int) -> Dict[int, VarianceRatio]:
    """Variance of means of n i.i.d. errors against Var[X_1]/n, using disjoint consecutive groups."""
    pool = np.asarray(errors, dtype=float).reshape(-1)
    if n_outer < 2:
        raise InvalidInputError(f"n_outer must be at least 2, got {n_outer}.")
    predicted_base = float(np.var(pool, ddof=1))
    result = {}
    for n in group_sizes:
        if n < 1 or n * n_outer > len(pool):
            raise InvalidInputError(f"Need {n * n_outer} errors for {n_outer} groups of {n}, have {len(pool)}.")
        means = pool[:n * n_outer].reshape(n_outer, n).mean(axis=1)
        result[n] = VarianceRatio(group_size=n, variance_of_means=float(np.var(means, ddof=1)),
                                  predicted=predicted_base / n)
    return result
