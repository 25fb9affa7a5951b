"""Explicit Euler approximations of the flow of a velocity field, an RK4 reference, and flow diagnostics."""
import math

from dataclasses import dataclass, replace
from typing import Callable, List, Optional, Sequence

import numpy as np

from scipy.stats import qmc

from lagflow.errors import InvalidInputError, RoughFieldError, UnsupportedRegimeError
from lagflow.fields import VelocityField, default_delta, make_kernel, mollify, time_averaged_velocity_many
from lagflow.io_utils import coordinate_header, write_csv
from lagflow.log import get_logger
from lagflow.mesh import Mesh, cell_contains, quadrature_cloud
from lagflow.torus import TorusPoint, as_points, distance_array, displacement_array, wrap_array


logger = get_logger()

DELTA_RULES = ("auto", "sqrt_dt", "none", "explicit", "linear_dt")
MAX_DELTA = 0.25

# t -> (n, d) positions -> (n, d) positions
FlowEvaluator = Callable[[float, np.ndarray], np.ndarray]


@dataclass(frozen=True)
class FlowConfig:
    dt: float
    T: float
    delta_rule: str = "auto"
    delta: Optional[float] = None
    n_quad_time: int = 1
    kernel_profile: str = "bump"
    quad_points_per_axis: int = 8

    def __post_init__(self):
        if not (self.dt > 0 and self.T > 0):
            raise InvalidInputError(f"dt and T must be positive, got dt={self.dt}, T={self.T}.")
        ratio = self.T / self.dt
        if round(ratio) < 1 or abs(ratio - round(ratio)) > 1e-9 * max(1.0, ratio):
            raise InvalidInputError(f"dt={self.dt} does not divide T={self.T} into whole steps.")
        if self.delta_rule not in DELTA_RULES:
            raise InvalidInputError(f"Unknown delta rule '{self.delta_rule}', expected one of {DELTA_RULES}.")
        if self.delta_rule == "explicit" and (self.delta is None or not 0.0 < self.delta <= MAX_DELTA):
            raise InvalidInputError(f"Explicit delta rule needs 0 < delta <= {MAX_DELTA}, got {self.delta}.")
        if self.n_quad_time < 1:
            raise InvalidInputError(f"n_quad_time must be at least 1, got {self.n_quad_time}.")

    @property
    def n_steps(self) -> int:
        return int(round(self.T / self.dt))

    def node_time(self, n: int) -> float:
        return self.T if n >= self.n_steps else n * self.dt

    def node_index(self, t: float) -> int:
        """Index of the last grid node at or before t."""
        n = int(round(t / self.dt))
        if abs(t - n * self.dt) <= 1e-12 * max(1.0, self.T):
            return min(n, self.n_steps)
        return min(int(math.floor(t / self.dt)), self.n_steps)

    def resolve_delta(self, field: VelocityField) -> Optional[float]:
        """Mollification radius for this field, or None when the field is used as is."""
        if self.delta_rule == "auto":
            delta = default_delta(field, self.dt)
        elif self.delta_rule == "sqrt_dt":
            delta = math.sqrt(self.dt)
        elif self.delta_rule == "linear_dt":
            delta = self.dt
        elif self.delta_rule == "explicit":
            delta = self.delta
        else:
            delta = None
        if delta is not None and delta > MAX_DELTA:
            raise InvalidInputError(
                f"Rule '{self.delta_rule}' gives delta={delta:.4g} at dt={self.dt:g}, above {MAX_DELTA}.")
        return delta


def effective_field(field: VelocityField, cfg: FlowConfig) -> VelocityField:
    """The field each Euler step averages: u itself, or u mollified at the configured radius."""
    delta = cfg.resolve_delta(field)
    if delta is None:
        return field
    return mollify(field, delta, make_kernel(cfg.kernel_profile, field.dim), cfg.quad_points_per_axis)


def _check_target(cfg: FlowConfig, t_now: float, t_target: float):
    if t_target > cfg.T + 1e-12 * max(1.0, cfg.T):
        raise InvalidInputError(f"Target time {t_target} is past the horizon T={cfg.T}.")
    if t_target < t_now - 1e-15:
        raise InvalidInputError(f"Backward advance from t={t_now} to t={t_target} is not supported.")


# --- Euler flow ----------------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class ParticleEnsemble:
    """Particles under an Euler flow; node_positions are the wrapped positions at the last grid node."""
    positions: np.ndarray
    t: float
    provenance: np.ndarray
    node_positions: np.ndarray
    node_index: int = 0

    def __post_init__(self):
        if len(self.positions) != len(self.provenance):
            raise InvalidInputError("Positions and provenance must have the same length.")

    @classmethod
    def start(cls, points) -> "ParticleEnsemble":
        X = wrap_array(np.array(as_points(points), dtype=float))
        X.setflags(write=False)
        return cls(positions=X, t=0.0, provenance=X, node_positions=X, node_index=0)

    @property
    def count(self) -> int:
        return len(self.positions)

    def points(self) -> List[TorusPoint]:
        return [TorusPoint(tuple(float(c) for c in row)) for row in self.positions]


def euler_flow_advance(
    field: VelocityField,
    cfg: FlowConfig,
    ensemble: ParticleEnsemble,
    t_target: float,
    u_eff: Optional[VelocityField] = None,
) -> ParticleEnsemble:
    """Advance every particle to t_target.

    At each node t_n a particle moves by dt times the time average of the effective
    field at its node position; between nodes the map is the affine interpolation in
    the unwrapped lift. Pass `u_eff` to reuse an already mollified field.
    """
    _check_target(cfg, ensemble.t, t_target)
    t_target = min(t_target, cfg.T)
    u_eff = u_eff or effective_field(field, cfg)

    node_positions = ensemble.node_positions
    n = ensemble.node_index
    target_node = cfg.node_index(t_target)
    while n < target_node:
        step = time_averaged_velocity_many(u_eff, cfg.node_time(n), cfg.node_time(n + 1), node_positions,
                                           cfg.n_quad_time)
        node_positions = wrap_array(node_positions + cfg.dt * step)
        n += 1

    fraction = t_target - cfg.node_time(n)
    if n < cfg.n_steps and fraction > 0.0:
        step = time_averaged_velocity_many(u_eff, cfg.node_time(n), cfg.node_time(n + 1), node_positions,
                                           cfg.n_quad_time)
        positions = wrap_array(node_positions + fraction * step)
    else:
        positions = node_positions

    node_positions.setflags(write=False)
    positions.setflags(write=False)
    logger.debug(f"Advanced {ensemble.count} particles from t={ensemble.t:g} to t={t_target:g} ({n} nodes)")
    return ParticleEnsemble(positions=positions, t=float(t_target), provenance=ensemble.provenance,
                            node_positions=node_positions, node_index=n)


def euler_flow_map(field: VelocityField, cfg: FlowConfig) -> FlowEvaluator:
    """x -> Phi_E(t, x) as a batch evaluator, mollifying once."""
    u_eff = effective_field(field, cfg)

    def evaluator(t: float, X: np.ndarray) -> np.ndarray:
        return euler_flow_advance(field, cfg, ParticleEnsemble.start(X), t, u_eff=u_eff).positions

    return evaluator


def identity_flow(t: float, X: np.ndarray) -> np.ndarray:
    return wrap_array(np.array(X, dtype=float, ndmin=2))


def record_trajectories(
    field: VelocityField,
    cfg: FlowConfig,
    points,
    times: Sequence[float],
) -> List[np.ndarray]:
    """Positions of the ensemble at each of the (increasing) times."""
    u_eff = effective_field(field, cfg)
    ensemble = ParticleEnsemble.start(points)
    snapshots = []
    for t in times:
        ensemble = euler_flow_advance(field, cfg, ensemble, t, u_eff=u_eff)
        snapshots.append(ensemble.positions)
    return snapshots


def write_trajectories(path: str, times: Sequence[float], snapshots: Sequence[np.ndarray]):
    dim = snapshots[0].shape[1] if snapshots else 1
    rows = []
    for t, positions in zip(times, snapshots):
        for particle_id, x in enumerate(positions):
            rows.append([particle_id, float(t)] + [float(c) for c in x])
    write_csv(path, ["particle_id", "t"] + coordinate_header(dim), rows)
    logger.info(f"Trajectories of {len(snapshots[0]) if snapshots else 0} particles written to {path}")


# --- Mean Euler flow -----------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class MeanFlowState:
    """Per-cell rigid translations (unwrapped) of the mean Euler flow."""
    translations: np.ndarray
    t: float
    node_translations: np.ndarray
    node_index: int = 0
    quad_per_cell: int = 64

    @classmethod
    def start(cls, mesh: Mesh, quad_per_cell: int = 64) -> "MeanFlowState":
        zero = np.zeros((mesh.n_cells, mesh.dim))
        return cls(translations=zero, t=0.0, node_translations=zero, node_index=0, quad_per_cell=quad_per_cell)

    def positions(self, representatives: np.ndarray) -> np.ndarray:
        return wrap_array(np.asarray(representatives, dtype=float) + self.translations)


def _cell_averaged_velocity(u_eff, cfg, n, owners, nodes, weights, volumes, offsets):
    moved = wrap_array(nodes + offsets[owners])
    velocity = time_averaged_velocity_many(u_eff, cfg.node_time(n), cfg.node_time(n + 1), moved, cfg.n_quad_time)
    averaged = np.stack([np.bincount(owners, weights=weights * velocity[:, k], minlength=len(volumes))
                         for k in range(velocity.shape[1])], axis=1)
    return averaged / volumes[:, None]


def mean_euler_flow_advance(
    field: VelocityField,
    cfg: FlowConfig,
    mesh: Mesh,
    representatives,
    t_target: float,
    state: Optional[MeanFlowState] = None,
    quad_per_cell: Optional[int] = None,
) -> MeanFlowState:
    """Advance the per-cell translations of the mean Euler flow to t_target.

    Each step adds dt times the space-time average of u over the cell translated by
    its current offset, using the same quadrature nodes as the cell masses. The
    representatives only have to lie in their cells; the translations do not depend
    on them. A resumed state keeps the quadrature it started with (64 nodes per cell
    by default).
    """
    if field.metadata.p <= field.dim:
        raise UnsupportedRegimeError(
            f"Mean Euler flow needs p > d, field '{field.metadata.name}' declares p={field.metadata.p} in d={field.dim}.")
    reps = as_points(representatives, mesh.dim)
    if len(reps) != mesh.n_cells:
        raise InvalidInputError(f"Expected {mesh.n_cells} representatives, got {len(reps)}.")
    for cell in mesh.cells:
        if not cell_contains(mesh, cell.id, reps[cell.id])[0]:
            raise InvalidInputError(f"Representative {reps[cell.id].tolist()} is not in cell {cell.id}.")

    if state is None:
        state = MeanFlowState.start(mesh, quad_per_cell or 64)
    elif quad_per_cell is not None and quad_per_cell != state.quad_per_cell:
        raise InvalidInputError(
            f"State was started with {state.quad_per_cell} nodes per cell, got quad_per_cell={quad_per_cell}.")
    _check_target(cfg, state.t, t_target)
    t_target = min(t_target, cfg.T)
    u_eff = effective_field(field, cfg)

    owners, nodes, weights = quadrature_cloud(mesh, state.quad_per_cell)
    volumes = np.array([c.volume for c in mesh.cells])
    offsets = state.node_translations
    n = state.node_index
    target_node = cfg.node_index(t_target)
    while n < target_node:
        offsets = offsets + cfg.dt * _cell_averaged_velocity(u_eff, cfg, n, owners, nodes, weights, volumes, offsets)
        n += 1

    fraction = t_target - cfg.node_time(n)
    if n < cfg.n_steps and fraction > 0.0:
        translations = offsets + fraction * _cell_averaged_velocity(u_eff, cfg, n, owners, nodes, weights, volumes,
                                                                    offsets)
    else:
        translations = offsets
    logger.debug(f"Mean Euler flow on {mesh.n_cells} cells advanced to t={t_target:g} ({n} nodes)")
    return replace(state, translations=translations, t=float(t_target), node_translations=offsets, node_index=n)


# --- Reference flow ------------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class Trajectory:
    times: np.ndarray
    positions: np.ndarray

    @property
    def final(self) -> TorusPoint:
        return TorusPoint(tuple(float(c) for c in self.positions[-1]))


def _rk4(field: VelocityField, X: np.ndarray, t_start: float, t_end: float, dt_ref: float, keep_path: bool = False):
    n_steps = max(1, int(math.ceil((t_end - t_start) / dt_ref - 1e-9)))
    h = (t_end - t_start) / n_steps
    lifted = np.array(X, dtype=float)
    path = [wrap_array(lifted)] if keep_path else None
    for k in range(n_steps):
        t = t_start + k * h
        k1 = field.evaluate(t, lifted)
        k2 = field.evaluate(t + 0.5 * h, lifted + 0.5 * h * k1)
        k3 = field.evaluate(t + 0.5 * h, lifted + 0.5 * h * k2)
        k4 = field.evaluate(min(t + h, t_end), lifted + h * k3)
        lifted = lifted + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        if keep_path:
            path.append(wrap_array(lifted))
    return (t_start + np.arange(n_steps + 1) * h, np.stack(path)) if keep_path else wrap_array(lifted)


def _refuse_rough(field: VelocityField):
    if field.metadata.rough:
        raise RoughFieldError(
            f"Field '{field.metadata.name}' is rough; use a self-convergence reference instead of RK4.")


def reference_flow(field: VelocityField, x0: TorusPoint, T: float, dt_ref: float) -> Trajectory:
    """Classical fourth-order Runge-Kutta trajectory of x0 on [0, T]."""
    _refuse_rough(field)
    if not 0.0 < dt_ref <= T:
        raise InvalidInputError(f"Need 0 < dt_ref <= T, got dt_ref={dt_ref}, T={T}.")
    times, path = _rk4(field, as_points(x0, field.dim), 0.0, T, dt_ref, keep_path=True)
    return Trajectory(times=times, positions=path[:, 0, :])


def reference_flow_map(field: VelocityField, dt_ref: float) -> FlowEvaluator:
    _refuse_rough(field)

    def evaluator(t: float, X: np.ndarray) -> np.ndarray:
        if t <= 0.0:
            return identity_flow(t, X)
        return _rk4(field, as_points(X, field.dim), 0.0, t, dt_ref)

    return evaluator


def reference_advance(field: VelocityField, X: np.ndarray, t_start: float, t_end: float, dt_ref: float) -> np.ndarray:
    """RK4 positions at t_end of particles sitting at X at time t_start."""
    _refuse_rough(field)
    if t_end <= t_start:
        return wrap_array(np.array(X, dtype=float, ndmin=2))
    return _rk4(field, as_points(X, field.dim), t_start, t_end, dt_ref)


# --- Diagnostics ---------------------------------------------------------------------------------

def jacobian_determinants(flow: FlowEvaluator, t: float, points, fd_step: float = 1e-5) -> np.ndarray:
    """Central-difference Jacobian determinants of x -> flow(t, x) at every point."""
    if not 1e-7 <= fd_step <= 1e-3:
        raise InvalidInputError(f"fd_step must lie in [1e-7, 1e-3], got {fd_step}.")
    X = as_points(points)
    n, dim = X.shape
    offsets = fd_step * np.eye(dim)
    probes = np.concatenate([X[:, None, :] + offsets[None, :, :], X[:, None, :] - offsets[None, :, :]], axis=1)
    images = flow(t, wrap_array(probes.reshape(-1, dim))).reshape(n, 2 * dim, dim)
    columns = displacement_array(images[:, dim:, :], images[:, :dim, :]) / (2.0 * fd_step)
    # columns[i, k] is d(flow)/dx_k, so the Jacobian is its transpose
    return np.linalg.det(np.transpose(columns, (0, 2, 1)))


def jacobian_determinant(flow: FlowEvaluator, t: float, x, fd_step: float = 1e-5) -> float:
    return float(jacobian_determinants(flow, t, as_points(x), fd_step)[0])


@dataclass(frozen=True)
class BiLipschitzBounds:
    max_ratio: float
    min_ratio: float
    n_pairs: int
    n_skipped: int


def bilipschitz_probe(flow: FlowEvaluator, t: float, first, second) -> BiLipschitzBounds:
    """Extreme distance ratios d(flow(x), flow(y)) / d(x, y) over the pairs (first[k], second[k])."""
    X, Y = as_points(first), as_points(second)
    if X.shape != Y.shape:
        raise InvalidInputError(f"Pair arrays differ in shape: {X.shape} vs {Y.shape}.")
    before = distance_array(X, Y)
    distinct = before > 1e-15
    skipped = int(np.sum(~distinct))
    if skipped:
        logger.warning(f"Skipped {skipped} coincident pairs in the bi-Lipschitz probe")
    if not np.any(distinct):
        raise InvalidInputError("Every probed pair is coincident.")

    X, Y, before = X[distinct], Y[distinct], before[distinct]
    images = flow(t, np.vstack([X, Y]))
    after = distance_array(images[:len(X)], images[len(X):])
    ratios = after / before
    return BiLipschitzBounds(max_ratio=float(np.max(ratios)), min_ratio=float(np.min(ratios)),
                             n_pairs=int(len(ratios)), n_skipped=skipped)


@dataclass(frozen=True)
class DiscrepancyNorms:
    lp_norm: float
    log_lp_norm: float
    lp_stderr: float
    log_lp_stderr: float
    n_mc: int


def _lp_with_stderr(values: np.ndarray, p: float):
    if math.isinf(p):
        return float(np.max(values)), 0.0
    powered = values ** p
    mean = float(np.mean(powered))
    stderr_mean = float(np.std(powered, ddof=1) / math.sqrt(len(powered)))
    norm = mean ** (1.0 / p)
    # delta method for mean^(1/p)
    stderr = (1.0 / p) * mean ** (1.0 / p - 1.0) * stderr_mean if mean > 0.0 else 0.0
    return norm, stderr


def discrepancy_norms(
    flow_a: FlowEvaluator,
    flow_b: FlowEvaluator,
    t: float,
    p: float,
    scale: float,
    n_mc: int = 4096,
    dim: int = 2,
    seed: int = 0,
) -> DiscrepancyNorms:
    """Scrambled-Halton estimates of ||d(A, B)||_p and ||log(1 + d(A, B)/scale)||_p over the torus."""
    if n_mc < 1000:
        raise InvalidInputError(f"n_mc must be at least 1000, got {n_mc}.")
    if scale <= 0.0:
        raise InvalidInputError(f"scale must be positive, got {scale}.")
    if p < 1.0:
        raise InvalidInputError(f"Exponent p must be at least 1, got {p}.")

    X = qmc.Halton(d=dim, scramble=True, seed=seed).random(n_mc)
    gap = distance_array(flow_a(t, X), flow_b(t, X))
    lp, lp_err = _lp_with_stderr(gap, p)
    log_lp, log_err = _lp_with_stderr(np.log1p(gap / scale), p)
    logger.debug(f"Discrepancy at t={t:g}: L^{p:g}={lp:.6g} (+-{lp_err:.2g}), log={log_lp:.6g} (+-{log_err:.2g})")
    return DiscrepancyNorms(lp_norm=lp, log_lp_norm=log_lp, lp_stderr=lp_err, log_lp_stderr=log_err, n_mc=n_mc)
