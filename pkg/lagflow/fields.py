"""Velocity fields on the torus: catalog, grid-sampled fields, mollification and time averages.

Every field is evaluated in vectorized form, ``field.evaluate(t, X)`` with X of
shape (n, d), and exposes regularity metadata (declared Sobolev exponent p,
sup-norm bound, bound on the negative part of the divergence).
"""
import itertools
import math

from dataclasses import dataclass, field as dataclass_field, replace
from functools import lru_cache
from typing import Any, Callable, Dict, Optional, Sequence, Tuple, Union

import numpy as np

from scipy import integrate, special

from lagflow.errors import InvalidInputError
from lagflow.io_utils import read_grid_samples, write_grid_samples
from lagflow.log import get_logger
from lagflow.torus import TorusPoint, as_points, displacement_array, wrap_array


logger = get_logger()

FieldFunction = Callable[[float, np.ndarray], np.ndarray]

FIELD_KINDS = ("analytic", "grid_sampled", "mollified")
KERNEL_PROFILES = ("bump", "truncated_gaussian")
CATALOG_NAMES = ("constant", "shear_sine", "rigid_rotation_patch", "radial_vortex", "sampled_random_divfree")

# Truncated gaussian: 4 standard deviations fit in the unit ball
_GAUSSIAN_STD = 0.25
_TIME_TOLERANCE = 1e-12


@dataclass(frozen=True)
class FieldMetadata:
    """Declared regularity of a velocity field."""
    name: str
    p: float
    sup_norm: float
    div_minus_bound: float = 0.0
    divergence_free: bool = False
    rough: bool = False
    autonomous: bool = True


@dataclass(frozen=True)
class MollifierKernel:
    """Radial unit-mass kernel supported in the closed unit ball of R^d."""
    profile: str
    dim: int
    normalization: float

    def density(self, z: np.ndarray) -> np.ndarray:
        """Kernel value at unscaled points z of shape (n, d)."""
        r2 = np.sum(np.atleast_2d(z) ** 2, axis=1)
        return self.normalization * _radial_profile(self.profile, r2)


def _radial_profile(profile: str, r2: np.ndarray) -> np.ndarray:
    r2 = np.asarray(r2, dtype=float)
    out = np.zeros_like(r2)
    inside = r2 < 1.0
    if profile == "bump":
        out[inside] = np.exp(-1.0 / (1.0 - r2[inside]))
    else:
        out[inside] = np.exp(-r2[inside] / (2.0 * _GAUSSIAN_STD ** 2))
    return out


def _sphere_area(dim: int) -> float:
    return 2.0 * math.pi ** (dim / 2.0) / special.gamma(dim / 2.0)


@lru_cache(maxsize=None)
def make_kernel(profile: str = "bump", dim: int = 2) -> MollifierKernel:
    """Build a normalized mollifier; the unit mass is re-checked with an independent rule."""
    if profile not in KERNEL_PROFILES:
        raise InvalidInputError(f"Unknown mollifier profile '{profile}', expected one of {KERNEL_PROFILES}.")
    if dim < 1:
        raise InvalidInputError(f"Kernel dimension must be positive, got {dim}.")

    def radial(r):
        return float(_radial_profile(profile, np.array([r * r]))[0]) * r ** (dim - 1)

    raw, _ = integrate.quad(radial, 0.0, 1.0, epsabs=1e-15, epsrel=1e-13, limit=200)
    normalization = 1.0 / (_sphere_area(dim) * raw)

    nodes, weights = np.polynomial.legendre.leggauss(400)
    r = 0.5 * (nodes + 1.0)
    check = 0.5 * np.sum(weights * _radial_profile(profile, r * r) * r ** (dim - 1))
    mass = normalization * _sphere_area(dim) * check
    if abs(mass - 1.0) > 1e-10:
        raise InvalidInputError(f"Kernel '{profile}' in d={dim} integrates to {mass!r}, not 1.")

    logger.debug(f"Mollifier '{profile}' (d={dim}) normalization {normalization:.12g}")
    return MollifierKernel(profile=profile, dim=dim, normalization=normalization)


@dataclass(frozen=True, eq=False)
class VelocityField:
    """Immutable time-dependent velocity field on the d-torus over [0, horizon]."""
    kind: str
    dim: int
    horizon: float
    metadata: FieldMetadata
    params: Dict[str, Any] = dataclass_field(default_factory=dict)
    func: Optional[FieldFunction] = None
    samples: Optional[np.ndarray] = None
    base: Optional["VelocityField"] = None
    delta: Optional[float] = None
    kernel: Optional[MollifierKernel] = None
    quad_points_per_axis: Optional[int] = None
    _nodes: Optional[np.ndarray] = dataclass_field(default=None, repr=False)
    _weights: Optional[np.ndarray] = dataclass_field(default=None, repr=False)

    def check_time(self, t: float) -> float:
        if not (-_TIME_TOLERANCE <= t <= self.horizon + _TIME_TOLERANCE):
            raise InvalidInputError(f"Time {t} outside [0, {self.horizon}] for field '{self.metadata.name}'.")
        return min(max(t, 0.0), self.horizon)

    def evaluate(self, t: float, points: np.ndarray) -> np.ndarray:
        """Velocities at points of shape (n, d) at time t."""
        t = self.check_time(float(t))
        X = wrap_array(np.array(points, dtype=float, ndmin=2))
        if self.kind == "analytic":
            return np.asarray(self.func(t, X), dtype=float).reshape(X.shape)
        if self.kind == "grid_sampled":
            return _interpolate_grid(self, t, X)
        return _evaluate_mollified(self, t, X)


def evaluate(field: VelocityField, t: float, x: Union[TorusPoint, Sequence[float]]) -> np.ndarray:
    """Velocity vector of the field at time t and torus point x."""
    X = as_points(x, field.dim)
    return field.evaluate(t, X)[0]


# --- Constructors -----------------------------------------------------------------------------

def analytic_field(
    name: str,
    dim: int,
    func: FieldFunction,
    sup_norm: float,
    p: float = math.inf,
    div_minus_bound: float = 0.0,
    divergence_free: bool = False,
    rough: bool = False,
    autonomous: bool = False,
    horizon: float = 1.0,
    params: Optional[Dict[str, Any]] = None,
) -> VelocityField:
    """Wrap a closed-form vectorized function func(t, X) -> (n, d) as a field."""
    if p <= 1:
        raise InvalidInputError(f"Declared Sobolev exponent must exceed 1, got {p}.")
    if sup_norm < 0 or div_minus_bound < 0:
        raise InvalidInputError("Sup-norm and divergence bounds must be non-negative.")
    if horizon <= 0:
        raise InvalidInputError(f"Horizon must be positive, got {horizon}.")
    metadata = FieldMetadata(
        name=name,
        p=float(p),
        sup_norm=float(sup_norm),
        div_minus_bound=float(div_minus_bound),
        divergence_free=divergence_free,
        rough=rough,
        autonomous=autonomous,
    )
    return VelocityField(kind="analytic", dim=dim, horizon=float(horizon), metadata=metadata,
                         params=dict(params or {}), func=func)


def grid_field(
    samples: np.ndarray,
    horizon: float = 1.0,
    name: str = "grid",
    p: float = math.inf,
    divergence_free: bool = False,
) -> VelocityField:
    """Field from periodic samples of shape (N_t, N_1, ..., N_d, d), time-major.

    Interpolation is multilinear in space and piecewise constant on the N_t time slabs.
    """
    samples = np.array(samples, dtype=float)
    if samples.ndim < 3:
        raise InvalidInputError(f"Grid samples need shape (N_t, N_1..N_d, d), got {samples.shape}.")
    dim = samples.shape[-1]
    if samples.ndim != dim + 2:
        raise InvalidInputError(f"Sample array of shape {samples.shape} does not match d={dim}.")
    if not np.all(np.isfinite(samples)):
        raise InvalidInputError("Grid samples must be finite.")
    if min(samples.shape[1:-1]) < 2:
        raise InvalidInputError("Each spatial axis needs at least two samples.")

    sup_norm = float(np.max(np.linalg.norm(samples, axis=-1)))
    metadata = FieldMetadata(
        name=name,
        p=float(p),
        sup_norm=sup_norm,
        div_minus_bound=_grid_div_minus(samples),
        divergence_free=divergence_free,
        rough=False,
        autonomous=samples.shape[0] == 1,
    )
    samples.setflags(write=False)
    return VelocityField(kind="grid_sampled", dim=dim, horizon=float(horizon), metadata=metadata,
                         params={"resolution": list(samples.shape[1:-1]), "time_slabs": samples.shape[0]},
                         samples=samples)


def load_grid_field(path: str, name: Optional[str] = None, p: float = math.inf) -> VelocityField:
    """Load a grid-sampled field from a LAGF1 binary file."""
    samples, horizon = read_grid_samples(path)
    logger.info(f"Loaded grid field {path}: shape {samples.shape}, T={horizon}")
    return grid_field(samples, horizon=horizon, name=name or path, p=p)


def save_grid_field(field: VelocityField, path: str):
    """Write a grid-sampled field to a LAGF1 binary file."""
    if field.kind != "grid_sampled":
        raise InvalidInputError(f"Only grid-sampled fields can be saved, got '{field.kind}'.")
    write_grid_samples(path, field.samples, field.horizon)


def mollify(
    field: VelocityField,
    delta: float,
    kernel: Optional[MollifierKernel] = None,
    quad_points_per_axis: int = 8,
) -> VelocityField:
    """Space-only convolution u_delta = eta_delta * u by tensor-product midpoint quadrature.

    The discrete kernel weights are renormalized to sum to one, so constants are
    reproduced exactly and the sup-norm never grows.
    """
    if not (0.0 < delta <= 0.25):
        raise InvalidInputError(f"Mollification radius must lie in (0, 1/4], got {delta}.")
    if quad_points_per_axis < 8:
        raise InvalidInputError(f"Need at least 8 quadrature points per axis, got {quad_points_per_axis}.")
    kernel = kernel or make_kernel("bump", field.dim)
    if kernel.dim != field.dim:
        raise InvalidInputError(f"Kernel dimension {kernel.dim} does not match field dimension {field.dim}.")

    ticks = -1.0 + (2.0 * np.arange(quad_points_per_axis) + 1.0) / quad_points_per_axis
    nodes = np.array(list(itertools.product(ticks, repeat=field.dim)), dtype=float)
    weights = kernel.density(nodes)
    keep = weights > 0.0
    nodes, weights = nodes[keep], weights[keep]
    weights = weights / np.sum(weights)

    metadata = replace(field.metadata, name=f"{field.metadata.name}*eta[{delta:g}]", rough=False)
    logger.debug(f"Mollified '{field.metadata.name}' with delta={delta:g} using {len(nodes)} kernel nodes")
    return VelocityField(kind="mollified", dim=field.dim, horizon=field.horizon, metadata=metadata,
                         params={"profile": kernel.profile}, base=field, delta=float(delta), kernel=kernel,
                         quad_points_per_axis=quad_points_per_axis, _nodes=nodes, _weights=weights)


def time_averaged_velocity_many(
    field: VelocityField,
    t_a: float,
    t_b: float,
    points: np.ndarray,
    n_quad: int = 1,
) -> np.ndarray:
    """Composite-midpoint approximation of the time average of u over [t_a, t_b] at each point."""
    if not t_a < t_b:
        raise InvalidInputError(f"Empty averaging window [{t_a}, {t_b}].")
    if n_quad < 1:
        raise InvalidInputError(f"n_quad must be at least 1, got {n_quad}.")
    field.check_time(t_a)
    field.check_time(t_b)
    if field.metadata.autonomous:
        return field.evaluate(t_a, points)

    width = (t_b - t_a) / n_quad
    total = None
    for k in range(n_quad):
        v = field.evaluate(t_a + (k + 0.5) * width, points)
        total = v if total is None else total + v
    return total / n_quad


def time_averaged_velocity(
    field: VelocityField,
    t_a: float,
    t_b: float,
    x: Union[TorusPoint, Sequence[float]],
    n_quad: int = 1,
) -> np.ndarray:
    return time_averaged_velocity_many(field, t_a, t_b, as_points(x, field.dim), n_quad)[0]


def default_delta(field: VelocityField, dt: float) -> Optional[float]:
    """sqrt(dt) when 1 < p <= d, no mollification when p > d."""
    if field.metadata.p <= field.dim:
        return math.sqrt(dt)
    return None


# --- Catalog -------------------------------------------------------------------------------------

def catalog_field(name: str, params: Optional[Dict[str, Any]] = None) -> VelocityField:
    """Build one of the test fields: constant, shear_sine, rigid_rotation_patch,
    radial_vortex (parameter alpha) or sampled_random_divfree (seed, N_x).
    """
    params = dict(params or {})
    builders = {
        "constant": _constant,
        "shear_sine": _shear_sine,
        "rigid_rotation_patch": _rigid_rotation_patch,
        "radial_vortex": _radial_vortex,
        "sampled_random_divfree": _sampled_random_divfree,
    }
    if name not in builders:
        raise InvalidInputError(f"Unknown catalog field '{name}', expected one of {CATALOG_NAMES}.")
    field = builders[name](params)
    logger.debug(f"Catalog field '{name}' built with params {params}: {field.metadata}")
    return field


def _horizon(params: Dict[str, Any]) -> float:
    return float(params.get("horizon", 1.0))


def _constant(params: Dict[str, Any]) -> VelocityField:
    c = np.asarray(params.get("velocity", (0.3, 0.0)), dtype=float).ravel()
    if c.size < 1 or not np.all(np.isfinite(c)):
        raise InvalidInputError(f"Constant field needs a finite velocity, got {c}.")

    def func(t, X):
        return np.broadcast_to(c, X.shape).copy()

    return analytic_field("constant", c.size, func, sup_norm=float(np.linalg.norm(c)), divergence_free=True,
                          autonomous=True, horizon=_horizon(params), params={"velocity": c.tolist()})


def _shear_sine(params: Dict[str, Any]) -> VelocityField:
    dim = int(params.get("dim", 2))
    amplitude = float(params.get("amplitude", 1.0))
    wavenumber = int(params.get("wavenumber", 1))
    if dim < 2:
        raise InvalidInputError("shear_sine needs d >= 2.")

    def func(t, X):
        out = np.zeros_like(X)
        out[:, 0] = amplitude * np.sin(2.0 * np.pi * wavenumber * X[:, 1])
        return out

    return analytic_field("shear_sine", dim, func, sup_norm=abs(amplitude), divergence_free=True, autonomous=True,
                          horizon=_horizon(params),
                          params={"amplitude": amplitude, "wavenumber": wavenumber})


def smooth_step(s: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """C-infinity step from 0 (s <= 0) to 1 (s >= 1) and its derivative."""
    s = np.asarray(s, dtype=float)
    value = np.where(s >= 1.0, 1.0, 0.0)
    slope = np.zeros_like(s)
    mid = (s > 0.0) & (s < 1.0)
    sm = s[mid]
    a = np.exp(-1.0 / sm)
    b = np.exp(-1.0 / (1.0 - sm))
    value[mid] = a / (a + b)
    slope[mid] = a * b * (1.0 / sm ** 2 + 1.0 / (1.0 - sm) ** 2) / (a + b) ** 2
    return value, slope


def radial_cutoff(r: np.ndarray, r_in: float, r_out: float) -> Tuple[np.ndarray, np.ndarray]:
    """chi(r) = 1 for r <= r_in, 0 for r >= r_out, smooth in between; returns (chi, chi')."""
    step, slope = smooth_step((np.asarray(r, dtype=float) - r_in) / (r_out - r_in))
    return 1.0 - step, -slope / (r_out - r_in)


def _center(params: Dict[str, Any]) -> np.ndarray:
    center = wrap_array(np.asarray(params.get("center", (0.5, 0.5)), dtype=float).ravel())
    if center.size != 2:
        raise InvalidInputError("Planar vortex fields need a 2D center.")
    return center


def _rotate(rel: np.ndarray) -> np.ndarray:
    return np.stack([-rel[:, 1], rel[:, 0]], axis=1)


def _radial_sup(profile: Callable[[np.ndarray], np.ndarray], r_max: float) -> float:
    r = np.linspace(0.0, r_max, 20001)
    return float(np.max(np.abs(profile(r)))) * (1.0 + 1e-6)


def _rigid_rotation_patch(params: Dict[str, Any]) -> VelocityField:
    omega = float(params.get("omega", 2.0 * np.pi))
    r0 = float(params.get("r0", 0.25))
    r1 = float(params.get("r1", 0.45))
    center = _center(params)
    if not (0.0 < r0 < r1 < 0.5):
        raise InvalidInputError(f"rigid_rotation_patch needs 0 < r0 < r1 < 1/2, got r0={r0}, r1={r1}.")

    def func(t, X):
        rel = displacement_array(center, X)
        r = np.linalg.norm(rel, axis=1)
        chi, _ = radial_cutoff(r, r0, r1)
        return omega * chi[:, None] * _rotate(rel)

    def speed(r):
        return omega * r * radial_cutoff(r, r0, r1)[0]

    return analytic_field("rigid_rotation_patch", 2, func, sup_norm=_radial_sup(speed, r1), divergence_free=True,
                          autonomous=True, horizon=_horizon(params),
                          params={"omega": omega, "r0": r0, "r1": r1, "center": center.tolist()})


def rigid_rotation_exact(field: VelocityField, t: float, points: np.ndarray) -> np.ndarray:
    """Closed-form flow of rigid_rotation_patch: each point turns at angular speed omega*chi(r)."""
    if field.metadata.name != "rigid_rotation_patch":
        raise InvalidInputError(f"Closed-form flow is only known for rigid_rotation_patch, not '{field.metadata.name}'.")
    center = np.asarray(field.params["center"])
    X = as_points(points, 2)
    rel = displacement_array(center, X)
    r = np.linalg.norm(rel, axis=1)
    chi, _ = radial_cutoff(r, field.params["r0"], field.params["r1"])
    angle = field.params["omega"] * chi * t
    c, s = np.cos(angle), np.sin(angle)
    turned = np.stack([c * rel[:, 0] - s * rel[:, 1], s * rel[:, 0] + c * rel[:, 1]], axis=1)
    return wrap_array(center + turned)


def vortex_critical_exponent(alpha: float, dim: int = 2) -> float:
    """Du of the radial vortex lies in L^p exactly for p below this value."""
    return dim / (2.0 - alpha)


def _radial_vortex(params: Dict[str, Any]) -> VelocityField:
    alpha = float(params.get("alpha", 1.5))
    amplitude = float(params.get("amplitude", 1.0))
    r_in = float(params.get("r_in", 0.15))
    r_out = float(params.get("r_out", 0.35))
    center = _center(params)
    if not (1.0 < alpha < 2.0):
        raise InvalidInputError(f"radial_vortex needs 1 < alpha < 2, got {alpha}.")
    if not (0.0 < r_in < r_out < 0.5):
        raise InvalidInputError(f"radial_vortex needs 0 < r_in < r_out < 1/2, got {r_in}, {r_out}.")
    p_max = vortex_critical_exponent(alpha)
    p = float(params.get("p", 0.5 * (1.0 + p_max)))

    def profile_derivative(r):
        # f(r) = r^alpha chi(r), psi = amplitude * f(|x - x0|)
        chi, dchi = radial_cutoff(r, r_in, r_out)
        return amplitude * (alpha * r ** (alpha - 1.0) * chi + r ** alpha * dchi)

    def func(t, X):
        rel = displacement_array(center, X)
        r = np.linalg.norm(rel, axis=1)
        scale = np.zeros_like(r)
        pos = r > 0.0
        scale[pos] = profile_derivative(r[pos]) / r[pos]
        return scale[:, None] * _rotate(rel)

    return analytic_field("radial_vortex", 2, func, sup_norm=_radial_sup(profile_derivative, r_out), p=p,
                          divergence_free=True, rough=True, autonomous=True, horizon=_horizon(params),
                          params={"alpha": alpha, "amplitude": amplitude, "r_in": r_in, "r_out": r_out,
                                  "center": center.tolist(), "p_max": p_max})


def _sampled_random_divfree(params: Dict[str, Any]) -> VelocityField:
    seed = int(params.get("seed", 0))
    n_x = int(params.get("N_x", 64))
    modes = int(params.get("modes", 3))
    speed = float(params.get("amplitude", 0.5))
    if modes < 1:
        raise InvalidInputError(f"sampled_random_divfree needs at least one mode, got {modes}.")
    if n_x < 2 * modes + 2:
        raise InvalidInputError(f"sampled_random_divfree needs N_x >= {2 * modes + 2} for {modes} modes, got {n_x}.")

    # stream function sampled on the N_x grid
    rng = np.random.default_rng(seed)
    ticks = np.arange(n_x) / n_x
    x1, x2 = np.meshgrid(ticks, ticks, indexing="ij")
    psi = np.zeros((n_x, n_x))
    for k1 in range(-modes, modes + 1):
        for k2 in range(0, modes + 1):
            if k2 == 0 and k1 <= 0:
                continue
            a, b = rng.normal(size=2) / (k1 * k1 + k2 * k2)
            phase = 2.0 * np.pi * (k1 * x1 + k2 * x2)
            psi += a * np.cos(phase) + b * np.sin(phase)

    # trigonometric interpolant of the samples; u = (-d2 psi, d1 psi) term by term
    coeffs = np.fft.fft2(psi) / n_x ** 2
    freqs = np.fft.fftfreq(n_x, d=1.0 / n_x)
    k1, k2 = np.meshgrid(freqs, freqs, indexing="ij")
    keep = (np.abs(coeffs) > 1e-14 * np.max(np.abs(coeffs))) & (np.abs(k1) < n_x / 2) & (np.abs(k2) < n_x / 2)
    wavenumbers = np.stack([k1[keep], k2[keep]], axis=1)
    gradient = 2j * np.pi * coeffs[keep][:, None] * wavenumbers
    velocity = np.stack([-gradient[:, 1], gradient[:, 0]], axis=1)
    # sum of coefficient norms bounds the sup norm
    velocity *= speed / np.sum(np.linalg.norm(velocity, axis=1))

    def func(t, X):
        return np.real(np.exp(2j * np.pi * (X @ wavenumbers.T)) @ velocity)

    return analytic_field("sampled_random_divfree", 2, func, sup_norm=speed, divergence_free=True, autonomous=True,
                          horizon=_horizon(params),
                          params={"seed": seed, "N_x": n_x, "modes": modes, "amplitude": speed,
                                  "n_terms": int(len(wavenumbers))})


def sample_grid(field: VelocityField, resolution: int, n_t: int = 1) -> np.ndarray:
    """Velocity samples of any field on a periodic grid, time-major, ready for ``grid_field``."""
    if resolution < 2 or n_t < 1:
        raise InvalidInputError(f"Need resolution >= 2 and n_t >= 1, got {resolution} and {n_t}.")
    ticks = np.arange(resolution) / resolution
    X = np.stack(np.meshgrid(*([ticks] * field.dim), indexing="ij"), axis=-1).reshape(-1, field.dim)
    slabs = [field.evaluate((k + 0.5) * field.horizon / n_t, X) for k in range(n_t)]
    return np.stack(slabs).reshape((n_t,) + (resolution,) * field.dim + (field.dim,))


# --- Evaluation kernels --------------------------------------------------------------------------

def _interpolate_grid(field: VelocityField, t: float, X: np.ndarray) -> np.ndarray:
    samples = field.samples
    n_t = samples.shape[0]
    slab = samples[min(int(t / field.horizon * n_t), n_t - 1)]
    resolution = np.array(slab.shape[:-1])
    scaled = X * resolution
    lower = np.floor(scaled).astype(int)
    frac = scaled - lower
    lower %= resolution

    out = np.zeros_like(X)
    for corner in itertools.product((0, 1), repeat=field.dim):
        index = tuple((lower[:, k] + corner[k]) % resolution[k] for k in range(field.dim))
        weight = np.ones(len(X))
        for k, c in enumerate(corner):
            weight *= frac[:, k] if c else 1.0 - frac[:, k]
        out += weight[:, None] * slab[index]

    norms = np.linalg.norm(out, axis=1)
    over = norms > field.metadata.sup_norm
    if np.any(over):
        out[over] *= (field.metadata.sup_norm / norms[over])[:, None]
    return out


def _grid_div_minus(samples: np.ndarray) -> float:
    """Largest negative divergence of the multilinear interpolant; it is attained at cell corners."""
    dim = samples.shape[-1]
    resolution = samples.shape[1:-1]
    worst = 0.0
    for slab in samples:
        for corner in itertools.product((0, 1), repeat=dim):
            div = np.zeros(resolution)
            for k in range(dim):
                forward = np.roll(slab[..., k], -1, axis=k) - slab[..., k]
                # the k-th partial derivative is constant along axis k inside a cell
                for j, c in enumerate(corner):
                    if j != k and c:
                        forward = np.roll(forward, -1, axis=j)
                div += forward * resolution[k]
            worst = max(worst, float(np.max(-div)))
    return worst


def _evaluate_mollified(field: VelocityField, t: float, X: np.ndarray) -> np.ndarray:
    nodes, weights = field._nodes, field._weights
    shifted = wrap_array(X[:, None, :] - field.delta * nodes[None, :, :]).reshape(-1, field.dim)
    values = field.base.evaluate(t, shifted).reshape(len(X), len(nodes), field.dim)
    return np.einsum("m,nmd->nd", weights, values)
