import hashlib
import json
import math
import os

from dataclasses import asdict, dataclass, field as dataclass_field
from typing import Any, Dict, List, Optional, Sequence, Tuple

from lagflow.errors import ConfigError
from lagflow.fields import CATALOG_NAMES, KERNEL_PROFILES
from lagflow.flow import DELTA_RULES
from lagflow.log import get_logger
from lagflow.mesh import MESH_KINDS, SAMPLING_MODES
from lagflow.solver import AGGREGATES, DENSITY_NAMES, SCHEMES


logger = get_logger()

DEFAULT_WORKERS = 1
METRIC_CHOICES = ("w1", "log")
H_RULES = ("max_dt_dx", "explicit")
PAIRINGS = ("diagonal", "product")
REFERENCE_KINDS = ("rk4", "self")

# Keys left out of the hash: they change where and how fast, never what is computed
_UNHASHED_KEYS = ("output_dir", "workers")


def get_worker_budget(default: int = DEFAULT_WORKERS) -> int:
    """Worker budget from LAGFLOW_WORKERS."""
    raw = os.environ.get("LAGFLOW_WORKERS")
    if raw is None:
        return default
    try:
        workers = int(raw)
    except ValueError:
        raise ConfigError(f"LAGFLOW_WORKERS must be an integer, got '{raw}'.", key="LAGFLOW_WORKERS")
    if workers < 1:
        raise ConfigError(f"LAGFLOW_WORKERS must be at least 1, got {workers}.", key="LAGFLOW_WORKERS")
    return workers


@dataclass(frozen=True)
class FieldSpec:
    name: str
    params: Dict[str, Any] = dataclass_field(default_factory=dict)
    path: Optional[str] = None
    p: Optional[float] = None


@dataclass(frozen=True)
class MeshSpec:
    kind: str = "cartesian"
    d: int = 2
    jitter: float = 0.0
    seed: int = 0


@dataclass(frozen=True)
class DensitySpec:
    name: str = "uniform"
    params: Dict[str, Any] = dataclass_field(default_factory=dict)


@dataclass(frozen=True)
class MetricSpec:
    kind: str = "w1"
    alpha: float = 0.5
    h_rule: str = "max_dt_dx"
    h: Optional[float] = None


@dataclass(frozen=True)
class FlowSpec:
    T: float = 1.0
    delta_rule: str = "auto"
    delta: Optional[float] = None
    n_quad_time: int = 1
    kernel_profile: str = "bump"
    quad_points_per_axis: int = 8


@dataclass(frozen=True)
class SweepSpec:
    """Dyadic levels: dt = 2^-L for every dt level, N = 2^L cells per axis for every dx level."""
    dt_levels: Tuple[int, ...]
    dx_levels: Tuple[int, ...]
    pairing: str = "diagonal"

    def pairs(self) -> List[Tuple[int, int]]:
        if self.pairing == "diagonal":
            return list(zip(self.dt_levels, self.dx_levels))
        return [(a, b) for a in self.dt_levels for b in self.dx_levels]


@dataclass(frozen=True)
class ReferenceSpec:
    kind: str = "rk4"
    n_particles: Optional[int] = None
    particles_per_atom: int = 16
    dt_factor: int = 16
    dt_level: Optional[int] = None
    dx_level: Optional[int] = None
    master_seed: int = 0
    quad_per_cell: int = 4


@dataclass(frozen=True)
class ExperimentConfig:
    field: FieldSpec
    mesh: MeshSpec
    rho0: DensitySpec
    scheme: str
    metric: MetricSpec
    flow: FlowSpec
    sweep: SweepSpec
    n_reps: int = 1
    base_seed: int = 0
    aggregate: str = "per_rep"
    sample_times: Tuple[float, ...] = (0.0, 1.0)
    reference: ReferenceSpec = ReferenceSpec()
    quad_per_cell: int = 64
    diffuse_quad_per_cell: int = 16
    rep_mode: str = "uniform"
    diagnostics: bool = False
    save_snapshots: bool = False
    output_dir: str = "lagflow_run"
    workers: Optional[int] = None


_SECTIONS = {
    "field": (FieldSpec, {"name", "params", "path", "p"}),
    "mesh": (MeshSpec, {"kind", "d", "jitter", "seed"}),
    "rho0": (DensitySpec, {"name", "params"}),
    "metric": (MetricSpec, {"kind", "alpha", "h_rule", "h"}),
    "flow": (FlowSpec, {"T", "delta_rule", "delta", "n_quad_time", "kernel_profile", "quad_points_per_axis"}),
    "sweep": (SweepSpec, {"dt_levels", "dx_levels", "pairing"}),
    "reference": (ReferenceSpec, {"kind", "n_particles", "particles_per_atom", "dt_factor", "dt_level", "dx_level",
                                  "master_seed", "quad_per_cell"}),
}
_TOP_LEVEL = set(_SECTIONS) | {"scheme", "n_reps", "base_seed", "aggregate", "sample_times", "quad_per_cell",
                               "diffuse_quad_per_cell", "rep_mode", "diagnostics", "save_snapshots", "output_dir",
                               "workers"}
_REQUIRED = ("field", "scheme", "sweep")


def _reject_duplicates(pairs):
    seen = {}
    for key, value in pairs:
        if key in seen:
            raise ConfigError(f"Duplicate key '{key}'.", key=key)
        seen[key] = value
    return seen


def _section(payload: Dict[str, Any], name: str):
    cls, allowed = _SECTIONS[name]
    raw = payload.get(name, {})
    if not isinstance(raw, dict):
        raise ConfigError(f"Section '{name}' must be a JSON object.", key=name)
    for key in raw:
        if key not in allowed:
            raise ConfigError(f"Unknown key '{name}.{key}'.", key=f"{name}.{key}")
    try:
        return cls(**raw)
    except TypeError as e:
        raise ConfigError(f"Section '{name}' is incomplete: {e}", key=name)


def _require(condition: bool, key: str, message: str):
    if not condition:
        raise ConfigError(f"{key}: {message}", key=key)


def _is_int(value) -> bool:
    return isinstance(value, int) and not isinstance(value, bool)


def _is_number(value) -> bool:
    return isinstance(value, (int, float)) and not isinstance(value, bool) and math.isfinite(value)


def parse_config(payload: Dict[str, Any]) -> ExperimentConfig:
    """Validate a decoded configuration object; every violation names its key."""
    if not isinstance(payload, dict):
        raise ConfigError("Configuration must be a JSON object.")
    for key in payload:
        if key not in _TOP_LEVEL:
            raise ConfigError(f"Unknown key '{key}'.", key=key)
    for key in _REQUIRED:
        if key not in payload:
            raise ConfigError(f"Missing required key '{key}'.", key=key)

    field = _section(payload, "field")
    mesh = _section(payload, "mesh")
    rho0 = _section(payload, "rho0")
    metric = _section(payload, "metric")
    flow = _section(payload, "flow")
    sweep = _section(payload, "sweep")
    reference = _section(payload, "reference")

    _require(field.name in CATALOG_NAMES or field.name == "grid_sampled", "field.name",
             f"unknown field '{field.name}', expected one of {CATALOG_NAMES + ('grid_sampled',)}")
    _require(field.name != "grid_sampled" or isinstance(field.path, str), "field.path",
             "grid_sampled fields need a file path")
    _require(isinstance(field.params, dict), "field.params", "must be an object")
    _require(field.p is None or (_is_number(field.p) and field.p > 1.0), "field.p", "declared exponent must exceed 1")

    _require(mesh.kind in MESH_KINDS, "mesh.kind", f"expected one of {MESH_KINDS}")
    _require(_is_int(mesh.d) and 1 <= mesh.d <= 3, "mesh.d", "dimension must be 1, 2 or 3")
    _require(_is_number(mesh.jitter) and 0.0 <= mesh.jitter < 0.5, "mesh.jitter", "must lie in [0, 1/2)")
    _require(_is_int(mesh.seed), "mesh.seed", "must be an integer")

    _require(rho0.name in DENSITY_NAMES, "rho0.name", f"expected one of {DENSITY_NAMES}")
    _require(isinstance(rho0.params, dict), "rho0.params", "must be an object")
    _require(rho0.name != "truncated_singular" or "K" in rho0.params, "rho0.params.K",
             "truncated_singular needs a caller-supplied truncation level K")

    scheme = payload["scheme"]
    _require(scheme in SCHEMES, "scheme", f"expected one of {SCHEMES}")

    _require(metric.kind in METRIC_CHOICES, "metric.kind", f"expected one of {METRIC_CHOICES}")
    _require(_is_number(metric.alpha) and 0.0 <= metric.alpha <= 1.0, "metric.alpha", "must lie in [0, 1]")
    _require(metric.h_rule in H_RULES, "metric.h_rule", f"expected one of {H_RULES}")
    _require(metric.h_rule != "explicit" or (_is_number(metric.h) and metric.h > 0.0), "metric.h",
             "explicit h must be a positive number")

    _require(_is_number(flow.T) and flow.T > 0.0, "flow.T", "must be positive")
    _require(flow.delta_rule in DELTA_RULES, "flow.delta_rule", f"expected one of {DELTA_RULES}")
    _require(flow.delta_rule != "explicit" or (_is_number(flow.delta) and 0.0 < flow.delta <= 0.25), "flow.delta",
             "explicit delta must lie in (0, 1/4]")
    _require(_is_int(flow.n_quad_time) and flow.n_quad_time >= 1, "flow.n_quad_time", "must be a positive integer")
    _require(flow.kernel_profile in KERNEL_PROFILES, "flow.kernel_profile", f"expected one of {KERNEL_PROFILES}")
    _require(_is_int(flow.quad_points_per_axis) and flow.quad_points_per_axis >= 8, "flow.quad_points_per_axis",
             "must be an integer >= 8")

    for name in ("dt_levels", "dx_levels"):
        levels = getattr(sweep, name)
        _require(isinstance(levels, list) and len(levels) >= 1 and all(_is_int(v) and 1 <= v <= 12 for v in levels),
                 f"sweep.{name}", "must be a non-empty list of integer levels in [1, 12]")
    _require(sweep.pairing in PAIRINGS, "sweep.pairing", f"expected one of {PAIRINGS}")
    _require(sweep.pairing != "diagonal" or len(sweep.dt_levels) == len(sweep.dx_levels), "sweep.dx_levels",
             "diagonal pairing needs as many dx levels as dt levels")
    sweep = SweepSpec(dt_levels=tuple(sweep.dt_levels), dx_levels=tuple(sweep.dx_levels), pairing=sweep.pairing)
    if len(sweep.pairs()) < 3:
        logger.warning(f"Only {len(sweep.pairs())} sweep levels; rates need at least 3")

    _require(reference.kind in REFERENCE_KINDS, "reference.kind", f"expected one of {REFERENCE_KINDS}")
    _require(reference.n_particles is None or (_is_int(reference.n_particles) and reference.n_particles >= 16),
             "reference.n_particles", "must be an integer >= 16")
    _require(_is_int(reference.dt_factor) and reference.dt_factor >= 16, "reference.dt_factor", "must be >= 16")
    _require(_is_int(reference.particles_per_atom) and reference.particles_per_atom >= 1,
             "reference.particles_per_atom", "must be a positive integer")
    if reference.kind == "self":
        _require(_is_int(reference.dt_level) and reference.dt_level >= max(sweep.dt_levels), "reference.dt_level",
                 "self-reference needs a dt level at least as fine as every sweep level")
        _require(_is_int(reference.dx_level) and reference.dx_level >= max(sweep.dx_levels), "reference.dx_level",
                 "self-reference needs a dx level at least as fine as every sweep level")

    n_reps = payload.get("n_reps", 1)
    _require(_is_int(n_reps) and n_reps >= 1, "n_reps", "must be a positive integer")
    base_seed = payload.get("base_seed", 0)
    _require(_is_int(base_seed) and base_seed >= 0, "base_seed", "must be a non-negative integer")
    aggregate = payload.get("aggregate", "per_rep")
    _require(aggregate in AGGREGATES, "aggregate", f"expected one of {AGGREGATES}")
    _require(aggregate != "mean_of_n" or n_reps >= 2, "aggregate", "mean_of_n needs n_reps >= 2")

    sample_times = payload.get("sample_times", [0.0, flow.T])
    _require(isinstance(sample_times, list) and len(sample_times) >= 1 and all(_is_number(t) for t in sample_times),
             "sample_times", "must be a non-empty list of numbers")
    _require(all(0.0 <= t <= flow.T for t in sample_times) and sample_times == sorted(sample_times),
             "sample_times", f"must be sorted and inside [0, {flow.T}]")

    quad = payload.get("quad_per_cell", 64)
    _require(_is_int(quad) and quad >= 32, "quad_per_cell", "must be an integer >= 32")
    diffuse_quad = payload.get("diffuse_quad_per_cell", 16)
    _require(_is_int(diffuse_quad) and diffuse_quad >= 1, "diffuse_quad_per_cell", "must be a positive integer")
    rep_mode = payload.get("rep_mode", "uniform")
    _require(rep_mode in SAMPLING_MODES, "rep_mode", f"expected one of {SAMPLING_MODES}")
    for flag in ("diagnostics", "save_snapshots"):
        _require(isinstance(payload.get(flag, False), bool), flag, "must be true or false")
    output_dir = payload.get("output_dir", "lagflow_run")
    _require(isinstance(output_dir, str) and output_dir != "", "output_dir", "must be a non-empty string")
    workers = payload.get("workers")
    _require(workers is None or (_is_int(workers) and workers >= 1), "workers", "must be a positive integer")

    if scheme == "diffuse" and n_reps > 1:
        logger.warning("The diffuse scheme is deterministic; n_reps is ignored")

    return ExperimentConfig(
        field=field, mesh=mesh, rho0=rho0, scheme=scheme, metric=metric, flow=flow, sweep=sweep,
        n_reps=n_reps, base_seed=base_seed, aggregate=aggregate, sample_times=tuple(float(t) for t in sample_times),
        reference=reference, quad_per_cell=quad, diffuse_quad_per_cell=diffuse_quad, rep_mode=rep_mode,
        diagnostics=payload.get("diagnostics", False), save_snapshots=payload.get("save_snapshots", False),
        output_dir=output_dir, workers=workers,
    )


def load_config(path: str) -> ExperimentConfig:
    """Read and validate an experiment configuration file."""
    if not os.path.exists(path):
        raise ConfigError(f"Configuration file not found: {path}", key=path)
    with open(path, "r") as f:
        try:
            payload = json.load(f, object_pairs_hook=_reject_duplicates)
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path} is not valid JSON: {e}")
    config = parse_config(payload)
    logger.debug(f"Configuration loaded from {path}: {config}")
    return config


def config_to_dict(config: ExperimentConfig) -> Dict[str, Any]:
    payload = asdict(config)
    payload["sweep"]["dt_levels"] = list(config.sweep.dt_levels)
    payload["sweep"]["dx_levels"] = list(config.sweep.dx_levels)
    payload["sample_times"] = list(config.sample_times)
    return payload


def config_hash(config: ExperimentConfig) -> str:
    """SHA-256 of the canonical JSON form; key order and omitted defaults do not matter."""
    payload = {k: v for k, v in config_to_dict(config).items() if k not in _UNHASHED_KEYS}
    canonical = json.dumps(payload, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def resolve_workers(config: ExperimentConfig, override: Optional[int] = None) -> int:
    """CLI override, then LAGFLOW_WORKERS, then the config."""
    if override is not None:
        return override
    return get_worker_budget(default=config.workers or DEFAULT_WORKERS)


def level_values(dt_level: int, dx_level: int) -> Tuple[float, int]:
    """(dt, cells per axis) of a dyadic sweep level."""
    return 2.0 ** -dt_level, 2 ** dx_level


def describe_levels(config: ExperimentConfig) -> Sequence[Dict[str, Any]]:
    return [{"dt_level": a, "dx_level": b, "dt": level_values(a, b)[0], "resolution": level_values(a, b)[1]}
            for a, b in config.sweep.pairs()]
