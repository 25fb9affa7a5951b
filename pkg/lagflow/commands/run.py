import argparse
import math
import os
import platform
import threading
import time

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field as dataclass_field, replace
from typing import Any, Dict, List, Optional, Tuple

import numpy as np
import ot
import scipy

import lagflow

from lagflow.config import (
    ExperimentConfig,
    FieldSpec,
    MetricSpec,
    config_hash,
    config_to_dict,
    level_values,
    load_config,
    resolve_workers,
)
from lagflow.errors import ConfigError, InvalidInputError, LagflowError
from lagflow.fields import VelocityField, catalog_field, load_grid_field
from lagflow.flow import FlowConfig
from lagflow.io_utils import ensure_dir, write_csv, write_json
from lagflow.log import get_logger, run_log
from lagflow.mesh import Mesh, build_mesh, cell_masses
from lagflow.solver import (
    InitialDensity,
    ReferenceSolution,
    SelfReference,
    catalog_density,
    error_curve,
    monte_carlo,
    piecewise_constant,
    reference_size,
    reference_solution,
    run_diffuse,
    run_singular,
)
from lagflow.transport import GroundMetric, write_measure


logger = get_logger()

RESULT_COLUMNS = ["scheme", "dt", "dx", "delta", "metric", "alpha", "h", "t", "mean_err", "var_err", "n_reps",
                  "min_det", "runtime_ms"]
EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_RUNTIME = 3


def register_arguments(parser: argparse.ArgumentParser):
    """Register command-line arguments for the run command."""
    parser.add_argument("config", help="Path to the experiment configuration (JSON).")
    parser.add_argument("--output-dir", "-o", default=None, help="Run directory (default: output_dir of the configuration).")
    parser.add_argument("--workers", "-w", type=int, default=None,
                        help="Worker budget for levels and replications. Overrides LAGFLOW_WORKERS and the configuration.")
    parser.add_argument("--debug", action="store_true", default=False, help="Show debug output on the console.")


def build_field(spec: FieldSpec, dim: int, horizon: float = 1.0) -> VelocityField:
    """Velocity field of the configuration, with the declared exponent applied when given."""
    if spec.name == "grid_sampled":
        return load_grid_field(spec.path, p=spec.p if spec.p is not None else math.inf)
    params = dict(spec.params)
    params.setdefault("horizon", horizon)
    if spec.name == "shear_sine":
        params.setdefault("dim", dim)
    if spec.name == "radial_vortex" and spec.p is not None:
        params["p"] = spec.p
    field = catalog_field(spec.name, params)
    if spec.p is not None and field.metadata.p != spec.p:
        field = replace(field, metadata=replace(field.metadata, p=float(spec.p)))
    return field


def build_metric(spec: MetricSpec, dt: float, dx: float) -> GroundMetric:
    if spec.kind == "w1":
        return GroundMetric()
    h = max(dt, dx) if spec.h_rule == "max_dt_dx" else spec.h
    return GroundMetric(kind="logarithmic", alpha=spec.alpha, h=h)


def library_versions() -> Dict[str, str]:
    return {
        "lagflow": lagflow.__version__,
        "numpy": np.__version__,
        "scipy": scipy.__version__,
        "pot": ot.__version__,
        "python": platform.python_version(),
    }


@dataclass
class LevelOutcome:
    index: int
    dt_level: int
    dx_level: int
    dt: float
    status: str = "ok"
    error: Optional[str] = None
    dx: Optional[float] = None
    delta: Optional[float] = None
    rows: List[List[Any]] = dataclass_field(default_factory=list)
    mesh: Dict[str, Any] = dataclass_field(default_factory=dict)
    details: Dict[str, Any] = dataclass_field(default_factory=dict)
    snapshots: List[Any] = dataclass_field(default_factory=list)
    runtime_ms: int = 0

    def to_json(self) -> Dict[str, Any]:
        return {
            "index": self.index,
            "dt_level": self.dt_level,
            "dx_level": self.dx_level,
            "dt": self.dt,
            "dx": self.dx,
            "delta": self.delta,
            "status": self.status,
            "error": self.error,
            "mesh": self.mesh,
            "runtime_ms": self.runtime_ms,
        }


@dataclass
class SweepOutcome:
    run_dir: str
    levels: List[LevelOutcome]
    reference: Dict[str, Any]

    @property
    def exit_code(self) -> int:
        return EXIT_OK if all(level.status == "ok" for level in self.levels) else EXIT_RUNTIME


class Sweep:
    """One experiment: shared field, density, meshes and reference, levels run concurrently."""

    def __init__(self, config: ExperimentConfig, workers: int = 1):
        self.config = config
        self.workers = max(1, workers)
        self.dim = config.mesh.d
        self.field = build_field(config.field, self.dim, config.flow.T)
        if self.field.dim != self.dim:
            raise ConfigError(f"Field '{self.field.metadata.name}' lives in d={self.field.dim}, mesh in d={self.dim}.",
                              key="mesh.d")
        self._check_delta_rule()
        self.rho0: InitialDensity = catalog_density(config.rho0.name, self.dim, config.rho0.params)
        self._meshes: Dict[int, Mesh] = {}
        self._lock = threading.Lock()
        self.reference: Optional[ReferenceSolution] = None
        self.reference_info: Dict[str, Any] = {}

    def _check_delta_rule(self):
        levels = set(self.config.sweep.dt_levels)
        if self.config.reference.kind == "self":
            levels.add(self.config.reference.dt_level)
        for level in sorted(levels):
            try:
                self.flow_config(level_values(level, 1)[0]).resolve_delta(self.field)
            except InvalidInputError as e:
                raise ConfigError(f"sweep.dt_levels: level {level}: {e}", key="sweep.dt_levels") from e

    def mesh(self, dx_level: int) -> Mesh:
        with self._lock:
            if dx_level not in self._meshes:
                _, resolution = level_values(1, dx_level)
                spec = self.config.mesh
                self._meshes[dx_level] = build_mesh(spec.kind, resolution, spec.d, spec.jitter, spec.seed)
            return self._meshes[dx_level]

    def flow_config(self, dt: float) -> FlowConfig:
        spec = self.config.flow
        return FlowConfig(dt=dt, T=spec.T, delta_rule=spec.delta_rule, delta=spec.delta, n_quad_time=spec.n_quad_time,
                          kernel_profile=spec.kernel_profile, quad_points_per_axis=spec.quad_points_per_axis)

    def build_reference(self):
        spec = self.config.reference
        times = self.config.sample_times
        if spec.kind == "self":
            dt, _ = level_values(spec.dt_level, spec.dx_level)
            quad = spec.quad_per_cell if self.config.scheme == "diffuse" else self.config.quad_per_cell
            self_reference = SelfReference(mesh=self.mesh(spec.dx_level), cfg=self.flow_config(dt),
                                           master_seed=spec.master_seed, rep_mode=self.config.rep_mode,
                                           quad_per_cell=quad, scheme=self.config.scheme)
            self.reference = reference_solution(self.field, self.rho0, times, 0, dt, self_reference=self_reference)
            self.reference_info = {"kind": "self", "scheme": self.config.scheme, "dt_level": spec.dt_level,
                                   "dx_level": spec.dx_level, "master_seed": spec.master_seed,
                                   "n_particles": self.reference.n_particles}
            return

        finest = self.mesh(max(self.config.sweep.dx_levels))
        atoms = finest.n_cells
        if self.config.scheme == "diffuse":
            atoms *= self.config.diffuse_quad_per_cell
        n_particles = spec.n_particles or reference_size(atoms, spec.particles_per_atom)
        dt_ref = min(level_values(level, 1)[0] for level in self.config.sweep.dt_levels) / spec.dt_factor
        mass = float(np.sum(cell_masses(finest, self.rho0, self.config.quad_per_cell)))
        self.reference = reference_solution(self.field, self.rho0, times, n_particles, dt_ref, scheme_atoms=atoms,
                                            mass=mass, seed=spec.master_seed)
        self.reference_info = {"kind": "rk4", "n_particles": self.reference.n_particles, "dt_ref": dt_ref,
                               "seed": spec.master_seed}

    def run_level(self, index: int, dt_level: int, dx_level: int, inner_workers: int) -> LevelOutcome:
        dt, _ = level_values(dt_level, dx_level)
        outcome = LevelOutcome(index=index, dt_level=dt_level, dx_level=dx_level, dt=dt)
        started = time.perf_counter()
        logger.info(f"Level {index}: dt=2^-{dt_level}, N=2^{dx_level} started")
        try:
            if self.reference is None:
                raise LagflowError(self.reference_info.get("error", "No reference solution available."))
            mesh = self.mesh(dx_level)
            cfg = self.flow_config(dt)
            metric = build_metric(self.config.metric, dt, mesh.dx)
            outcome.dx = mesh.dx
            outcome.delta = cfg.resolve_delta(self.field)
            outcome.mesh = {"kind": mesh.kind, "n_cells": mesh.n_cells, "max_diameter": mesh.max_diameter,
                            "min_volume_ratio": mesh.volume_ratio}
            stats = self._evaluate(mesh, cfg, metric, inner_workers, outcome)
        except LagflowError as e:
            outcome.status = "failed"
            outcome.error = f"{type(e).__name__}: {e}"
            logger.error(f"Level {index} (dt=2^-{dt_level}, N=2^{dx_level}) failed: {outcome.error}")
            return outcome
        except Exception as e:
            # numpy, scipy or POT errors end the level too, never the sweep
            outcome.status = "failed"
            outcome.error = f"{type(e).__name__}: {e}"
            logger.exception(f"Level {index} (dt=2^-{dt_level}, N=2^{dx_level}) failed unexpectedly: {outcome.error}")
            return outcome

        outcome.runtime_ms = int(round(1000.0 * (time.perf_counter() - started)))
        h = max(dt, outcome.dx)
        alpha = metric.alpha if metric.kind == "logarithmic" else math.nan
        for t, mean_err, var_err, n_reps, min_det in stats:
            outcome.rows.append([self.config.scheme, dt, outcome.dx, outcome.delta or 0.0, metric.label, alpha, h, t,
                                 mean_err, var_err, n_reps, min_det, outcome.runtime_ms])
        logger.info(f"Level {index} finished in {outcome.runtime_ms} ms")
        return outcome

    def _evaluate(self, mesh: Mesh, cfg: FlowConfig, metric: GroundMetric, inner_workers: int,
                  outcome: LevelOutcome) -> List[Tuple[float, float, float, int, float]]:
        config = self.config
        times = config.sample_times
        if config.scheme == "diffuse":
            density = piecewise_constant(mesh, self.rho0, config.quad_per_cell)
            run = run_diffuse(self.field, mesh, density, cfg, times, quad_per_cell=config.diffuse_quad_per_cell)
            curve = error_curve(run, self.reference, metric)
            outcome.details = {"run": run.to_json(), "entropic": any(p.entropic for p in curve)}
            if config.save_snapshots:
                outcome.snapshots = list(run.snapshots)
            return [(p.t, p.distance, 0.0, 1, 1.0) for p in curve]

        if config.n_reps == 1:
            run = run_singular(self.field, mesh, self.rho0, cfg, config.base_seed, times, rep_mode=config.rep_mode,
                               quad_per_cell=config.quad_per_cell, diagnostics=config.diagnostics)
            curve = error_curve(run, self.reference, metric)
            min_det = run.diagnostics.get("min_det", math.nan)
            outcome.details = {"run": run.to_json(), "seeds": [config.base_seed],
                               "entropic": any(p.entropic for p in curve)}
            if config.save_snapshots:
                outcome.snapshots = list(run.snapshots)
            return [(p.t, p.distance, 0.0, 1, min_det) for p in curve]

        summary = monte_carlo(self.field, mesh, self.rho0, cfg, metric, config.n_reps, config.base_seed, times,
                              aggregate=config.aggregate, reference=self.reference, rep_mode=config.rep_mode,
                              quad_per_cell=config.quad_per_cell, workers=inner_workers,
                              diagnostics=config.diagnostics)
        outcome.details = {"monte_carlo": summary.to_json()}
        if config.save_snapshots:
            first = run_singular(self.field, mesh, self.rho0, cfg, config.base_seed, times, rep_mode=config.rep_mode,
                                 quad_per_cell=config.quad_per_cell)
            outcome.snapshots = list(first.snapshots)
        min_det = summary.min_det if summary.min_det is not None else math.nan
        if config.aggregate == "mean_of_n":
            # mean_err is the distance to S_n, var_err the variance of the replication mean
            means, variances = summary.mean_of_n_error, summary.variance / config.n_reps
        else:
            means, variances = summary.mean_error, summary.variance
        return [(t, float(m), float(v), config.n_reps, min_det) for t, m, v in zip(times, means, variances)]

    def run(self) -> List[LevelOutcome]:
        pairs = self.config.sweep.pairs()
        try:
            self.build_reference()
        except Exception as e:
            self.reference_info = {"kind": self.config.reference.kind, "error": f"{type(e).__name__}: {e}"}
            logger.error(f"Reference solution failed: {self.reference_info['error']}")

        level_workers = min(self.workers, len(pairs))
        inner_workers = max(1, self.workers // level_workers)
        with ThreadPoolExecutor(max_workers=level_workers) as executor:
            return list(executor.map(lambda job: self.run_level(job[0], *job[1], inner_workers), enumerate(pairs)))


def write_outputs(config: ExperimentConfig, run_dir: str, levels: List[LevelOutcome], reference: Dict[str, Any],
                  log_file: Optional[str] = None):
    """Single writer for every file of the run directory, in level order."""
    ensure_dir(run_dir)
    rows = [row for level in levels for row in level.rows]
    write_csv(os.path.join(run_dir, "results.csv"), RESULT_COLUMNS, rows)

    level_dir = ensure_dir(os.path.join(run_dir, "levels"))
    for level in levels:
        write_json(os.path.join(level_dir, f"level_{level.index:02d}.json"), {**level.to_json(), **level.details})
        for k, snapshot in enumerate(level.snapshots):
            snap_dir = ensure_dir(os.path.join(run_dir, "snapshots", f"level_{level.index:02d}"))
            write_measure(os.path.join(snap_dir, f"t_{k:02d}.csv"), snapshot)

    summary = {
        "config_hash": config_hash(config),
        "config": config_to_dict(config),
        "versions": library_versions(),
        "seeds": [config.base_seed + i for i in range(config.n_reps)] if config.scheme == "singular" else [],
        "kernel_profile": config.flow.kernel_profile,
        "quad_per_cell": config.quad_per_cell,
        "reference": reference,
        "levels": [level.to_json() for level in levels],
        "failed_levels": sum(1 for level in levels if level.status != "ok"),
        "log_file": log_file,
    }
    write_json(os.path.join(run_dir, "summary.json"), summary)
    logger.info(f"Results written to {run_dir}")


def run_sweep(config: ExperimentConfig, output_dir: Optional[str] = None, workers: Optional[int] = None) -> SweepOutcome:
    """Run every (dt, dx) level of the configuration and write results.csv and summary.json."""
    run_dir = output_dir or config.output_dir
    with run_log(run_dir, config_hash(config)) as log_path:
        sweep = Sweep(config, resolve_workers(config, workers))
        logger.info(f"Sweep of {len(config.sweep.pairs())} levels ({config.scheme}, {config.metric.kind}) "
                    f"with {sweep.workers} workers into {run_dir}")
        levels = sweep.run()
        write_outputs(config, run_dir, levels, sweep.reference_info, log_file=os.path.basename(log_path))
    return SweepOutcome(run_dir=run_dir, levels=levels, reference=sweep.reference_info)


def run_cli(args: argparse.Namespace) -> int:
    """Run an experiment sweep through CLI arguments."""
    try:
        config = load_config(args.config)
        outcome = run_sweep(config, output_dir=args.output_dir, workers=args.workers)
    except ConfigError as e:
        logger.error(f"Invalid configuration: {e}")
        return EXIT_CONFIG
    except (InvalidInputError, FileNotFoundError) as e:
        logger.error(f"Cannot set up the sweep: {e}")
        return EXIT_CONFIG

    failed = [level for level in outcome.levels if level.status != "ok"]
    if failed:
        logger.warning(f"{len(failed)} of {len(outcome.levels)} levels failed; partial results in {outcome.run_dir}")
    return outcome.exit_code
