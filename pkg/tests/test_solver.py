import logging
import math

import numpy as np
import pytest

from lagflow.errors import InvalidInputError, RoughFieldError, UnsupportedRegimeError
from lagflow.fields import catalog_field
from lagflow.flow import FlowConfig
from lagflow.mesh import build_mesh, cell_contains, cell_masses
from lagflow.solver import (
    CHEBYSHEV_KS,
    REFERENCE_MAX_PARTICLES,
    SelfReference,
    catalog_density,
    chebyshev_exceedance,
    error_curve,
    flow_diagnostics,
    measure_distance,
    monte_carlo,
    piecewise_constant,
    reference_size,
    reference_solution,
    run_diffuse,
    run_singular,
    variance_scaling,
)
from lagflow.torus import displacement_array
from lagflow.transport import EXACT_MAX_ATOMS, DiscreteMeasure, GroundMetric, splitting_upper_bound, wasserstein_exact


SHIFT = np.array([0.3, -0.2])


@pytest.fixture
def cfg():
    return FlowConfig(dt=0.125, T=1.0)


@pytest.fixture
def translation_reference(constant_field, uniform_density):
    return reference_solution(constant_field, uniform_density, (0.0, 0.5, 1.0), n_ref_particles=256, dt_ref=0.05,
                              mass=1.0)


# --- Densities -----------------------------------------------------------------------------------

def test_catalog_densities(rng):
    X = rng.random((100, 2))
    np.testing.assert_array_equal(catalog_density("uniform", 2)(X), np.ones(100))
    wave = catalog_density("sinusoidal", 2, {"amplitude": 0.8})
    values = wave(X)
    assert np.all((values >= 0.2 - 1e-12) & (values <= wave.sup_bound + 1e-12))


def test_truncated_singular_density():
    density = catalog_density("truncated_singular", 2, {"K": 10.0, "beta": 1.0})
    # r = 0.05 gives 20 > K, r = 0.25 gives 4
    np.testing.assert_allclose(density([[0.55, 0.5], [0.75, 0.5]]), [0.0, 4.0])
    assert density.sup_bound == 10.0
    with pytest.raises(InvalidInputError):
        catalog_density("truncated_singular", 2)
    with pytest.raises(InvalidInputError):
        catalog_density("truncated_singular", 2, {"K": 10.0, "beta": 2.0})


def test_density_arguments():
    with pytest.raises(InvalidInputError):
        catalog_density("gaussian", 2)
    with pytest.raises(InvalidInputError):
        catalog_density("sinusoidal", 2, {"amplitude": 1.5})
    with pytest.raises(InvalidInputError):
        catalog_density("uniform", 2, {"level": -1.0})


def test_piecewise_constant_density(cartesian4):
    density = catalog_density("sinusoidal", 2, {"amplitude": 0.5})
    bar = piecewise_constant(cartesian4, density)
    np.testing.assert_allclose(bar.masses, cell_masses(cartesian4, density), rtol=1e-12)
    center = np.asarray(cartesian4.cell(6).anchor.coords)
    assert bar([center])[0] == pytest.approx(16 * cell_masses(cartesian4, density)[6])


# --- Singular scheme -----------------------------------------------------------------------------

def test_singular_run_conserves_mass_exactly(rotation_field, cartesian4, uniform_density, cfg):
    run = run_singular(rotation_field, cartesian4, uniform_density, cfg, seed=3, sample_times=(0.0, 0.5, 1.0))
    total = run.snapshots[0].total_mass
    assert total == pytest.approx(1.0, abs=1e-12)
    for snapshot in run.snapshots:
        assert snapshot.weights is run.snapshots[0].weights
        assert snapshot.total_mass == total


def test_singular_atoms_start_in_their_cells(cartesian4, uniform_density, constant_field, cfg):
    run = run_singular(constant_field, cartesian4, uniform_density, cfg, seed=5, sample_times=(0.0,))
    assert len(run.cell_ids) == 16
    for cell_id, point in zip(run.cell_ids, run.snapshots[0].points):
        assert cell_contains(cartesian4, int(cell_id), point)[0]


def test_singular_run_translates_with_a_constant_field(constant_field, cartesian4, uniform_density, cfg):
    run = run_singular(constant_field, cartesian4, uniform_density, cfg, seed=1, sample_times=(0.25, 1.0))
    for t, snapshot in zip(run.sample_times, run.snapshots):
        np.testing.assert_allclose(displacement_array(run.starts + t * SHIFT, snapshot.points), 0.0, atol=1e-12)


def test_singular_run_is_reproducible(rotation_field, cartesian4, uniform_density, cfg):
    first = run_singular(rotation_field, cartesian4, uniform_density, cfg, seed=7, sample_times=(1.0,))
    again = run_singular(rotation_field, cartesian4, uniform_density, cfg, seed=7, sample_times=(1.0,))
    other = run_singular(rotation_field, cartesian4, uniform_density, cfg, seed=8, sample_times=(1.0,))
    np.testing.assert_array_equal(first.snapshots[0].points, again.snapshots[0].points)
    assert not np.array_equal(first.snapshots[0].points, other.snapshots[0].points)


def test_cells_without_mass_carry_no_atom(constant_field, uniform_density, cfg):
    mesh = build_mesh("cartesian", 4, 2)
    masses = cell_masses(mesh, uniform_density)
    masses[[0, 5]] = 0.0
    run = run_singular(constant_field, mesh, uniform_density, cfg, seed=0, sample_times=(1.0,), masses=masses)
    assert run.snapshots[0].size == 14
    assert 0 not in run.cell_ids and 5 not in run.cell_ids


@pytest.mark.parametrize("times", [(), (0.5, 0.25), (0.5, 1.5), (-0.1,)])
def test_sample_times_are_checked(constant_field, cartesian4, uniform_density, cfg, times):
    with pytest.raises(InvalidInputError):
        run_singular(constant_field, cartesian4, uniform_density, cfg, seed=0, sample_times=times)


def test_singular_run_reports_diagnostics(constant_field, cartesian4, uniform_density, cfg):
    run = run_singular(constant_field, cartesian4, uniform_density, cfg, seed=0, sample_times=(1.0,), diagnostics=True)
    assert run.diagnostics["min_det"] == pytest.approx(1.0, abs=1e-8)
    summary = run.to_json()
    assert summary["scheme"] == "singular"
    assert summary["atoms"] == 16
    assert summary["delta"] is None


def test_flow_diagnostics_of_a_translation(constant_field, cfg):
    diagnostics = flow_diagnostics(constant_field, cfg, 1.0, n_probe=64)
    assert diagnostics["min_ratio"] == pytest.approx(1.0, abs=1e-9)
    assert diagnostics["max_ratio"] == pytest.approx(1.0, abs=1e-9)


# --- Diffuse scheme ------------------------------------------------------------------------------

def test_diffuse_run_conserves_mass(rotation_field, cartesian4, cfg):
    density = catalog_density("sinusoidal", 2, {"amplitude": 0.5})
    bar = piecewise_constant(cartesian4, density)
    run = run_diffuse(rotation_field, cartesian4, bar, cfg, sample_times=(0.0, 0.5, 1.0))
    assert run.snapshots[0].size == 16 * 16
    assert run.total_mass == pytest.approx(float(np.sum(bar.masses)), rel=1e-12)
    for snapshot in run.snapshots:
        assert snapshot.weights is run.snapshots[0].weights
    assert run.diagnostics["min_det"] == 1.0


def test_diffuse_run_translates_with_a_constant_field(constant_field, cartesian4, uniform_density, cfg):
    run = run_diffuse(constant_field, cartesian4, piecewise_constant(cartesian4, uniform_density), cfg,
                      sample_times=(0.0, 0.75))
    np.testing.assert_allclose(displacement_array(run.starts, run.snapshots[0].points), 0.0, atol=1e-15)
    np.testing.assert_allclose(displacement_array(run.starts + 0.75 * SHIFT, run.snapshots[1].points), 0.0, atol=1e-12)


def test_diffuse_scheme_refuses_low_integrability(cartesian4, uniform_density, cfg):
    vortex = catalog_field("radial_vortex", {"alpha": 1.2})
    with pytest.raises(UnsupportedRegimeError):
        run_diffuse(vortex, cartesian4, uniform_density, cfg, sample_times=(1.0,))


# --- References and errors -----------------------------------------------------------------------

def test_reference_cloud_has_the_requested_mass(translation_reference):
    assert translation_reference.kind == "rk4"
    assert translation_reference.n_particles == 256
    for snapshot in translation_reference.snapshots:
        assert snapshot.total_mass == pytest.approx(1.0, abs=1e-12)


def test_reference_cloud_is_translated(translation_reference):
    start = translation_reference.initial_points
    moved = translation_reference.snapshots[2].points
    np.testing.assert_allclose(displacement_array(start + SHIFT, moved), 0.0, atol=1e-12)


def test_reference_cloud_is_capped(constant_field, uniform_density, caplog):
    with caplog.at_level(logging.WARNING):
        reference = reference_solution(constant_field, uniform_density, (0.0,), n_ref_particles=6000, dt_ref=0.25,
                                       mass=1.0)
    assert reference.n_particles == REFERENCE_MAX_PARTICLES == EXACT_MAX_ATOMS
    assert "capped" in caplog.text
    assert reference.snapshots[0].total_mass == pytest.approx(1.0, abs=1e-12)
    with pytest.raises(InvalidInputError):
        reference_solution(constant_field, uniform_density, (0.0,), n_ref_particles=0, dt_ref=0.25)


def test_default_reference_size():
    assert reference_size(10) == 160
    assert reference_size(64 * 64) == REFERENCE_MAX_PARTICLES
    assert reference_size(10, particles_per_atom=2) == 20


def test_rough_fields_need_a_self_reference(uniform_density, cfg):
    vortex = catalog_field("radial_vortex", {"alpha": 1.2})
    with pytest.raises(RoughFieldError):
        reference_solution(vortex, uniform_density, (1.0,), n_ref_particles=64, dt_ref=0.01)

    fine = build_mesh("cartesian", 8, 2)
    fine_cfg = FlowConfig(dt=1 / 16, T=1.0)
    reference = reference_solution(vortex, uniform_density, (1.0,), n_ref_particles=64, dt_ref=0.01,
                                   self_reference=SelfReference(mesh=fine, cfg=fine_cfg, master_seed=42))
    direct = run_singular(vortex, fine, uniform_density, fine_cfg, seed=42, sample_times=(1.0,))
    assert reference.kind == "self"
    np.testing.assert_array_equal(reference.snapshots[0].points, direct.snapshots[0].points)


def test_error_against_itself_is_zero(rotation_field, cartesian4, uniform_density, cfg):
    run = run_singular(rotation_field, cartesian4, uniform_density, cfg, seed=2, sample_times=(0.5, 1.0))
    curve = error_curve(run, run, GroundMetric())
    assert [p.t for p in curve] == [0.5, 1.0]
    assert all(p.distance == pytest.approx(0.0, abs=1e-12) and not p.entropic for p in curve)


def test_translation_keeps_the_error_constant(constant_field, cartesian4, uniform_density, cfg, translation_reference):
    run = run_singular(constant_field, cartesian4, uniform_density, cfg, seed=4, sample_times=(0.0, 0.5, 1.0))
    curve = error_curve(run, translation_reference, GroundMetric())
    assert curve[0].distance > 0.0
    for point in curve[1:]:
        assert point.distance == pytest.approx(curve[0].distance, abs=1e-9)


def test_error_curve_needs_matching_snapshots(constant_field, cartesian4, uniform_density, cfg, translation_reference):
    run = run_singular(constant_field, cartesian4, uniform_density, cfg, seed=4, sample_times=(0.0, 1.0))
    with pytest.raises(InvalidInputError):
        error_curve(run, translation_reference, GroundMetric())


def test_reference_mass_is_rescaled_only_when_close():
    approx = DiscreteMeasure(points=[[0.2, 0.2]], weights=[1.0])
    close = DiscreteMeasure(points=[[0.3, 0.2]], weights=[1.0005])
    distance, entropic = measure_distance(close, approx, GroundMetric())
    assert distance == pytest.approx(0.1)
    assert not entropic
    with pytest.raises(InvalidInputError):
        measure_distance(DiscreteMeasure(points=[[0.3, 0.2]], weights=[1.1]), approx, GroundMetric())


def test_error_at_the_start_is_within_the_mesh_size(rotation_field, uniform_density, cfg):
    mesh = build_mesh("cartesian", 8, 2)
    reference = reference_solution(rotation_field, uniform_density, (0.0, 1.0), n_ref_particles=1024, dt_ref=0.01,
                                   mass=1.0, seed=3)
    run = run_singular(rotation_field, mesh, uniform_density, cfg, seed=5, sample_times=(0.0, 1.0))
    curve = error_curve(run, reference, GroundMetric())
    assert 0.0 < curve[0].distance <= mesh.dx


def test_splitting_bound_holds_between_the_two_schemes(rotation_field, cartesian4, uniform_density, cfg):
    singular = run_singular(rotation_field, cartesian4, uniform_density, cfg, seed=8, sample_times=(0.5, 1.0))
    diffuse = run_diffuse(rotation_field, cartesian4, piecewise_constant(cartesian4, uniform_density), cfg,
                          sample_times=(0.5, 1.0))
    for atoms, cloud in zip(singular.snapshots, diffuse.snapshots):
        parts_singular, parts_diffuse = [], []
        for k, cell_id in enumerate(singular.cell_ids):
            parts_singular.append(DiscreteMeasure(points=atoms.points[k:k + 1], weights=atoms.weights[k:k + 1]))
            mine = diffuse.cell_ids == cell_id
            parts_diffuse.append(DiscreteMeasure(points=cloud.points[mine], weights=cloud.weights[mine]))
        bound = splitting_upper_bound(parts_singular, parts_diffuse)
        realised = wasserstein_exact(atoms, cloud).cost
        assert 0.0 < realised <= bound + 1e-12


# --- Monte Carlo ---------------------------------------------------------------------------------

def test_monte_carlo_summary(constant_field, cartesian4, uniform_density, cfg, translation_reference):
    summary = monte_carlo(constant_field, cartesian4, uniform_density, cfg, GroundMetric(), n_reps=4, base_seed=10,
                          sample_times=(0.0, 0.5, 1.0), reference=translation_reference)
    assert summary.errors.shape == (4, 3)
    assert summary.seeds == (10, 11, 12, 13)
    assert summary.atoms == 16
    np.testing.assert_allclose(summary.mean_error, summary.errors.mean(axis=0))
    assert np.all(summary.variance >= 0.0)
    assert np.all(summary.worst_error >= summary.mean_error)
    assert summary.exceedance_bound == {k: 1.0 / k ** 2 for k in CHEBYSHEV_KS}
    assert summary.mean_of_n_error is None
    assert summary.to_json()["n_reps"] == 4


def test_monte_carlo_does_not_depend_on_workers(rotation_field, cartesian4, uniform_density, cfg):
    reference = reference_solution(rotation_field, uniform_density, (1.0,), n_ref_particles=256, dt_ref=0.01, mass=1.0)
    kwargs = dict(n_reps=3, base_seed=0, sample_times=(1.0,), reference=reference)
    serial = monte_carlo(rotation_field, cartesian4, uniform_density, cfg, GroundMetric(), workers=1, **kwargs)
    threaded = monte_carlo(rotation_field, cartesian4, uniform_density, cfg, GroundMetric(), workers=3, **kwargs)
    np.testing.assert_array_equal(serial.errors, threaded.errors)


def test_mean_of_n_aggregate(constant_field, cartesian4, uniform_density, cfg, translation_reference):
    summary = monte_carlo(constant_field, cartesian4, uniform_density, cfg, GroundMetric(), n_reps=4, base_seed=0,
                          sample_times=(0.0, 0.5, 1.0), aggregate="mean_of_n", reference=translation_reference)
    assert summary.mean_of_n_error.shape == (3,)
    # averaging replications can only bring the empirical measure closer
    assert np.all(summary.mean_of_n_error <= summary.mean_error + 1e-12)


def test_mean_of_n_resamples_large_merges(constant_field, uniform_density, cfg, translation_reference, caplog):
    mesh = build_mesh("cartesian", 32, 2)
    with caplog.at_level(logging.WARNING):
        summary = monte_carlo(constant_field, mesh, uniform_density, cfg, GroundMetric(), n_reps=6, base_seed=0,
                              sample_times=(0.0, 0.5, 1.0), aggregate="mean_of_n", reference=translation_reference)
    assert 6 * mesh.n_cells > EXACT_MAX_ATOMS
    assert summary.mean_of_n_resampled
    assert summary.to_json()["mean_of_n_resampled"]
    assert "resampling" in caplog.text
    assert np.all(np.isfinite(summary.mean_of_n_error)) and np.all(summary.mean_of_n_error > 0.0)
    assert not summary.entropic


def test_monte_carlo_arguments(constant_field, cartesian4, uniform_density, cfg):
    with pytest.raises(InvalidInputError):
        monte_carlo(constant_field, cartesian4, uniform_density, cfg, GroundMetric(), n_reps=1, base_seed=0,
                    sample_times=(1.0,))
    with pytest.raises(InvalidInputError):
        monte_carlo(constant_field, cartesian4, uniform_density, cfg, GroundMetric(), n_reps=2, base_seed=0,
                    sample_times=(1.0,), aggregate="median")


def test_chebyshev_exceedance():
    errors = np.array([[0.0]] * 9 + [[1.0]])
    fractions = chebyshev_exceedance(errors)
    assert fractions[2][0] == pytest.approx(0.1)
    assert fractions[3][0] == 0.0
    assert fractions[5][0] == 0.0
    flat = chebyshev_exceedance(np.ones((5, 2)))
    np.testing.assert_array_equal(flat[2], [0.0, 0.0])


def test_variance_of_means_follows_one_over_n(rng):
    scaling = variance_scaling(rng.normal(size=4000), group_sizes=(1, 4, 16), n_outer=100)
    for n, ratio in scaling.items():
        assert ratio.group_size == n
        assert 0.5 <= ratio.ratio <= 2.0


def test_variance_scaling_arguments(rng):
    with pytest.raises(InvalidInputError):
        variance_scaling(rng.normal(size=10), group_sizes=(4,), n_outer=5)
    with pytest.raises(InvalidInputError):
        variance_scaling(rng.normal(size=10), group_sizes=(1,), n_outer=1)
    assert math.isnan(variance_scaling(np.ones(4), group_sizes=(2,), n_outer=2)[2].ratio)
