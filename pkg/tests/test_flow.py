import math

import numpy as np
import pytest

from lagflow.errors import InvalidInputError, RoughFieldError, UnsupportedRegimeError
from lagflow.fields import catalog_field, rigid_rotation_exact
from lagflow.flow import (
    FlowConfig,
    MeanFlowState,
    ParticleEnsemble,
    bilipschitz_probe,
    discrepancy_norms,
    euler_flow_advance,
    euler_flow_map,
    identity_flow,
    jacobian_determinant,
    jacobian_determinants,
    mean_euler_flow_advance,
    record_trajectories,
    reference_advance,
    reference_flow,
    reference_flow_map,
    write_trajectories,
)
from lagflow.io_utils import read_csv
from lagflow.mesh import build_mesh, sample_representative
from lagflow.torus import TorusPoint, displacement_array, wrap_array


def _advance(field, cfg, X, t):
    return euler_flow_advance(field, cfg, ParticleEnsemble.start(X), t).positions


# --- FlowConfig ----------------------------------------------------------------------------------

def test_step_must_divide_the_horizon():
    with pytest.raises(InvalidInputError):
        FlowConfig(dt=0.3, T=1.0)
    assert FlowConfig(dt=0.125, T=1.0).n_steps == 8


def test_delta_rules(constant_field):
    vortex = catalog_field("radial_vortex", {"alpha": 1.2})
    assert FlowConfig(dt=1 / 64, T=1.0).resolve_delta(vortex) == pytest.approx(0.125)
    assert FlowConfig(dt=1 / 64, T=1.0).resolve_delta(constant_field) is None
    assert FlowConfig(dt=1 / 64, T=1.0, delta_rule="linear_dt").resolve_delta(vortex) == pytest.approx(1 / 64)
    assert FlowConfig(dt=1 / 64, T=1.0, delta_rule="none").resolve_delta(vortex) is None
    assert FlowConfig(dt=1 / 64, T=1.0, delta_rule="explicit", delta=0.05).resolve_delta(vortex) == 0.05
    with pytest.raises(InvalidInputError):
        FlowConfig(dt=1 / 64, T=1.0, delta_rule="explicit")
    with pytest.raises(InvalidInputError):
        FlowConfig(dt=1 / 64, T=1.0, delta_rule="cubic")


def test_delta_above_a_quarter_is_rejected(constant_field):
    vortex = catalog_field("radial_vortex", {"alpha": 1.2})
    with pytest.raises(InvalidInputError):
        FlowConfig(dt=0.25, T=1.0, delta_rule="sqrt_dt").resolve_delta(constant_field)
    with pytest.raises(InvalidInputError):
        FlowConfig(dt=1 / 8, T=1.0).resolve_delta(vortex)
    with pytest.raises(InvalidInputError):
        FlowConfig(dt=0.5, T=1.0, delta_rule="linear_dt").resolve_delta(vortex)
    assert FlowConfig(dt=1 / 16, T=1.0, delta_rule="sqrt_dt").resolve_delta(constant_field) == 0.25


# --- Euler flow ----------------------------------------------------------------------------------

@pytest.mark.parametrize("dt", [1 / 4, 1 / 8, 1 / 32])
def test_constant_field_is_translated_exactly(constant_field, rng, dt):
    cfg = FlowConfig(dt=dt, T=1.0)
    X = rng.random((40, 2))
    for t in (0.0, 0.3, 0.5, 1.0):
        moved = _advance(constant_field, cfg, X, t)
        expected = X + t * np.array([0.3, -0.2])
        np.testing.assert_allclose(displacement_array(expected, moved), 0.0, atol=1e-12)


def test_zero_field_leaves_particles_alone(rng):
    zero = catalog_field("constant", {"velocity": [0.0, 0.0]})
    X = rng.random((10, 2))
    np.testing.assert_array_equal(_advance(zero, FlowConfig(dt=0.125, T=1.0), X, 1.0), X)


def test_grid_node_consistency(rotation_field, rng):
    cfg = FlowConfig(dt=1 / 16, T=1.0)
    X = rng.random((25, 2))
    direct = euler_flow_advance(rotation_field, cfg, ParticleEnsemble.start(X), 0.5)
    ensemble = euler_flow_advance(rotation_field, cfg, ParticleEnsemble.start(X), 0.25)
    stepped = euler_flow_advance(rotation_field, cfg, ensemble, 0.5)
    np.testing.assert_array_equal(direct.positions, stepped.positions)
    np.testing.assert_array_equal(stepped.provenance, ParticleEnsemble.start(X).provenance)


def test_affine_between_nodes(rotation_field, rng):
    cfg = FlowConfig(dt=1 / 8, T=1.0)
    X = rng.random((25, 2))
    before = _advance(rotation_field, cfg, X, 0.25)
    after = _advance(rotation_field, cfg, X, 0.375)
    middle = _advance(rotation_field, cfg, X, 0.3)
    expected = before + 0.4 * displacement_array(before, after)
    np.testing.assert_allclose(displacement_array(expected, middle), 0.0, atol=1e-12)


def test_targets_outside_the_horizon(constant_field):
    cfg = FlowConfig(dt=0.25, T=1.0)
    ensemble = euler_flow_advance(constant_field, cfg, ParticleEnsemble.start([[0.1, 0.1]]), 0.5)
    with pytest.raises(InvalidInputError):
        euler_flow_advance(constant_field, cfg, ensemble, 1.5)
    with pytest.raises(InvalidInputError):
        euler_flow_advance(constant_field, cfg, ensemble, 0.25)


def test_euler_flow_is_first_order_on_the_rotation(rotation_field):
    x0 = np.array([[0.5 + 0.125, 0.5]])
    exact = rigid_rotation_exact(rotation_field, 1.0, x0)
    steps = [2.0 ** -k for k in (6, 7, 8)]
    errors = [float(np.linalg.norm(displacement_array(exact, _advance(rotation_field, FlowConfig(dt=dt, T=1.0), x0, 1.0))))
              for dt in steps]
    order = np.polyfit(np.log(steps), np.log(errors), 1)[0]
    assert order >= 0.9
    assert errors[0] > errors[1] > errors[2]


def test_trajectories_csv(constant_field, tmp_path, rng):
    cfg = FlowConfig(dt=0.25, T=1.0)
    times = [0.0, 0.5, 1.0]
    snapshots = record_trajectories(constant_field, cfg, rng.random((3, 2)), times)
    path = str(tmp_path / "traj.csv")
    write_trajectories(path, times, snapshots)
    header, rows = read_csv(path)
    assert header == ["particle_id", "t", "x_1", "x_2"]
    assert len(rows) == 9
    assert [float(r[1]) for r in rows[:3]] == [0.0, 0.0, 0.0]


# --- Mean Euler flow -----------------------------------------------------------------------------

def _anchors(mesh):
    return np.array([c.anchor.coords for c in mesh.cells])


def test_mean_flow_translates_by_the_constant(constant_field, cartesian4):
    cfg = FlowConfig(dt=0.125, T=1.0)
    state = mean_euler_flow_advance(constant_field, cfg, cartesian4, _anchors(cartesian4), 0.75)
    np.testing.assert_allclose(state.translations, np.tile([0.225, -0.15], (16, 1)), atol=1e-12)


def test_mean_flow_uses_cell_averages():
    shear = catalog_field("shear_sine")
    mesh = build_mesh("cartesian", 2, 2)
    cfg = FlowConfig(dt=0.125, T=1.0)
    state = mean_euler_flow_advance(shear, cfg, mesh, _anchors(mesh), 0.125, quad_per_cell=64)
    ticks = (np.arange(8) + 0.5) / 16
    average = float(np.mean(np.sin(2 * np.pi * ticks)))
    assert average == pytest.approx(2 / math.pi, rel=1e-2)
    # cells 0 and 2 have x_2 in [0, 1/2), cells 1 and 3 in [1/2, 1)
    np.testing.assert_allclose(state.translations[[0, 2]], [[0.125 * average, 0.0]] * 2, atol=1e-14)
    np.testing.assert_allclose(state.translations[[1, 3]], [[-0.125 * average, 0.0]] * 2, atol=1e-14)


def test_mean_flow_ignores_the_choice_of_representatives(rotation_field, rng):
    mesh = build_mesh("cartesian", 4, 2)
    cfg = FlowConfig(dt=0.125, T=1.0)
    random_reps = np.array([sample_representative(mesh, c.id, rng).coords for c in mesh.cells])
    first = mean_euler_flow_advance(rotation_field, cfg, mesh, _anchors(mesh), 0.5)
    second = mean_euler_flow_advance(rotation_field, cfg, mesh, random_reps, 0.5)
    np.testing.assert_array_equal(first.translations, second.translations)


def test_mean_flow_moves_cells_rigidly(rotation_field, cartesian4, rng):
    cfg = FlowConfig(dt=0.125, T=1.0)
    state = mean_euler_flow_advance(rotation_field, cfg, cartesian4, _anchors(cartesian4), 1.0)
    lower = np.asarray(cartesian4.cell(5).geometry["lower"])
    pair = lower + rng.random((2, 2)) * 0.25
    moved = wrap_array(pair + state.translations[5])
    assert np.linalg.norm(displacement_array(moved[0], moved[1])) == pytest.approx(np.linalg.norm(pair[1] - pair[0]),
                                                                                  abs=1e-14)


def test_mean_flow_resumes_from_a_state(rotation_field, cartesian4):
    cfg = FlowConfig(dt=0.125, T=1.0)
    reps = _anchors(cartesian4)
    direct = mean_euler_flow_advance(rotation_field, cfg, cartesian4, reps, 0.5)
    half = mean_euler_flow_advance(rotation_field, cfg, cartesian4, reps, 0.25, state=MeanFlowState.start(cartesian4))
    resumed = mean_euler_flow_advance(rotation_field, cfg, cartesian4, reps, 0.5, state=half)
    np.testing.assert_array_equal(direct.translations, resumed.translations)


def test_resumed_mean_flow_keeps_its_quadrature(rotation_field, cartesian4):
    cfg = FlowConfig(dt=0.125, T=1.0)
    reps = _anchors(cartesian4)
    half = mean_euler_flow_advance(rotation_field, cfg, cartesian4, reps, 0.25, quad_per_cell=16)
    assert half.quad_per_cell == 16
    resumed = mean_euler_flow_advance(rotation_field, cfg, cartesian4, reps, 0.5, state=half, quad_per_cell=16)
    assert resumed.quad_per_cell == 16
    with pytest.raises(InvalidInputError):
        mean_euler_flow_advance(rotation_field, cfg, cartesian4, reps, 0.5, state=half, quad_per_cell=64)


def test_mean_flow_needs_p_above_d(cartesian4):
    vortex = catalog_field("radial_vortex", {"alpha": 1.2})
    with pytest.raises(UnsupportedRegimeError):
        mean_euler_flow_advance(vortex, FlowConfig(dt=0.125, T=1.0), cartesian4, _anchors(cartesian4), 0.5)


def test_mean_flow_checks_representatives(constant_field, cartesian4):
    reps = _anchors(cartesian4)[::-1]
    with pytest.raises(InvalidInputError):
        mean_euler_flow_advance(constant_field, FlowConfig(dt=0.125, T=1.0), cartesian4, reps, 0.5)


# --- Reference flow ------------------------------------------------------------------------------

def test_reference_flow_of_a_constant(constant_field):
    trajectory = reference_flow(constant_field, TorusPoint((0.9, 0.1)), 1.0, 1e-2)
    np.testing.assert_allclose(displacement_array(trajectory.positions[-1], [0.2, 0.9]), 0.0, atol=1e-12)
    assert trajectory.times[-1] == pytest.approx(1.0)


def test_reference_flow_matches_the_rotation(rotation_field):
    X = np.array([[0.6, 0.5], [0.5, 0.35], [0.62, 0.62]])
    moved = reference_flow_map(rotation_field, 1e-3)(1.0, X)
    np.testing.assert_allclose(displacement_array(rigid_rotation_exact(rotation_field, 1.0, X), moved), 0.0, atol=1e-8)


def test_reference_flow_keeps_the_shear_height(rng):
    shear = catalog_field("shear_sine")
    X = rng.random((20, 2))
    moved = reference_advance(shear, X, 0.0, 1.0, 1e-2)
    np.testing.assert_array_equal(moved[:, 1], X[:, 1])


def test_reference_flow_refuses_rough_fields():
    vortex = catalog_field("radial_vortex", {"alpha": 1.2})
    with pytest.raises(RoughFieldError):
        reference_flow(vortex, TorusPoint((0.5, 0.5)), 1.0, 1e-2)
    with pytest.raises(RoughFieldError):
        reference_flow_map(vortex, 1e-2)


# --- Diagnostics ---------------------------------------------------------------------------------

def test_identity_and_translation_have_unit_jacobian(constant_field, rng):
    X = rng.random((20, 2))
    np.testing.assert_allclose(jacobian_determinants(identity_flow, 0.0, X), 1.0, atol=1e-8)
    flow = euler_flow_map(constant_field, FlowConfig(dt=0.125, T=1.0))
    np.testing.assert_allclose(jacobian_determinants(flow, 1.0, X), 1.0, atol=1e-8)


def test_one_shear_step_has_unit_jacobian(rng):
    shear = catalog_field("shear_sine")
    flow = euler_flow_map(shear, FlowConfig(dt=1 / 16, T=1.0))
    for x in rng.random((10, 2)):
        assert jacobian_determinant(flow, 1 / 16, x) == pytest.approx(1.0, abs=1e-6)


def test_fd_step_range():
    with pytest.raises(InvalidInputError):
        jacobian_determinants(identity_flow, 0.0, [[0.1, 0.1]], fd_step=1e-2)


def test_zero_field_is_an_isometry(rng):
    bounds = bilipschitz_probe(identity_flow, 0.0, rng.random((50, 2)), rng.random((50, 2)))
    assert bounds.max_ratio == pytest.approx(1.0, abs=1e-12)
    assert bounds.min_ratio == pytest.approx(1.0, abs=1e-12)
    assert bounds.n_pairs == 50


def test_coincident_pairs_are_skipped(rng):
    first = rng.random((5, 2))
    second = first.copy()
    second[0] = wrap_array(first[0] + 0.3)
    bounds = bilipschitz_probe(identity_flow, 0.0, first, second)
    assert bounds.n_pairs == 1
    assert bounds.n_skipped == 4
    with pytest.raises(InvalidInputError):
        bilipschitz_probe(identity_flow, 0.0, first, first)


def test_mollified_euler_flow_keeps_pairs_apart(rng):
    vortex = catalog_field("radial_vortex", {"alpha": 1.2})
    dt = 1 / 16
    flow = euler_flow_map(vortex, FlowConfig(dt=dt, T=1.0))
    bounds = bilipschitz_probe(flow, 1.0, rng.random((200, 2)), rng.random((200, 2)))
    assert 0.0 < bounds.min_ratio <= bounds.max_ratio < math.inf


def test_discrepancy_of_equal_flows_vanishes():
    norms = discrepancy_norms(identity_flow, identity_flow, 0.0, p=2.0, scale=0.1, n_mc=1024)
    assert norms.lp_norm == 0.0
    assert norms.log_lp_norm == 0.0


def test_discrepancy_of_two_translations():
    cfg = FlowConfig(dt=0.25, T=1.0)
    fast = euler_flow_map(catalog_field("constant", {"velocity": [0.3, 0.0]}), cfg)
    slow = euler_flow_map(catalog_field("constant", {"velocity": [0.1, 0.0]}), cfg)
    norms = discrepancy_norms(fast, slow, 1.0, p=2.0, scale=0.05, n_mc=2048)
    assert norms.lp_norm == pytest.approx(0.2, abs=1e-12)
    assert norms.log_lp_norm == pytest.approx(math.log1p(0.2 / 0.05), abs=1e-12)


def test_discrepancy_arguments():
    with pytest.raises(InvalidInputError):
        discrepancy_norms(identity_flow, identity_flow, 0.0, p=2.0, scale=0.1, n_mc=100)
    with pytest.raises(InvalidInputError):
        discrepancy_norms(identity_flow, identity_flow, 0.0, p=2.0, scale=0.0)
