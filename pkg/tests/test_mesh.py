import math

import numpy as np
import pytest

from scipy import stats

from lagflow.errors import EmptyCellError, InvalidInputError
from lagflow.mesh import (
    build_mesh,
    cell_contains,
    cell_mass,
    cell_masses,
    cell_quadrature,
    locate,
    locate_many,
    mesh_from_json,
    mesh_to_json,
    quadrature_cloud,
    sample_representative,
    write_mesh,
)
from lagflow.solver import catalog_density
from lagflow.torus import TorusPoint


def test_cartesian_partition(cartesian4):
    assert cartesian4.n_cells == 16
    assert all(c.volume == pytest.approx(1.0 / 16) for c in cartesian4.cells)
    assert cartesian4.dx == pytest.approx(math.sqrt(2) / 4)
    assert cartesian4.volume_ratio == pytest.approx(0.5)
    assert cartesian4.cell(6).geometry["index"] == [1, 2]


def test_cartesian_location(cartesian4):
    assert locate(cartesian4, TorusPoint((0.3, 0.6))) == 6
    # shared faces go to the lower index on each axis, the origin to cell 0
    assert locate(cartesian4, TorusPoint((0.25, 0.5))) == 1
    assert locate(cartesian4, TorusPoint((0.0, 0.0))) == 0


@pytest.mark.parametrize("kind,jitter", [("cartesian", 0.0), ("jittered", 0.3), ("voronoi", 0.0)])
def test_location_frequencies_match_cell_volumes(kind, jitter):
    mesh = build_mesh(kind, 4, 2, jitter=jitter, seed=3)
    n = 100_000
    owners = locate_many(mesh, np.random.default_rng(8).random((n, 2)))
    counts = np.bincount(owners, minlength=mesh.n_cells)
    volumes = np.array([c.volume for c in mesh.cells])
    assert np.sum(volumes) == pytest.approx(1.0, abs=1e-9)
    sigma = np.sqrt(n * volumes * (1.0 - volumes))
    assert np.all(np.abs(counts - n * volumes) <= 4.0 * sigma)


@pytest.mark.parametrize("kind,options", [
    ("cartesian", {}),
    ("jittered", {"jitter": 0.3, "seed": 4}),
    ("voronoi", {"seed": 2}),
])
def test_every_point_lies_in_its_located_cell(kind, options, rng):
    mesh = build_mesh(kind, 4, 2, **options)
    assert math.fsum(c.volume for c in mesh.cells) == pytest.approx(1.0, abs=1e-8)
    X = rng.random((300, 2))
    ids = locate_many(mesh, X)
    for cell_id in np.unique(ids):
        assert np.all(cell_contains(mesh, int(cell_id), X[ids == cell_id]))


@pytest.mark.parametrize("kind", ["cartesian", "jittered", "voronoi"])
def test_one_dimensional_meshes(kind, rng):
    mesh = build_mesh(kind, 8, 1, jitter=0.2, seed=1)
    assert math.fsum(c.volume for c in mesh.cells) == pytest.approx(1.0, abs=1e-12)
    X = rng.random((100, 1))
    ids = locate_many(mesh, X)
    for x, cell_id in zip(X, ids):
        assert cell_contains(mesh, int(cell_id), x)[0]


def test_voronoi_cells_know_their_sites():
    mesh = build_mesh("voronoi", 4, 2, seed=5)
    for cell in mesh.cells:
        site = np.asarray(cell.geometry["site"])
        assert locate(mesh, TorusPoint(tuple(site))) == cell.id
        assert cell.id not in cell.geometry["neighbors"]


def test_jittered_mesh_in_three_dimensions_is_refused():
    with pytest.raises(InvalidInputError):
        build_mesh("jittered", 2, 3, jitter=0.1)


@pytest.mark.parametrize("kind,resolution,dim,jitter", [
    ("hexagonal", 4, 2, 0.0),
    ("cartesian", 1, 2, 0.0),
    ("cartesian", 4, 4, 0.0),
    ("jittered", 4, 2, 0.5),
])
def test_build_mesh_arguments(kind, resolution, dim, jitter):
    with pytest.raises(InvalidInputError):
        build_mesh(kind, resolution, dim, jitter)


@pytest.mark.parametrize("kind", ["cartesian", "jittered", "voronoi"])
def test_quadrature_weights_sum_to_cell_volumes(kind):
    mesh = build_mesh(kind, 4, 2, jitter=0.25, seed=3)
    for cell in mesh.cells:
        nodes, weights = cell_quadrature(mesh, cell.id, 64)
        assert np.sum(weights) == pytest.approx(cell.volume, rel=1e-12)
        assert np.all(cell_contains(mesh, cell.id, nodes))
        assert not weights.flags.writeable


def test_quadrature_is_cached(cartesian4):
    first = cell_quadrature(cartesian4, 3, 64)
    assert cell_quadrature(cartesian4, 3, 64)[0] is first[0]


def test_cell_masses_of_uniform_density(cartesian4, uniform_density):
    masses = cell_masses(cartesian4, uniform_density)
    np.testing.assert_allclose(masses, np.full(16, 1.0 / 16), rtol=1e-12)
    assert cell_mass(cartesian4, 5, uniform_density) == pytest.approx(1.0 / 16)


def test_sinusoidal_density_keeps_unit_mass(cartesian4):
    density = catalog_density("sinusoidal", 2, {"amplitude": 0.8})
    assert np.sum(cell_masses(cartesian4, density)) == pytest.approx(1.0, abs=1e-12)


def test_cell_masses_need_enough_nodes(cartesian4, uniform_density):
    with pytest.raises(InvalidInputError):
        cell_masses(cartesian4, uniform_density, quad_per_cell=16)


def test_negative_density_is_rejected(cartesian4):
    with pytest.raises(InvalidInputError):
        cell_masses(cartesian4, lambda X: -np.ones(len(X)))


def test_quadrature_cloud_covers_the_torus(cartesian4):
    owners, nodes, weights = quadrature_cloud(cartesian4, 36)
    assert len(owners) == len(nodes) == len(weights)
    assert np.sum(weights) == pytest.approx(1.0)
    assert set(owners.tolist()) == set(range(16))


@pytest.mark.parametrize("kind", ["cartesian", "voronoi"])
def test_uniform_representatives_stay_in_their_cells(kind, rng):
    mesh = build_mesh(kind, 4, 2, seed=7)
    for cell in mesh.cells:
        point = sample_representative(mesh, cell.id, rng)
        assert cell_contains(mesh, cell.id, point.as_array())[0]


def test_density_representatives_follow_the_density(rng):
    mesh = build_mesh("cartesian", 2, 1)
    density = lambda X: np.where(X[:, 0] < 0.25, 1.0, 0.0)
    samples = np.array([sample_representative(mesh, 0, rng, "density", rho0=density).coords[0] for _ in range(200)])
    assert np.all(samples <= 0.25)


def test_density_sampling_with_a_flat_density_is_uniform(cartesian4, uniform_density):
    flat = np.array([sample_representative(cartesian4, 5, np.random.default_rng(k), "density", rho0=uniform_density)
                     .coords for k in range(4000)])
    plain = np.array([sample_representative(cartesian4, 5, np.random.default_rng(10_000 + k)).coords
                      for k in range(4000)])
    for axis in range(2):
        assert stats.ks_2samp(flat[:, axis], plain[:, axis]).pvalue > 0.01


def test_density_sampling_matches_a_linear_profile(rng):
    mesh = build_mesh("cartesian", 2, 1)
    samples = np.array([sample_representative(mesh, 0, rng, "density", rho0=lambda X: 2.0 * X[:, 0]).coords[0]
                        for _ in range(4000)])
    # on [0, 1/2) the normalized law of rho = 2x has cdf 4x^2
    assert stats.kstest(samples, lambda x: np.clip(4.0 * x ** 2, 0.0, 1.0)).pvalue > 0.01


def test_density_sampling_in_an_empty_cell(rng, cartesian4):
    with pytest.raises(EmptyCellError):
        sample_representative(cartesian4, 0, rng, "density", rho0=lambda X: np.zeros(len(X)))


def test_density_sampling_needs_a_density(rng, cartesian4):
    with pytest.raises(InvalidInputError):
        sample_representative(cartesian4, 0, rng, "density")
    with pytest.raises(InvalidInputError):
        sample_representative(cartesian4, 0, rng, "stratified")


def test_mesh_json_round_trip(tmp_path, rng):
    mesh = build_mesh("voronoi", 3, 2, seed=11)
    rebuilt = mesh_from_json(mesh_to_json(mesh))
    assert rebuilt.n_cells == mesh.n_cells
    assert rebuilt.dx == pytest.approx(mesh.dx)
    X = rng.random((100, 2))
    np.testing.assert_array_equal(locate_many(rebuilt, X), locate_many(mesh, X))
    write_mesh(str(tmp_path / "mesh.json"), mesh)
    assert (tmp_path / "mesh.json").exists()


def test_mesh_json_must_be_complete():
    with pytest.raises(InvalidInputError):
        mesh_from_json({"kind": "cartesian"})
