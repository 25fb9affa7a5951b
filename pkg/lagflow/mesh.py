"""Partitions of the torus: cartesian boxes, jittered convex complexes and periodic Voronoi diagrams.

Cells carry their geometry in lifted coordinates (a copy of the cell in R^d close
to its anchor); torus points are tested against every integer shift of the lift.
"""
import itertools
import math

from dataclasses import dataclass, field as dataclass_field
from typing import Any, Callable, Dict, List, Optional, Tuple

import numpy as np

from scipy.spatial import ConvexHull, Voronoi, cKDTree
from scipy.spatial.distance import pdist
from scipy.stats import qmc

from lagflow.errors import EmptyCellError, InvalidInputError, MeshConstructionError
from lagflow.io_utils import write_json
from lagflow.log import get_logger
from lagflow.torus import TorusPoint, as_points, displacement_array, wrap_array


logger = get_logger()

MESH_KINDS = ("cartesian", "jittered", "voronoi")
SAMPLING_MODES = ("uniform", "density")
_ENVELOPE_PILOT = 64

Density = Callable[[np.ndarray], np.ndarray]

_MIN_CELL_VOLUME = 1e-12
_CONTAINMENT_TOLERANCE = 1e-12


@dataclass(frozen=True, eq=False)
class Cell:
    """One set Q_i of the partition."""
    id: int
    volume: float
    diameter: float
    anchor: TorusPoint
    geometry: Dict[str, Any]
    _equations: Optional[np.ndarray] = dataclass_field(default=None, repr=False)
    _simplices: Optional[np.ndarray] = dataclass_field(default=None, repr=False)

    @property
    def is_box(self) -> bool:
        return self.geometry["type"] == "box"

    def bounding_box(self) -> Tuple[np.ndarray, np.ndarray]:
        if self.is_box:
            return np.asarray(self.geometry["lower"]), np.asarray(self.geometry["upper"])
        vertices = np.asarray(self.geometry["vertices"])
        return vertices.min(axis=0), vertices.max(axis=0)

    def contains_lifted(self, Y: np.ndarray) -> np.ndarray:
        """Membership of lifted points (no periodic shifts applied)."""
        if self.is_box:
            lower, upper = self.bounding_box()
            return np.all((Y >= lower - _CONTAINMENT_TOLERANCE) & (Y <= upper + _CONTAINMENT_TOLERANCE), axis=1)
        normals, offsets = self._equations[:, :-1], self._equations[:, -1]
        return np.all(Y @ normals.T + offsets <= _CONTAINMENT_TOLERANCE, axis=1)


@dataclass(frozen=True, eq=False)
class Mesh:
    """Immutable partition {Q_i} of the d-torus with diameter bound dx."""
    kind: str
    dim: int
    resolution: int
    dx: float
    cells: Tuple[Cell, ...]
    volume_ratio: float
    jitter: float = 0.0
    seed: int = 0
    _sites: Optional[np.ndarray] = dataclass_field(default=None, repr=False)
    _site_tree: Optional[cKDTree] = dataclass_field(default=None, repr=False)
    _node_cache: Dict[Tuple[int, int], Tuple[np.ndarray, np.ndarray]] = dataclass_field(default_factory=dict, repr=False)

    @property
    def n_cells(self) -> int:
        return len(self.cells)

    def cell(self, cell_id: int) -> Cell:
        if not 0 <= cell_id < len(self.cells):
            raise InvalidInputError(f"Cell id {cell_id} outside [0, {len(self.cells)}).")
        return self.cells[cell_id]

    @property
    def min_volume(self) -> float:
        return min(c.volume for c in self.cells)

    @property
    def max_diameter(self) -> float:
        return max(c.diameter for c in self.cells)


# --- Construction --------------------------------------------------------------------------------

def build_mesh(kind: str, resolution: int, dim: int = 2, jitter: float = 0.0, seed: int = 0) -> Mesh:
    """Build a cartesian, jittered or periodic Voronoi partition with `resolution` cells per axis."""
    if kind not in MESH_KINDS:
        raise InvalidInputError(f"Unknown mesh kind '{kind}', expected one of {MESH_KINDS}.")
    if resolution < 2:
        raise InvalidInputError(f"Mesh resolution must be at least 2, got {resolution}.")
    if not 1 <= dim <= 3:
        raise InvalidInputError(f"Mesh dimension must be 1, 2 or 3, got {dim}.")
    if not 0.0 <= jitter < 0.5:
        raise InvalidInputError(f"Jitter must lie in [0, 1/2), got {jitter}.")

    sites = None
    if kind == "cartesian":
        cells = _cartesian_cells(resolution, dim)
    elif kind == "jittered":
        cells = _jittered_cells(resolution, dim, jitter, seed)
    else:
        sites = np.random.default_rng(seed).random((resolution ** dim, dim))
        cells = _voronoi_cells(sites)

    mesh = _assemble(kind, dim, resolution, cells, jitter, seed, sites)
    logger.info(f"Built {kind} mesh: d={dim}, {mesh.n_cells} cells, dx={mesh.dx:.6g}, "
                f"min|Q|/dx^d={mesh.volume_ratio:.4g}")
    return mesh


def _assemble(kind, dim, resolution, cells, jitter, seed, sites) -> Mesh:
    total = math.fsum(c.volume for c in cells)
    if abs(total - 1.0) > 1e-8:
        raise MeshConstructionError(f"{kind} cells cover volume {total!r}, not 1.")
    small = [c.id for c in cells if c.volume < _MIN_CELL_VOLUME]
    if small:
        raise MeshConstructionError(f"Degenerate cells with volume below {_MIN_CELL_VOLUME}: {small[:10]}")

    dx = max(c.diameter for c in cells)
    ratio = min(c.volume for c in cells) / dx ** dim
    tree = cKDTree(sites, boxsize=1.0) if sites is not None and dim >= 2 else None
    return Mesh(kind=kind, dim=dim, resolution=resolution, dx=dx, cells=tuple(cells), volume_ratio=ratio,
                jitter=jitter, seed=seed, _sites=sites, _site_tree=tree)


def _box_cell(cell_id: int, lower: np.ndarray, upper: np.ndarray, extra: Optional[Dict[str, Any]] = None) -> Cell:
    geometry = {"type": "box", "lower": lower.tolist(), "upper": upper.tolist()}
    geometry.update(extra or {})
    return Cell(
        id=cell_id,
        volume=float(np.prod(upper - lower)),
        diameter=float(np.linalg.norm(upper - lower)),
        anchor=TorusPoint(tuple(float(c) for c in wrap_array(0.5 * (lower + upper)))),
        geometry=geometry,
    )


def _polytope_cell(cell_id: int, vertices: np.ndarray, anchor: Optional[np.ndarray] = None,
                   extra: Optional[Dict[str, Any]] = None) -> Cell:
    try:
        hull = ConvexHull(vertices)
    except Exception as e:
        raise MeshConstructionError(f"Cell {cell_id} is degenerate: {e}")
    vertices = vertices[hull.vertices]
    center = vertices.mean(axis=0)
    dim = vertices.shape[1]

    simplices = []
    for facet in hull.simplices:
        simplex = np.vstack([center, hull.points[facet]])
        if abs(np.linalg.det(simplex[1:] - center)) / math.factorial(dim) > 0.0:
            simplices.append(simplex)

    geometry = {"type": "polytope", "vertices": vertices.tolist()}
    geometry.update(extra or {})
    anchor = center if anchor is None else anchor
    return Cell(
        id=cell_id,
        volume=float(hull.volume),
        diameter=float(np.max(pdist(vertices))),
        anchor=TorusPoint(tuple(float(c) for c in wrap_array(np.asarray(anchor, dtype=float)))),
        geometry=geometry,
        _equations=hull.equations,
        _simplices=np.asarray(simplices),
    )


def _cartesian_cells(resolution: int, dim: int) -> List[Cell]:
    cells = []
    for cell_id, index in enumerate(itertools.product(range(resolution), repeat=dim)):
        lower = np.asarray(index, dtype=float) / resolution
        upper = (np.asarray(index, dtype=float) + 1.0) / resolution
        cells.append(_box_cell(cell_id, lower, upper, {"index": list(index)}))
    return cells


def _jittered_cells(resolution: int, dim: int, jitter: float, seed: int) -> List[Cell]:
    """Displace cartesian vertices by up to jitter/N per component; split non-convex quads in two."""
    rng = np.random.default_rng(seed)
    shift = rng.uniform(-jitter, jitter, size=(resolution,) * dim + (dim,)) / resolution

    def vertex(index):
        wrapped = tuple(i % resolution for i in index)
        return np.asarray(index, dtype=float) / resolution + shift[wrapped]

    if dim == 1:
        return [_box_cell(i, vertex((i,)), vertex((i + 1,)), {"index": [i]}) for i in range(resolution)]
    if dim != 2:
        raise InvalidInputError("Jittered meshes are available for d <= 2.")

    cells: List[Cell] = []
    for i, j in itertools.product(range(resolution), repeat=2):
        quad = np.array([vertex((i, j)), vertex((i + 1, j)), vertex((i + 1, j + 1)), vertex((i, j + 1))])
        edges = np.roll(quad, -1, axis=0) - quad
        turns = edges[:, 0] * np.roll(edges, -1, axis=0)[:, 1] - edges[:, 1] * np.roll(edges, -1, axis=0)[:, 0]
        if np.all(turns > 0):
            cells.append(_polytope_cell(len(cells), quad, extra={"index": [i, j]}))
            continue
        # the reflex vertex follows the edge pair with a negative turn
        reflex = (int(np.argmin(turns)) + 1) % 4
        order = [(reflex + k) % 4 for k in range(4)]
        for triangle in ([order[0], order[1], order[2]], [order[2], order[3], order[0]]):
            cells.append(_polytope_cell(len(cells), quad[triangle], extra={"index": [i, j]}))
    return cells


def _voronoi_cells(sites: np.ndarray) -> List[Cell]:
    n, dim = sites.shape
    if n > 1:
        gaps, _ = cKDTree(sites, boxsize=1.0).query(sites, k=2)
        if np.min(gaps[:, 1]) < 1e-12:
            raise MeshConstructionError("Voronoi sites contain duplicates.")

    if dim == 1:
        return _voronoi_cells_1d(sites[:, 0])

    shifts = [np.zeros(dim)] + [np.asarray(s, dtype=float) for s in itertools.product((-1, 0, 1), repeat=dim) if any(s)]
    replicated = np.vstack([sites + s for s in shifts])
    diagram = Voronoi(replicated)

    neighbors: Dict[int, set] = {i: set() for i in range(n)}
    for a, b in diagram.ridge_points:
        if a < n:
            neighbors[a].add(int(b % n))
        if b < n:
            neighbors[b].add(int(a % n))

    cells = []
    for i in range(n):
        region = diagram.regions[diagram.point_region[i]]
        if not region or -1 in region:
            raise MeshConstructionError(f"Voronoi cell of site {i} is unbounded; too few sites?")
        extra = {"site": sites[i].tolist(), "neighbors": sorted(neighbors[i] - {i})}
        cells.append(_polytope_cell(i, diagram.vertices[region], anchor=sites[i], extra=extra))
    return cells


def _voronoi_cells_1d(sites: np.ndarray) -> List[Cell]:
    order = np.argsort(sites)
    ordered = sites[order]
    extended = np.concatenate([[ordered[-1] - 1.0], ordered, [ordered[0] + 1.0]])
    cells: List[Optional[Cell]] = [None] * len(sites)
    for rank, cell_id in enumerate(order):
        lower = 0.5 * (extended[rank] + extended[rank + 1])
        upper = 0.5 * (extended[rank + 1] + extended[rank + 2])
        left, right = order[(rank - 1) % len(sites)], order[(rank + 1) % len(sites)]
        cell = _box_cell(int(cell_id), np.array([lower]), np.array([upper]),
                         {"site": [float(sites[cell_id])], "neighbors": sorted({int(left), int(right)} - {int(cell_id)})})
        # anchor on the site itself
        cells[cell_id] = Cell(id=cell.id, volume=cell.volume, diameter=cell.diameter,
                              anchor=TorusPoint((float(sites[cell_id]),)), geometry=cell.geometry)
    return cells


# --- Location ------------------------------------------------------------------------------------

def _shifted_lifts(cell: Cell, X: np.ndarray) -> List[np.ndarray]:
    base = cell.anchor.as_array() + displacement_array(cell.anchor.as_array(), X)
    return [base + np.asarray(s, dtype=float) for s in itertools.product((-1, 0, 1), repeat=X.shape[1])]


def cell_contains(mesh: Mesh, cell_id: int, points: np.ndarray) -> np.ndarray:
    """Closed-cell membership of torus points, shape (n,) booleans."""
    cell = mesh.cell(cell_id)
    X = wrap_array(as_points(points, mesh.dim).copy())
    inside = np.zeros(len(X), dtype=bool)
    for lifted in _shifted_lifts(cell, X):
        inside |= cell.contains_lifted(lifted)
    return inside


def locate_many(mesh: Mesh, points: np.ndarray) -> np.ndarray:
    """Cell id of every point; points on shared boundaries go to the lowest id."""
    X = wrap_array(as_points(points, mesh.dim).copy())
    if mesh.kind == "cartesian":
        return _locate_cartesian(mesh, X)
    if mesh._site_tree is not None:
        return _locate_voronoi(mesh, X)
    return _locate_generic(mesh, X)


def locate(mesh: Mesh, x: TorusPoint) -> int:
    return int(locate_many(mesh, as_points(x, mesh.dim))[0])


def _locate_cartesian(mesh: Mesh, X: np.ndarray) -> np.ndarray:
    n = mesh.resolution
    scaled = X * n
    index = np.floor(scaled).astype(int)
    on_face = scaled == index
    # a point on a face belongs to both neighbours; the lower index wins on every axis
    index = np.where(on_face, np.minimum(index % n, (index - 1) % n), index % n)
    strides = n ** np.arange(mesh.dim - 1, -1, -1)
    return index @ strides


def _locate_voronoi(mesh: Mesh, X: np.ndarray) -> np.ndarray:
    k = min(4, mesh.n_cells)
    dist, idx = mesh._site_tree.query(X, k=k)
    dist, idx = np.atleast_2d(dist), np.atleast_2d(idx)
    if k == 1:
        return idx[:, 0]
    tied = dist <= dist[:, :1] + 1e-12
    return np.where(tied, idx, np.iinfo(np.int64).max).min(axis=1)


def _locate_generic(mesh: Mesh, X: np.ndarray) -> np.ndarray:
    found = np.full(len(X), -1, dtype=int)
    tree = cKDTree(X, boxsize=1.0)
    for cell in mesh.cells:
        candidates = tree.query_ball_point(cell.anchor.as_array(), r=cell.diameter + 1e-9)
        if not candidates:
            continue
        candidates = np.asarray(candidates, dtype=int)
        candidates = candidates[found[candidates] < 0]
        if len(candidates) == 0:
            continue
        inside = np.zeros(len(candidates), dtype=bool)
        for lifted in _shifted_lifts(cell, X[candidates]):
            inside |= cell.contains_lifted(lifted)
        found[candidates[inside]] = cell.id

    missing = np.flatnonzero(found < 0)
    if len(missing):
        logger.warning(f"{len(missing)} points fell between cells by rounding; assigning nearest anchor.")
        anchors = np.array([c.anchor.coords for c in mesh.cells])
        _, nearest = cKDTree(anchors, boxsize=1.0).query(X[missing])
        found[missing] = nearest
    return found


# --- Quadrature and sampling ---------------------------------------------------------------------

def cell_quadrature(mesh: Mesh, cell_id: int, quad_per_cell: int = 64) -> Tuple[np.ndarray, np.ndarray]:
    """Low-discrepancy nodes (lifted coordinates) and weights summing to the cell volume.

    Boxes use a centered lattice; polytopes are fanned into simplices from their
    vertex mean and filled with Halton points pushed onto each simplex.
    """
    key = (cell_id, quad_per_cell)
    if key in mesh._node_cache:
        return mesh._node_cache[key]

    cell = mesh.cell(cell_id)
    if cell.is_box:
        lower, upper = cell.bounding_box()
        per_axis = max(1, int(round(quad_per_cell ** (1.0 / mesh.dim))))
        while per_axis ** mesh.dim < quad_per_cell:
            per_axis += 1
        ticks = (np.arange(per_axis) + 0.5) / per_axis
        unit = np.array(list(itertools.product(ticks, repeat=mesh.dim)))
        nodes = lower + unit * (upper - lower)
        weights = np.full(len(nodes), cell.volume / len(nodes))
    else:
        nodes, weights = _simplex_fan_nodes(cell, quad_per_cell)

    nodes.setflags(write=False)
    weights.setflags(write=False)
    mesh._node_cache[key] = (nodes, weights)
    return nodes, weights


def _simplex_fan_nodes(cell: Cell, quad_per_cell: int) -> Tuple[np.ndarray, np.ndarray]:
    simplices = cell._simplices
    dim = simplices.shape[2]
    volumes = np.array([abs(np.linalg.det(s[1:] - s[0])) for s in simplices]) / math.factorial(dim)
    total = np.sum(volumes)
    node_blocks, weight_blocks = [], []
    for simplex, volume in zip(simplices, volumes):
        count = max(1, int(round(quad_per_cell * volume / total)))
        unit = qmc.Halton(d=dim, scramble=False).random(count + 1)[1:]
        ordered = np.sort(unit, axis=1)
        bary = np.diff(np.hstack([np.zeros((count, 1)), ordered, np.ones((count, 1))]), axis=1)
        node_blocks.append(bary @ simplex)
        # simplex volumes sum to the hull volume up to rounding
        weight_blocks.append(np.full(count, cell.volume * volume / total / count))
    return np.vstack(node_blocks), np.concatenate(weight_blocks)


def quadrature_cloud(mesh: Mesh, quad_per_cell: int = 64) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """All cell quadrature nodes stacked: (owner cell ids, lifted nodes, weights)."""
    owners, nodes, weights = [], [], []
    for cell in mesh.cells:
        y, w = cell_quadrature(mesh, cell.id, quad_per_cell)
        owners.append(np.full(len(y), cell.id))
        nodes.append(y)
        weights.append(w)
    return np.concatenate(owners), np.vstack(nodes), np.concatenate(weights)


def _density_values(rho0: Density, X: np.ndarray) -> np.ndarray:
    values = np.asarray(rho0(wrap_array(np.array(X, dtype=float))), dtype=float).reshape(len(X))
    if np.any(values < 0) or not np.all(np.isfinite(values)):
        raise InvalidInputError("Initial density must be finite and non-negative.")
    return values


def cell_mass(mesh: Mesh, cell_id: int, rho0: Density, quad_per_cell: int = 64) -> float:
    """M_i, the integral of rho0 over cell Q_i."""
    if quad_per_cell < 32:
        raise InvalidInputError(f"Cell quadrature needs at least 32 nodes, got {quad_per_cell}.")
    nodes, weights = cell_quadrature(mesh, cell_id, quad_per_cell)
    return float(np.dot(weights, _density_values(rho0, nodes)))


def cell_masses(mesh: Mesh, rho0: Density, quad_per_cell: int = 64) -> np.ndarray:
    """Vector of all M_i, evaluated with one density call."""
    if quad_per_cell < 32:
        raise InvalidInputError(f"Cell quadrature needs at least 32 nodes, got {quad_per_cell}.")
    owners, nodes, weights = quadrature_cloud(mesh, quad_per_cell)
    return np.bincount(owners, weights=weights * _density_values(rho0, nodes), minlength=mesh.n_cells)


def _uniform_candidate(cell: Cell, rng: np.random.Generator) -> np.ndarray:
    lower, upper = cell.bounding_box()
    if cell.is_box:
        return lower + rng.random(len(lower)) * (upper - lower)
    for _ in range(100000):
        y = lower + rng.random(len(lower)) * (upper - lower)
        if cell.contains_lifted(y[None, :])[0]:
            return y
    raise MeshConstructionError(f"Rejection sampling never hit cell {cell.id}.")


def sample_representative(
    mesh: Mesh,
    cell_id: int,
    rng: np.random.Generator,
    mode: str = "uniform",
    rho0: Optional[Density] = None,
    mass: Optional[float] = None,
    quad_per_cell: int = 64,
) -> TorusPoint:
    """Random point of Q_i, uniform or distributed as rho0 restricted to Q_i and divided by M_i."""
    if mode not in SAMPLING_MODES:
        raise InvalidInputError(f"Unknown sampling mode '{mode}', expected one of {SAMPLING_MODES}.")
    cell = mesh.cell(cell_id)
    if mode == "uniform":
        return TorusPoint(tuple(float(c) for c in wrap_array(_uniform_candidate(cell, rng))))

    if rho0 is None:
        raise InvalidInputError("Density sampling needs rho0.")
    if mass is None:
        mass = cell_mass(mesh, cell_id, rho0, quad_per_cell)
    if mass <= 0.0:
        raise EmptyCellError(f"Cell {cell_id} carries no mass; assign it zero weight.")

    nodes, _ = cell_quadrature(mesh, cell_id, quad_per_cell)
    if cell.is_box:
        lower, upper = cell.bounding_box()
        pilot = lower + rng.random((_ENVELOPE_PILOT, len(lower))) * (upper - lower)
    else:
        pilot = np.array([_uniform_candidate(cell, rng) for _ in range(_ENVELOPE_PILOT)])
    peak = max(float(np.max(_density_values(rho0, nodes))), float(np.max(_density_values(rho0, pilot))))
    # fixed for the whole draw; values above it are accepted outright
    envelope = 1.5 * peak + 1e-300
    warned = False
    for _ in range(1000000):
        y = _uniform_candidate(cell, rng)
        value = _density_values(rho0, y[None, :])[0]
        if value > envelope and not warned:
            logger.warning(f"Density {value:.4g} above rejection envelope {envelope:.4g} in cell {cell_id}.")
            warned = True
        if rng.random() * envelope <= value:
            return TorusPoint(tuple(float(c) for c in wrap_array(y)))
    raise EmptyCellError(f"Density rejection sampling in cell {cell_id} accepted nothing.")


# --- Serialization -------------------------------------------------------------------------------

def mesh_to_json(mesh: Mesh) -> Dict[str, Any]:
    return {
        "kind": mesh.kind,
        "d": mesh.dim,
        "dx": mesh.dx,
        "resolution": mesh.resolution,
        "jitter": mesh.jitter,
        "seed": mesh.seed,
        "volume_ratio": mesh.volume_ratio,
        "cells": [
            {"id": c.id, "volume": c.volume, "diameter": c.diameter, "anchor": list(c.anchor.coords), "geometry": c.geometry}
            for c in mesh.cells
        ],
    }


def mesh_from_json(payload: Dict[str, Any]) -> Mesh:
    """Rebuild a mesh exported by mesh_to_json."""
    try:
        kind, dim = payload["kind"], int(payload["d"])
        cells = []
        for entry in sorted(payload["cells"], key=lambda e: e["id"]):
            geometry = dict(entry["geometry"])
            extra = {k: v for k, v in geometry.items() if k not in ("type", "lower", "upper", "vertices")}
            if geometry["type"] == "box":
                cell = _box_cell(entry["id"], np.asarray(geometry["lower"]), np.asarray(geometry["upper"]), extra)
            else:
                cell = _polytope_cell(entry["id"], np.asarray(geometry["vertices"]), extra=extra)
            cells.append(Cell(id=cell.id, volume=cell.volume, diameter=cell.diameter,
                              anchor=TorusPoint(tuple(float(c) for c in entry["anchor"])), geometry=cell.geometry,
                              _equations=cell._equations, _simplices=cell._simplices))
    except (KeyError, TypeError) as e:
        raise InvalidInputError(f"Malformed mesh JSON: {e}")

    sites = None
    if kind == "voronoi":
        sites = np.array([c.geometry["site"] for c in cells])
    return _assemble(kind, dim, int(payload.get("resolution", 0)), cells, float(payload.get("jitter", 0.0)),
                     int(payload.get("seed", 0)), sites)


def write_mesh(path: str, mesh: Mesh):
    write_json(path, mesh_to_json(mesh))
    logger.info(f"Mesh with {mesh.n_cells} cells written to {path}")
