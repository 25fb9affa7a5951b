"""Geometry of the flat torus [0,1)^d: wrapping, minimal displacement, geodesic distance."""
import math

from dataclasses import dataclass
from typing import Sequence, Tuple, Union

import numpy as np

from lagflow.errors import InvalidInputError


ArrayLike = Union[Sequence[float], np.ndarray]


@dataclass(frozen=True)
class TorusPoint:
    """A point of the torus, every coordinate in [0,1)."""
    coords: Tuple[float, ...]

    def __post_init__(self):
        if len(self.coords) < 1:
            raise InvalidInputError("A torus point needs at least one coordinate.")
        for c in self.coords:
            if not (0.0 <= c < 1.0):
                raise InvalidInputError(f"Torus coordinate {c} outside [0,1); use wrap() first.")

    @property
    def dim(self) -> int:
        return len(self.coords)

    def as_array(self) -> np.ndarray:
        return np.asarray(self.coords, dtype=float)


@dataclass(frozen=True)
class TorusVector:
    """Minimal periodic displacement, every component in [-1/2, 1/2]."""
    components: Tuple[float, ...]

    def __post_init__(self):
        for c in self.components:
            if abs(c) > 0.5:
                raise InvalidInputError(f"Displacement component {c} is not a minimal representative.")

    @property
    def dim(self) -> int:
        return len(self.components)

    def norm(self) -> float:
        return math.sqrt(math.fsum(c * c for c in self.components))

    def as_array(self) -> np.ndarray:
        return np.asarray(self.components, dtype=float)


def wrap_array(raw: np.ndarray) -> np.ndarray:
    """Reduce coordinates mod 1 into [0,1); works on any array shape."""
    wrapped = np.mod(raw, 1.0)
    # np.mod(-1e-18, 1.0) rounds to 1.0
    wrapped[wrapped >= 1.0] = 0.0
    return wrapped


def displacement_array(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Componentwise minimal representative of y - x, in (-1/2, 1/2]."""
    diff = np.mod(np.asarray(y, dtype=float) - np.asarray(x, dtype=float), 1.0)
    diff[diff >= 1.0] = 0.0
    diff[diff > 0.5] -= 1.0
    return diff


def distance_array(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Geodesic torus distance between matching rows of x and y."""
    return np.linalg.norm(displacement_array(x, y), axis=-1)


def distance_matrix(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Pairwise geodesic distances, shape (len(x), len(y))."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.shape[1] != y.shape[1]:
        raise InvalidInputError(f"Dimension mismatch: {x.shape[1]} vs {y.shape[1]}.")
    return distance_array(x[:, None, :], y[None, :, :])


def as_points(points: Union[TorusPoint, ArrayLike], dim: int = None) -> np.ndarray:
    """Coerce a TorusPoint, a coordinate sequence or an (n,d) array into an (n,d) float array."""
    if isinstance(points, TorusPoint):
        arr = points.as_array()[None, :]
    else:
        arr = np.atleast_2d(np.asarray(points, dtype=float))
    if dim is not None and arr.shape[1] != dim:
        raise InvalidInputError(f"Expected points of dimension {dim}, got {arr.shape[1]}.")
    return arr


def wrap(raw: ArrayLike) -> TorusPoint:
    """Reduce a finite coordinate vector onto the torus."""
    arr = np.asarray(raw, dtype=float).ravel()
    if arr.size == 0 or not np.all(np.isfinite(arr)):
        raise InvalidInputError(f"Cannot wrap non-finite or empty coordinates: {raw}")
    return TorusPoint(tuple(float(c) for c in wrap_array(arr)))


def _check_dims(x: TorusPoint, y: TorusPoint):
    if x.dim != y.dim:
        raise InvalidInputError(f"Dimension mismatch: {x.dim} vs {y.dim}.")


def periodic_displacement(x: TorusPoint, y: TorusPoint) -> TorusVector:
    """Minimal displacement from x to y; a tie at magnitude 1/2 resolves to +1/2."""
    _check_dims(x, y)
    diff = displacement_array(x.as_array(), y.as_array())
    return TorusVector(tuple(float(c) for c in diff))


def periodic_distance(x: TorusPoint, y: TorusPoint) -> float:
    """Geodesic distance on the torus, never above sqrt(d)/2."""
    return periodic_displacement(x, y).norm()


def max_distance(dim: int) -> float:
    return math.sqrt(dim) / 2.0
