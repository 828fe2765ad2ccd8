"""Coordinates, distances and fixed-radius neighbor search.

Neighborhoods are open balls everywhere: a point at distance exactly `rho` is NOT a
neighbor, and the query point itself is never returned.
"""

import itertools
import logging
from abc import ABC, abstractmethod
from functools import cached_property

import numpy as np
from numpy.typing import ArrayLike
from scipy.spatial import ConvexHull, QhullError, cKDTree
from scipy.spatial.distance import pdist
from typing_extensions import override

from constants import LINEAR_SCAN_THRESHOLD, IndexKind
from errors import GeometryError

logger = logging.getLogger(__name__)


def as_points(coords: ArrayLike, dim: int | None = None) -> np.ndarray:
    """Coerce coordinates into an (n, d) float array.

    A flat sequence is read as n points in one dimension, unless `dim` says it is a
    single point.
    """
    points = np.asarray(coords, dtype=float)
    if points.ndim == 0:
        points = points.reshape(1, 1)
    elif points.ndim == 1:
        single = dim is not None and dim == points.size
        points = points.reshape(1, -1) if single else points[:, None]
    if points.ndim != 2:
        raise GeometryError("coordinates must be a 2-D array", shape=points.shape)
    if dim is not None and points.shape[0] and points.shape[1] != dim:
        raise GeometryError("dimension mismatch", expected=dim, got=points.shape[1])
    if not np.all(np.isfinite(points)):
        raise GeometryError("coordinates must be finite")
    return points


class SpatialIndex(ABC):
    """Abstract fixed-radius neighbor search over a frozen point array."""

    def __init__(self, points: np.ndarray):
        self.points = points

    @abstractmethod
    def candidates(self, point: np.ndarray, rho: float) -> np.ndarray:
        """Indices that may lie within `rho` of `point` (a superset is allowed)."""
        ...

    def query(self, point: np.ndarray, rho: float) -> np.ndarray:
        """Ascending indices j with 0 < |points[j] - point| < rho."""
        idx = self.candidates(point, rho)
        if idx.size == 0:
            return idx
        dist = np.linalg.norm(self.points[idx] - point, axis=1)
        keep = (dist < rho) & (dist > 0.0)
        return np.sort(idx[keep])


class LinearScanIndex(SpatialIndex):
    """Brute force; every point is a candidate."""

    @override
    def candidates(self, point: np.ndarray, rho: float) -> np.ndarray:
        return np.arange(len(self.points), dtype=np.intp)


class GridIndex(SpatialIndex):
    """Uniform cell grid with a fixed cell width."""

    def __init__(self, points: np.ndarray, cell: float):
        super().__init__(points)
        if cell <= 0:
            raise GeometryError("grid cell width must be positive", cell=cell)
        self.cell = float(cell)
        self.table: dict[tuple[int, ...], np.ndarray] = {}

        keys = np.floor(points / self.cell).astype(np.int64)
        buckets: dict[tuple[int, ...], list[int]] = {}
        for i, key in enumerate(map(tuple, keys)):
            buckets.setdefault(key, []).append(i)
        self.table = {k: np.asarray(v, dtype=np.intp) for k, v in buckets.items()}

    @override
    def candidates(self, point: np.ndarray, rho: float) -> np.ndarray:
        span = int(np.ceil(rho / self.cell))
        center = np.floor(point / self.cell).astype(np.int64)
        found = []
        for offset in itertools.product(range(-span, span + 1), repeat=len(center)):
            cell = self.table.get(tuple(int(c) for c in center + offset))
            if cell is not None:
                found.append(cell)
        if not found:
            return np.empty(0, dtype=np.intp)
        return np.concatenate(found)


class TreeIndex(SpatialIndex):
    """KD-tree backed search."""

    def __init__(self, points: np.ndarray):
        super().__init__(points)
        self.tree = cKDTree(points)

    @override
    def candidates(self, point: np.ndarray, rho: float) -> np.ndarray:
        # query_ball_point is a closed ball; `query` trims to the open one.
        return np.asarray(self.tree.query_ball_point(point, rho), dtype=np.intp)


def build_index(points: np.ndarray, rho: float, kind: IndexKind = "auto") -> SpatialIndex:
    """Build a neighbor index suited to queries of radius `rho`."""
    if kind == "auto":
        kind = "linear" if len(points) < LINEAR_SCAN_THRESHOLD else "grid"
    if kind == "linear":
        return LinearScanIndex(points)
    if kind == "grid":
        return GridIndex(points, cell=rho)
    if kind == "tree":
        return TreeIndex(points)
    raise GeometryError("unknown index kind", kind=kind)


class LocationSet:
    """Ordered, duplicate-free set of d-dimensional locations."""

    def __init__(self, coords: ArrayLike, dim: int | None = None):
        points = as_points(coords, dim=dim)
        if len(points) > 1 and len(np.unique(points, axis=0)) != len(points):
            raise GeometryError("duplicate locations", n=len(points))
        points.setflags(write=False)
        self._points = points
        self._dim = points.shape[1] if points.size else (dim or 0)
        self._indexes: dict[tuple[float, str], SpatialIndex] = {}

    @classmethod
    def empty(cls, dim: int) -> "LocationSet":
        """An empty set of the given dimension."""
        return cls(np.empty((0, dim)), dim=dim)

    @property
    def points(self) -> np.ndarray:
        """Read-only (n, d) coordinate array."""
        return self._points

    @property
    def dim(self) -> int:
        """Spatial dimension d."""
        return self._dim

    def __len__(self) -> int:
        return len(self._points)

    def __getitem__(self, i: int) -> np.ndarray:
        return self._points[i]

    def index(self, rho: float, kind: IndexKind = "auto") -> SpatialIndex:
        """Cached neighbor index for radius `rho`."""
        key = (float(rho), kind)
        if key not in self._indexes:
            self._indexes[key] = build_index(self._points, rho, kind)
        return self._indexes[key]

    def concat(self, other: "LocationSet") -> "LocationSet":
        """This set followed by `other`; duplicates across the two are rejected."""
        if len(self) == 0:
            return other
        if len(other) == 0:
            return self
        if other.dim != self.dim:
            raise GeometryError("dimension mismatch", expected=self.dim, got=other.dim)
        return LocationSet(np.vstack([self._points, other.points]))

    def contains(self, point: ArrayLike) -> bool:
        """True when `point` coincides exactly with a member."""
        p = np.asarray(point, dtype=float).reshape(-1)
        if len(self) == 0:
            return False
        return bool(np.any(np.all(self._points == p, axis=1)))

    @cached_property
    def diameter(self) -> float:
        """Largest pairwise distance."""
        if len(self) < 2:
            return 0.0
        if self.dim == 1:
            return float(np.ptp(self._points))
        try:
            vertices = self._points[ConvexHull(self._points).vertices]
        except QhullError:
            # degenerate (e.g. collinear) sets
            vertices = self._points
        return float(pdist(vertices).max())


def min_separation(locations: LocationSet) -> float:
    """Minimal pairwise Euclidean distance q."""
    if len(locations) < 2:
        raise GeometryError("insufficient points", n=len(locations))
    dist, _ = cKDTree(locations.points).query(locations.points, k=2)
    return float(dist[:, 1].min())


def radius_neighbors(
    locations: LocationSet, s: ArrayLike, rho: float, kind: IndexKind = "auto"
) -> np.ndarray:
    """Ascending indices of members strictly within `rho` of `s`, excluding `s` itself."""
    if not rho > 0:
        raise GeometryError("radius must be positive", rho=rho)
    if len(locations) == 0:
        return np.empty(0, dtype=np.intp)
    point = np.asarray(s, dtype=float).reshape(-1)
    if point.size != locations.dim:
        raise GeometryError("dimension mismatch", expected=locations.dim, got=point.size)
    return locations.index(rho, kind).query(point, rho)
