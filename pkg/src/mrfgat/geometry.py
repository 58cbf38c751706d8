"""
Point-cloud preprocessing and directed kNN graph construction.

Neighbor rows put the point itself first, then the remaining points by
ascending Euclidean distance, ties going to the lower point index. Both
kNN backends share the distance arithmetic below, so they agree bit for
bit, including on duplicate points.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Dict, Optional

import numpy as np
from scipy.spatial import cKDTree
from trimesh import Trimesh
from trimesh.sample import sample_surface as sample_trimesh_surface

from .errors import DegenerateInputError, DimensionError, ValidationError

# Rows of the distance matrix materialised at once by the brute-force backend.
_BRUTE_FORCE_ROWS = 256
# Relative and absolute slack on the kd-tree's k-th distance when gathering
# candidates; exact ordering is recomputed afterwards.
_RADIUS_SLACK = 1e-9
_RADIUS_FLOOR = 1e-12


@dataclass
class PointCloud:
    """N points in 3D, optionally labelled with a class index."""

    points: np.ndarray
    label: Optional[int] = None

    def __post_init__(self) -> None:
        self.points = np.asarray(self.points, dtype=np.float64)
        if self.points.ndim != 2 or self.points.shape[1] != 3:
            raise DimensionError(f"point cloud must be N x 3, got shape {self.points.shape}")
        if self.points.shape[0] < 1:
            raise ValidationError("point cloud needs at least one point")
        if not np.isfinite(self.points).all():
            raise ValidationError("point cloud coordinates must be finite")

    @property
    def num_points(self) -> int:
        return int(self.points.shape[0])


@dataclass
class TriangleMesh:
    vertices: np.ndarray
    faces: np.ndarray
    # Degenerate faces the reader discarded while building this mesh.
    dropped_faces: int = 0

    def __post_init__(self) -> None:
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.faces = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
        if self.faces.size and (self.faces.min() < 0 or self.faces.max() >= len(self.vertices)):
            raise ValidationError(
                f"face indices must lie in [0, {len(self.vertices)}), "
                f"got range [{self.faces.min()}, {self.faces.max()}]"
            )
        collapsed = (self.faces[:, 0] == self.faces[:, 1]) & (self.faces[:, 1] == self.faces[:, 2])
        if collapsed.any():
            raise ValidationError(f"{int(collapsed.sum())} faces repeat one vertex three times")

    def areas(self) -> np.ndarray:
        a, b, c = (self.vertices[self.faces[:, i]] for i in range(3))
        # Huge coordinates overflow to inf; sample_surface rejects those meshes.
        with np.errstate(over="ignore", invalid="ignore"):
            return 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)


@dataclass
class NeighborGraph:
    """
    Directed kNN graph over one cloud.

    ``indices[i, 0] == i``; ``edges[i, j] = p_i - p_{indices[i, j]}``.
    """

    k: int
    indices: np.ndarray
    edges: np.ndarray

    @property
    def num_points(self) -> int:
        return int(self.indices.shape[0])

    def truncate(self, k: int) -> "NeighborGraph":
        """The graph for a smaller neighbor count: the first ``k`` columns of every row."""
        if not 1 <= k <= self.k:
            raise ValidationError(f"cannot truncate a k={self.k} graph to k={k}")
        return NeighborGraph(k=k, indices=self.indices[:, :k], edges=self.edges[:, :k])

    def neighbor_points(self, points: np.ndarray) -> np.ndarray:
        """Coordinates p_ij of every neighbor, shaped N x k x 3."""
        return points[self.indices]


def _squared_distances(diff: np.ndarray) -> np.ndarray:
    # Spelled out so every backend rounds identically.
    return diff[..., 0] * diff[..., 0] + diff[..., 1] * diff[..., 1] + diff[..., 2] * diff[..., 2]


def _validate_k(k: int, n: int) -> None:
    if k < 1:
        raise ValidationError(f"k must be at least 1, got {k}")
    if k > n:
        raise ValidationError(f"k={k} exceeds the number of points N={n}")


def _graph_from_indices(points: np.ndarray, indices: np.ndarray) -> NeighborGraph:
    edges = points[:, None, :] - points[indices]
    return NeighborGraph(k=int(indices.shape[1]), indices=indices, edges=edges)


def normalize_unit_sphere(pc: PointCloud) -> PointCloud:
    """Centre the cloud on its centroid and scale the farthest point to norm 1."""
    centered = pc.points - pc.points.mean(axis=0)
    scale = np.sqrt(_squared_distances(centered).max())
    if not scale > 0:
        raise DegenerateInputError("all points coincide; cannot normalise to the unit sphere")
    return PointCloud(centered / scale, label=pc.label)


def sample_surface(mesh: TriangleMesh, n: int, rng: np.random.Generator) -> PointCloud:
    """
    Draw ``n`` points uniformly over the mesh surface.

    Triangles are picked with probability proportional to area and points
    placed by reflected uniform barycentric draws, both by ``trimesh`` from
    the caller's generator.
    """
    if n < 1:
        raise ValidationError(f"sample count must be at least 1, got {n}")
    if not len(mesh.faces):
        raise DegenerateInputError("mesh has no faces")
    areas = mesh.areas()
    total = areas.sum()
    if not (np.isfinite(total) and total > 0):
        raise DegenerateInputError(f"mesh total surface area must be finite and positive, got {total}")
    surface = Trimesh(vertices=mesh.vertices, faces=mesh.faces, process=False)
    points, _ = sample_trimesh_surface(surface, n, face_weight=areas, seed=rng)
    return PointCloud(points)


def knn_graph_bruteforce(pc: PointCloud, k: int) -> NeighborGraph:
    """Exact kNN graph from the full pairwise distance matrix, a block of rows at a time."""
    points = pc.points
    n = len(points)
    _validate_k(k, n)
    indices = np.empty((n, k), dtype=np.int64)
    for start in range(0, n, _BRUTE_FORCE_ROWS):
        rows = np.arange(start, min(n, start + _BRUTE_FORCE_ROWS))
        distances = _squared_distances(points[rows, None, :] - points[None, :, :])
        distances[np.arange(len(rows)), rows] = -1.0
        # A stable sort keeps equal distances in index order.
        indices[rows] = np.argsort(distances, axis=1, kind="stable")[:, :k]
    return _graph_from_indices(points, indices)


def knn_graph_indexed(pc: PointCloud, k: int) -> NeighborGraph:
    """
    Exact kNN graph through a k-d tree.

    The tree's k-th neighbor distance bounds a ball query; the candidates in
    that ball are re-ranked with the brute-force arithmetic and tie rule, so
    points tied at the k-th distance are resolved by index, not by tree order.
    """
    points = pc.points
    n = len(points)
    _validate_k(k, n)
    tree = cKDTree(points)
    kth_distance, _ = tree.query(points, k=k)
    radius = np.asarray(kth_distance).reshape(n, k)[:, -1]
    radius = radius * (1.0 + _RADIUS_SLACK) + _RADIUS_FLOOR
    candidates = tree.query_ball_point(points, r=radius)
    indices = np.empty((n, k), dtype=np.int64)
    for i, ball in enumerate(candidates):
        ball = np.sort(np.asarray(ball, dtype=np.int64))
        distances = _squared_distances(points[i] - points[ball])
        distances[ball == i] = -1.0
        indices[i] = ball[np.argsort(distances, kind="stable")[:k]]
    return _graph_from_indices(points, indices)


KNN_BACKENDS: Dict[str, Callable[[PointCloud, int], NeighborGraph]] = {
    "bruteforce": knn_graph_bruteforce,
    "indexed": knn_graph_indexed,
}
