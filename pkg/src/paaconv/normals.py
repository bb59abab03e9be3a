"""Surface normals from k-nearest-neighbour plane fits, oriented toward a center."""
import logging

import numpy as np
from scipy.spatial import cKDTree

from .exceptions import DegenerateNeighborhoodError, InvalidInputError
from .geometry import check_positions

logger = logging.getLogger(__name__)

DEFAULT_K = 16
DEGENERATE_RATIO = 1e-12
FALLBACK_NORMAL = np.array([0.0, 0.0, 1.0])


class KdTree:
    """k-d tree over point positions with deterministic k-NN ordering.

    Results are sorted by ascending Euclidean distance, ties broken by
    ascending point index.
    """

    def __init__(self, positions, leafsize=16):
        self.positions = check_positions(positions)
        if len(self.positions) == 0:
            raise InvalidInputError("cannot build a k-d tree over zero points")
        self._tree = cKDTree(self.positions, leafsize=leafsize)

    @property
    def n(self):
        return len(self.positions)

    def knn(self, queries, k, workers=1):
        """Indices of the ``min(k, n)`` nearest points of each query row."""
        if k < 1:
            raise ValueError(f"k must be >= 1, got {k}")
        queries = np.atleast_2d(np.asarray(queries, dtype=np.float64))
        k = min(int(k), self.n)
        # over-fetch so ties straddling the k-th neighbour can be re-ranked by index
        fetch = min(self.n, k + 8)
        _, idx = self._tree.query(queries, k=fetch, workers=workers)
        idx = np.asarray(idx).reshape(len(queries), fetch)
        d2 = ((self.positions[idx] - queries[:, None, :]) ** 2).sum(axis=-1)
        order = np.lexsort((idx, d2), axis=-1)[:, :k]
        out = np.take_along_axis(idx, order, axis=1)
        if fetch < self.n:
            kth = np.take_along_axis(d2, order[:, -1:], axis=1)[:, 0]
            # tie run reaches the fetch boundary: rank those rows exhaustively
            for r in np.flatnonzero(d2.max(axis=1) <= kth):
                row_d = ((self.positions - queries[r]) ** 2).sum(axis=1)
                out[r] = np.lexsort((np.arange(self.n), row_d))[:k]
        return out


def knn(tree, query, k):
    """k nearest neighbours of a single query point."""
    return tree.knn(np.asarray(query, dtype=np.float64).reshape(1, 3), k)[0]


def _plane_normals(neighborhoods):
    """Smallest-eigenvalue eigenvectors of each (k, 3) neighbourhood covariance."""
    centered = neighborhoods - neighborhoods.mean(axis=1, keepdims=True)
    cov = np.einsum("nki,nkj->nij", centered, centered) / neighborhoods.shape[1]
    w, v = np.linalg.eigh(cov)
    degenerate = ~(w[:, 1] > DEGENERATE_RATIO * w[:, 2])
    return v[:, :, 0], degenerate


def fit_plane_normal(neighbor_positions):
    """Unit normal of the total-least-squares plane through the points (sign arbitrary)."""
    pts = np.asarray(neighbor_positions, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 3 or len(pts) < 3:
        raise DegenerateNeighborhoodError("need at least 3 points to fit a plane")
    normal, degenerate = _plane_normals(pts[None])
    if degenerate[0]:
        raise DegenerateNeighborhoodError("neighbourhood is collinear or coincident")
    return normal[0] / np.linalg.norm(normal[0])


def orient_normal(normal, point, center):
    """Flip ``normal`` so it points toward ``center``; a perpendicular normal is kept."""
    normal = np.asarray(normal, dtype=np.float64)
    d = np.dot(normal, np.asarray(center, dtype=np.float64) - np.asarray(point, dtype=np.float64))
    return -normal if d < 0 else normal


def estimate_normals(positions, k=DEFAULT_K, center=(0.0, 0.0, 0.0), workers=1):
    """Oriented unit normal of every point.

    Returns ``(normals, n_fallback)``. Points whose neighbourhood is
    degenerate get ``(0, 0, 1)`` oriented toward ``center``; their count is
    the second return value.
    """
    positions = check_positions(positions)
    if len(positions) < 3:
        raise InvalidInputError(f"need at least 3 points to estimate normals, got {len(positions)}")
    if k < 3:
        raise ValueError(f"k must be >= 3, got {k}")
    center = np.asarray(center, dtype=np.float64)
    tree = KdTree(positions)
    idx = tree.knn(positions, k, workers=workers)
    normals, degenerate = _plane_normals(positions[idx])
    normals = normals / np.linalg.norm(normals, axis=1, keepdims=True)
    normals[degenerate] = FALLBACK_NORMAL
    flip = np.einsum("ij,ij->i", normals, center - positions) < 0
    normals[flip] *= -1.0
    n_fallback = int(degenerate.sum())
    if n_fallback:
        logger.info("normal estimation fell back to (0,0,1) for %d points", n_fallback)
    return normals, n_fallback
