"""Voxel-grid binning of a partial point cloud and atrous neighbour arithmetic.

Every point falls in exactly one cell of a regular grid whose origin is the
componentwise minimum of the positions. Cells are stored sorted by their
integer coordinate, so iteration order is deterministic.
"""
import itertools

import numpy as np
import scipy.sparse as sp

from .exceptions import InvalidInputError

DEFAULT_CELL_SIZE = 0.05

# lexicographic in (i, j, k); index 13 is the centre tap
UNIT_OFFSETS = np.array(list(itertools.product((-1, 0, 1), repeat=3)), dtype=np.int64)
N_TAPS = len(UNIT_OFFSETS)

_KEY_SHIFT = 1 << 19
_KEY_BASE = 1 << 20


def atrous_offsets(stride):
    """Return the 27 cell offsets of a 3x3x3 kernel dilated by ``stride``.

    Rows are ordered lexicographically by the undilated offset (i, j, k).
    """
    if isinstance(stride, bool) or int(stride) != stride or stride < 1:
        raise ValueError(f"stride must be a positive integer, got {stride!r}")
    return UNIT_OFFSETS * int(stride)


def check_positions(positions):
    positions = np.asarray(positions, dtype=np.float64)
    if positions.ndim != 2 or positions.shape[1] != 3:
        raise InvalidInputError(f"positions must have shape (n, 3), got {positions.shape}")
    bad = ~np.isfinite(positions).all(axis=1)
    if bad.any():
        raise InvalidInputError(f"non-finite coordinate at point {int(np.flatnonzero(bad)[0])}")
    return positions


def cell_coordinates(positions, cell_size, origin=None):
    """Integer cell coordinate of each position (floor semantics)."""
    positions = check_positions(positions)
    if not cell_size > 0:
        raise ValueError(f"cell_size must be positive, got {cell_size!r}")
    if origin is None:
        origin = positions.min(axis=0) if len(positions) else np.zeros(3)
    return np.floor((positions - origin) / cell_size).astype(np.int64)


def _linear_keys(coords):
    if coords.size and np.abs(coords).max() >= _KEY_SHIFT - 64:
        raise InvalidInputError("grid too large for cell_size; increase cell_size")
    c = coords + _KEY_SHIFT
    return (c[..., 0] * _KEY_BASE + c[..., 1]) * _KEY_BASE + c[..., 2]


class VoxelGrid:
    """Cells of a partial point cloud with cached per-cell feature means.

    Attributes
    ----------
    cell_size : float
    origin : ndarray of shape (3,)
    keys : ndarray of shape (m, 3)
        Occupied cell coordinates, sorted lexicographically.
    point_cell : ndarray of shape (n,)
        Row of ``keys`` holding each point.
    counts : ndarray of shape (m,)
    cell_means : ndarray of shape (m, c) or None
    """

    def __init__(self, positions, cell_size, features=None):
        positions = check_positions(positions)
        if not cell_size > 0:
            raise ValueError(f"cell_size must be positive, got {cell_size!r}")
        self.cell_size = float(cell_size)
        self.origin = positions.min(axis=0) if len(positions) else np.zeros(3)
        coords = cell_coordinates(positions, cell_size, self.origin)
        self.n_points = len(positions)
        lin = _linear_keys(coords)
        self._lin, first, self.point_cell = np.unique(lin, return_index=True, return_inverse=True)
        self.point_cell = self.point_cell.reshape(-1)
        self.keys = coords[first] if len(first) else np.zeros((0, 3), dtype=np.int64)
        self.counts = np.bincount(self.point_cell, minlength=len(self.keys))
        # membership (m x n) and its row-normalised mean operator
        n, m = self.n_points, len(self.keys)
        self._members = sp.csr_matrix(
            (np.ones(n), (self.point_cell, np.arange(n))), shape=(m, n)
        )
        inv = 1.0 / np.maximum(self.counts, 1)
        self._mean_op = sp.csr_matrix(
            (inv[self.point_cell], (self.point_cell, np.arange(n))), shape=(m, n)
        )
        self._neighbors = {}
        self.cell_means = None if features is None else self.pool(features)

    @property
    def n_cells(self):
        return len(self.keys)

    @property
    def cells(self):
        """Mapping from cell coordinate to the sorted indices of its points."""
        order = np.argsort(self.point_cell, kind="stable")
        bounds = np.cumsum(self.counts)[:-1]
        groups = np.split(order, bounds) if self.n_cells else []
        return {tuple(int(v) for v in k): g.tolist() for k, g in zip(self.keys, groups)}

    def lookup(self, coords):
        """Row index of each cell coordinate in ``keys``; -1 where absent."""
        coords = np.asarray(coords, dtype=np.int64)
        lin = _linear_keys(coords)
        pos = np.searchsorted(self._lin, lin)
        pos = np.minimum(pos, max(self.n_cells - 1, 0))
        found = self.n_cells > 0
        hit = (self._lin[pos] == lin) if found else np.zeros(lin.shape, dtype=bool)
        return np.where(hit, pos, -1)

    def neighbor_table(self, stride):
        """(m, 27) rows of the cells at each dilated offset, -1 for empty cells."""
        stride = int(stride)
        if stride not in self._neighbors:
            offsets = atrous_offsets(stride)
            self._neighbors[stride] = self.lookup(self.keys[:, None, :] + offsets[None, :, :])
        return self._neighbors[stride]

    def tap_pairs(self, stride):
        """Per tap ``(t, rows, src)``: cells ``rows`` whose tap-``t`` neighbour is the occupied cell ``src``."""
        stride = int(stride)
        key = ("pairs", stride)
        if key not in self._neighbors:
            nbr = self.neighbor_table(stride)
            pairs = []
            for t in range(N_TAPS):
                rows = np.flatnonzero(nbr[:, t] >= 0)
                if len(rows):
                    pairs.append((t, rows, nbr[rows, t]))
            self._neighbors[key] = pairs
        return self._neighbors[key]

    def pool(self, features):
        """Per-cell mean of ``features`` (rows aligned with the grid's points)."""
        features = np.asarray(features, dtype=np.float64)
        if features.ndim != 2 or len(features) != self.n_points:
            raise InvalidInputError(
                f"features must have {self.n_points} rows, got shape {features.shape}"
            )
        return np.asarray(self._mean_op @ features)

    def pool_backward(self, d_means):
        """Gradient of ``pool`` w.r.t. the point features."""
        return np.asarray(self._mean_op.T @ d_means)

    def scatter_sum(self, values):
        """Sum point rows into their cells."""
        return np.asarray(self._members @ values)

    def cell_mean(self, cell):
        """Cached mean of ``cell``; the zero vector when the cell is empty."""
        if self.cell_means is None:
            raise InvalidInputError("grid was built without features")
        row = self.lookup(np.asarray(cell, dtype=np.int64).reshape(1, 3))[0]
        if row < 0:
            return np.zeros(self.cell_means.shape[1])
        return self.cell_means[row].copy()


def build_grid(positions, cell_size=DEFAULT_CELL_SIZE, features=None):
    """Bin ``positions`` into a :class:`VoxelGrid`; cache means of ``features`` if given."""
    return VoxelGrid(positions, cell_size, features)


def cell_mean(grid, cell):
    return grid.cell_mean(cell)


def canonical_order(positions, cell_size, features=None):
    """Permutation sorting points by cell, then position, then features.

    Remaining ties keep input order (the sort is stable). Points tied on every
    key are indistinguishable, so any permutation of a block yields the same
    sorted sequence.
    """
    positions = check_positions(positions)
    coords = cell_coordinates(positions, cell_size)
    rel = positions - (positions.min(axis=0) if len(positions) else 0.0)
    keys = []
    if features is not None:
        features = np.asarray(features, dtype=np.float64)
        keys.extend(features[:, j] for j in range(features.shape[1] - 1, -1, -1))
    keys.extend(rel[:, j] for j in (2, 1, 0))
    keys.extend(coords[:, j] for j in (2, 1, 0))
    return np.lexsort(keys)
