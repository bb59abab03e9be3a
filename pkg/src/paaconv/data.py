"""Point-cloud ingestion, block partitioning, feature assembly and synthetic rooms.

Cloud text format, one point per line::

    x y z r g b label
    x y z r g b nx ny nz label      # with normals

Coordinates are meters, colors integers in 0-255, labels integers with -1
meaning unlabeled. Lines starting with ``#`` are comments.
"""
import math
from dataclasses import dataclass, replace

import numpy as np

from .exceptions import ConfigError, InvalidInputError, ParseError
from .geometry import DEFAULT_CELL_SIZE, canonical_order

CLASS_NAMES = (
    "ceiling", "floor", "wall", "beam", "column", "window", "door",
    "chair", "table", "bookcase", "sofa", "board", "clutter",
)
MAX_CLASSES = len(CLASS_NAMES)
PALETTE = np.array([
    [233, 229, 107], [95, 156, 196], [179, 116, 81], [241, 149, 131],
    [81, 163, 148], [77, 174, 84], [108, 135, 75], [41, 49, 101],
    [79, 79, 76], [223, 52, 52], [89, 47, 95], [81, 109, 114],
    [233, 233, 229],
], dtype=np.uint8)
UNLABELED_COLOR = np.array([128, 128, 128], dtype=np.uint8)

DEFAULT_BLOCK_SIZE = 1.0
DEFAULT_POINTS_PER_BLOCK = 4096
MIN_BLOCK_POINTS = 64


@dataclass
class RoomCloud:
    """A whole room: absolute positions, 0-255 colors, labels, optional normals."""

    positions: np.ndarray
    colors: np.ndarray
    labels: np.ndarray
    normals: np.ndarray = None

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64).reshape(-1, 3)
        self.colors = np.asarray(self.colors, dtype=np.int64).reshape(-1, 3)
        self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        if self.normals is not None:
            self.normals = np.asarray(self.normals, dtype=np.float64).reshape(-1, 3)
        n = len(self.positions)
        if len(self.colors) != n or len(self.labels) != n or (
            self.normals is not None and len(self.normals) != n
        ):
            raise InvalidInputError("positions, colors, labels and normals must have equal length")

    def __len__(self):
        return len(self.positions)

    @property
    def bounds(self):
        """(min corner, max corner) of the bounding box."""
        if not len(self):
            return np.zeros(3), np.zeros(3)
        return self.positions.min(axis=0), self.positions.max(axis=0)


@dataclass
class Block:
    """Fixed-size partial point cloud fed to the network.

    ``features`` columns: block-relative xyz, rgb in [0, 1], room-normalized
    xyz in [0, 1], then optionally the oriented normal. ``indices`` point back
    into the source room (repeated for up-sampled points).
    """

    positions: np.ndarray
    features: np.ndarray
    labels: np.ndarray
    indices: np.ndarray

    def __len__(self):
        return len(self.positions)

    @property
    def n_channels(self):
        return self.features.shape[1]

    def take(self, rows):
        return Block(self.positions[rows], self.features[rows], self.labels[rows], self.indices[rows])


# -- text format ------------------------------------------------------------------

def load_cloud(path, n_classes=MAX_CLASSES):
    """Parse a cloud file; labels must lie in [-1, n_classes)."""
    positions, colors, labels, normals = [], [], [], []
    width = None
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) not in (7, 10):
                raise ParseError(f"expected 7 or 10 fields, got {len(parts)}", lineno)
            if width is None:
                width = len(parts)
            elif len(parts) != width:
                raise ParseError(f"mixed field counts ({width} then {len(parts)})", lineno)
            try:
                xyz = [float(v) for v in parts[:3]]
                rgb = [int(v) for v in parts[3:6]]
                nrm = [float(v) for v in parts[6:9]] if width == 10 else None
                label = int(parts[-1])
            except ValueError as exc:
                raise ParseError(str(exc), lineno) from None
            if not all(math.isfinite(v) for v in xyz + (nrm or [])):
                raise ParseError("non-finite value", lineno)
            if any(c < 0 or c > 255 for c in rgb):
                raise ParseError(f"color {rgb} outside 0-255", lineno)
            if label < -1 or label >= n_classes:
                raise ParseError(f"unknown label id {label}", lineno)
            positions.append(xyz)
            colors.append(rgb)
            labels.append(label)
            if nrm is not None:
                normals.append(nrm)
    return RoomCloud(
        np.array(positions, dtype=np.float64).reshape(-1, 3),
        np.array(colors, dtype=np.int64).reshape(-1, 3),
        np.array(labels, dtype=np.int64),
        np.array(normals, dtype=np.float64).reshape(-1, 3) if width == 10 else None,
    )


def write_cloud(path, room, labels=None):
    """Write ``room`` in the text format; ``labels`` overrides the stored labels."""
    labels = room.labels if labels is None else np.asarray(labels, dtype=np.int64)
    with open(path, "w") as fh:
        for i in range(len(room)):
            fields = [repr(float(v)) for v in room.positions[i]]
            fields += [str(int(v)) for v in room.colors[i]]
            if room.normals is not None:
                fields += [repr(float(v)) for v in room.normals[i]]
            fields.append(str(int(labels[i])))
            fh.write(" ".join(fields) + "\n")


# -- blocks ---------------------------------------------------------------------------

def _tiles(room, block_size):
    """Map of (ix, iy) tile -> sorted room indices, in sorted tile order."""
    lo = room.positions.min(axis=0)
    tile = np.floor((room.positions[:, :2] - lo[:2]) / block_size).astype(np.int64)
    order = np.lexsort((np.arange(len(room)), tile[:, 1], tile[:, 0]))
    keys, starts = np.unique(tile[order], axis=0, return_index=True)
    groups = np.split(order, starts[1:])
    return [(tuple(int(v) for v in k), np.sort(g)) for k, g in zip(keys, groups)]


def block_features(room, indices):
    """Nine feature channels for the room points ``indices``."""
    pos = room.positions[indices]
    room_lo, room_hi = room.bounds
    extent = room_hi - room_lo
    safe = np.where(extent > 0, extent, 1.0)
    room_norm = np.where(extent > 0, (pos - room_lo) / safe, 0.0)
    rel = pos - pos.min(axis=0)
    return np.hstack([rel, room.colors[indices] / 255.0, np.clip(room_norm, 0.0, 1.0)])


def _resample(rng, members, n_pts):
    if len(members) > n_pts:
        return np.sort(rng.choice(members, size=n_pts, replace=False))
    extra = rng.choice(members, size=n_pts - len(members), replace=True)
    return np.concatenate([members, extra])


def _make_block(room, rows, member_rows):
    # block-relative coordinates use the minimum over the whole tile
    feats = block_features(room, rows)
    pos = room.positions[rows]
    feats[:, :3] = pos - room.positions[member_rows].min(axis=0)
    return Block(pos, feats, room.labels[rows].copy(), np.asarray(rows, dtype=np.int64))


def partition_blocks(room, block_size=DEFAULT_BLOCK_SIZE, n_pts=DEFAULT_POINTS_PER_BLOCK,
                     seed=0, min_points=MIN_BLOCK_POINTS):
    """Tile the floor plan into ``block_size`` columns and resample each to ``n_pts``.

    Columns with fewer than ``min_points`` points are dropped. Larger columns
    are down-sampled without replacement; smaller ones keep every point and
    are padded by sampling with replacement.
    """
    if len(room) == 0:
        raise InvalidInputError("cannot partition an empty room")
    if not block_size > 0 or n_pts < 1:
        raise ConfigError("block_size and n_pts must be positive")
    rng = np.random.default_rng(seed)
    blocks = []
    for _, members in _tiles(room, block_size):
        if len(members) < min_points:
            continue
        blocks.append(_make_block(room, _resample(rng, members, n_pts), members))
    return blocks


def cover_blocks(room, block_size=DEFAULT_BLOCK_SIZE, n_pts=DEFAULT_POINTS_PER_BLOCK, seed=0,
                 points=None):
    """Blocks covering every room point (or every index in ``points``) at least once.

    Crowded columns are split into near-equal random chunks of at most
    ``n_pts`` points; each chunk is padded to ``n_pts`` with replacement.
    Features are always relative to the full column and room.
    """
    if len(room) == 0:
        return []
    rng = np.random.default_rng(seed)
    wanted = None
    if points is not None:
        wanted = np.zeros(len(room), dtype=bool)
        wanted[np.asarray(points, dtype=np.int64)] = True
    blocks = []
    for _, members in _tiles(room, block_size):
        targets = members if wanted is None else members[wanted[members]]
        if len(targets) == 0:
            continue
        n_chunks = -(-len(targets) // n_pts)
        for chunk in np.array_split(rng.permutation(targets), n_chunks):
            blocks.append(_make_block(room, _resample(rng, np.sort(chunk), n_pts), members))
    return blocks


def attach_normals(blocks, normals):
    """Append the room-level ``normals`` of each block point as three channels."""
    normals = np.asarray(normals, dtype=np.float64)
    out = []
    for b in blocks:
        if b.n_channels != 9:
            raise InvalidInputError(f"expected 9-channel blocks, got {b.n_channels}")
        out.append(replace(b, features=np.hstack([b.features, normals[b.indices]])))
    return out


def canonical_sort(block, cell_size=DEFAULT_CELL_SIZE):
    """Reorder points by grid cell, then block-relative position, then features."""
    return block.take(canonical_order(block.positions, cell_size, block.features))


# -- synthetic rooms ---------------------------------------------------------------------

def _rect(origin, u, v):
    return np.asarray(origin, float), np.asarray(u, float), np.asarray(v, float)


def _box(lo, size):
    (x, y, z), (dx, dy, dz) = lo, size
    return [
        _rect((x, y, z), (dx, 0, 0), (0, dy, 0)),
        _rect((x, y, z + dz), (dx, 0, 0), (0, dy, 0)),
        _rect((x, y, z), (dx, 0, 0), (0, 0, dz)),
        _rect((x, y + dy, z), (dx, 0, 0), (0, 0, dz)),
        _rect((x, y, z), (0, dy, 0), (0, 0, dz)),
        _rect((x + dx, y, z), (0, dy, 0), (0, 0, dz)),
    ]


def _class_surfaces(cls, dims, rng):
    """Rectangles standing in for one instance of class ``cls``."""
    L, W, H = dims

    def spot(sx, sy):
        return rng.uniform(0.1, max(L - sx - 0.1, 0.1)), rng.uniform(0.1, max(W - sy - 0.1, 0.1))

    if cls == 0:
        return [_rect((0, 0, H), (L, 0, 0), (0, W, 0))]
    if cls == 1:
        return [_rect((0, 0, 0), (L, 0, 0), (0, W, 0))]
    if cls == 2:
        return [
            _rect((0, 0, 0), (L, 0, 0), (0, 0, H)), _rect((0, W, 0), (L, 0, 0), (0, 0, H)),
            _rect((0, 0, 0), (0, W, 0), (0, 0, H)), _rect((L, 0, 0), (0, W, 0), (0, 0, H)),
        ]
    if cls == 3:
        y = rng.uniform(0.2, max(W - 0.4, 0.2))
        return _box((0, y, H - 0.3), (L, 0.25, 0.3))
    if cls == 4:
        x, y = (0.0, 0.0) if rng.random() < 0.5 else (L - 0.4, W - 0.4)
        return _box((x, y, 0), (0.4, 0.4, H))
    if cls == 5:
        x = rng.uniform(0.1, max(L - 1.1, 0.1))
        return [_rect((x, 0.02, 1.0), (min(1.0, L), 0, 0), (0, 0, 1.0))]
    if cls == 6:
        y = rng.uniform(0.1, max(W - 1.0, 0.1))
        return [_rect((0.02, y, 0), (0, min(0.9, W), 0), (0, 0, min(2.1, H)))]
    if cls == 11:
        x = rng.uniform(0.1, max(L - 1.6, 0.1))
        return [_rect((x, W - 0.02, 0.9), (min(1.5, L), 0, 0), (0, 0, 1.0))]
    sizes = {7: (0.5, 0.5, 0.9), 8: (1.2, 0.8, 0.75), 9: (1.0, 0.35, 2.0),
             10: (2.0, 0.9, 0.8), 12: (0.3, 0.3, 0.3)}
    sx, sy, sz = sizes[cls]
    sx, sy = min(sx, L), min(sy, W)
    x, y = spot(sx, sy)
    return _box((x, y, 0), (sx, sy, min(sz, H)))


def _sample_on(rects, count, rng):
    areas = np.array([np.linalg.norm(np.cross(u, v)) for _, u, v in rects])
    which = rng.choice(len(rects), size=count, p=areas / areas.sum())
    origins = np.array([o for o, _, _ in rects])[which]
    us = np.array([u for _, u, _ in rects])[which]
    vs = np.array([v for _, _, v in rects])[which]
    a, b = rng.random((2, count, 1))
    return origins + a * us + b * vs


def generate_synthetic_room(dims=(4.0, 4.0, 3.0), n_classes=4, n_points=20000, noise=0.0,
                            seed=0, n_objects=1, proportions=None, floor_only=False,
                            color_noise=8.0):
    """Labelled synthetic room: floor, ceiling, walls and axis-aligned furniture boxes.

    Classes follow :data:`CLASS_NAMES`; the first ``n_classes`` are used.
    Each point draws its class from ``proportions`` (uniform by default),
    then a location on that class's surfaces. Positions get Gaussian noise
    of standard deviation ``noise``; colors come from :data:`PALETTE` with
    Gaussian jitter.
    """
    if not 1 <= n_classes <= MAX_CLASSES:
        raise ConfigError(f"class count must be in [1, {MAX_CLASSES}], got {n_classes}")
    dims = tuple(float(d) for d in dims)
    if len(dims) != 3 or min(dims) <= 0:
        raise ConfigError(f"room dims must be three positive lengths, got {dims}")
    if noise < 0 or n_points < 0 or n_objects < 1:
        raise ConfigError("noise, n_points must be non-negative and n_objects positive")
    rng = np.random.default_rng(seed)
    classes = [1] if floor_only else list(range(n_classes))
    if proportions is None:
        p = np.full(len(classes), 1.0 / len(classes))
    else:
        p = np.asarray(proportions, dtype=np.float64)
        if floor_only or len(p) != len(classes) or (p < 0).any() or p.sum() <= 0:
            raise ConfigError("proportions must give one non-negative weight per class")
        p = p / p.sum()
    labels = np.sort(rng.choice(classes, size=n_points, p=p))
    positions = np.empty((n_points, 3))
    for cls in classes:
        rects = []
        for _ in range(1 if cls in (0, 1, 2) else n_objects):
            rects.extend(_class_surfaces(cls, dims, rng))
        mask = labels == cls
        positions[mask] = _sample_on(rects, int(mask.sum()), rng)
    if noise > 0:
        positions += rng.normal(0.0, noise, size=positions.shape)
    colors = PALETTE[labels].astype(np.float64) + rng.normal(0.0, color_noise, size=(n_points, 3))
    colors = np.clip(np.rint(colors), 0, 255).astype(np.int64)
    return RoomCloud(positions, colors, labels)


# -- PLY export --------------------------------------------------------------------------

def label_colors(labels):
    labels = np.asarray(labels, dtype=np.int64)
    colors = np.tile(UNLABELED_COLOR, (len(labels), 1))
    ok = (labels >= 0) & (labels < MAX_CLASSES)
    colors[ok] = PALETTE[labels[ok]]
    return colors


def write_ply(path, positions, labels):
    """Binary little-endian PLY with float xyz and uchar rgb from the class palette."""
    positions = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
    colors = label_colors(labels)
    vertex = np.empty(len(positions), dtype=[("x", "<f4"), ("y", "<f4"), ("z", "<f4"),
                                             ("red", "u1"), ("green", "u1"), ("blue", "u1")])
    for j, name in enumerate("xyz"):
        vertex[name] = positions[:, j]
    for j, name in enumerate(("red", "green", "blue")):
        vertex[name] = colors[:, j]
    header = (
        "ply\nformat binary_little_endian 1.0\n"
        f"element vertex {len(positions)}\n"
        "property float x\nproperty float y\nproperty float z\n"
        "property uchar red\nproperty uchar green\nproperty uchar blue\n"
        "end_header\n"
    )
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        fh.write(vertex.tobytes())


_PLY_TYPES = {"float": "<f4", "float32": "<f4", "double": "<f8", "uchar": "u1", "uint8": "u1",
              "int": "<i4", "int32": "<i4", "uint": "<u4", "short": "<i2", "ushort": "<u2",
              "char": "i1"}


def read_ply(path):
    """Read a binary little-endian vertex-only PLY; returns ``(header, vertices)``."""
    with open(path, "rb") as fh:
        data = fh.read()
    end = data.find(b"end_header\n")
    if not data.startswith(b"ply\n") or end < 0:
        raise ParseError("not a PLY file")
    lines = data[:end].decode("ascii").splitlines()[1:]
    header = {"format": None, "count": None, "properties": []}
    for line in lines:
        parts = line.split()
        if not parts or parts[0] == "comment":
            continue
        if parts[0] == "format":
            header["format"] = parts[1]
        elif parts[0] == "element":
            if parts[1] != "vertex" or header["count"] is not None:
                raise ParseError(f"unsupported element {parts[1]}")
            header["count"] = int(parts[2])
        elif parts[0] == "property" and len(parts) == 3 and parts[1] in _PLY_TYPES:
            header["properties"].append((parts[2], _PLY_TYPES[parts[1]]))
        else:
            raise ParseError(f"bad header line: {line!r}")
    if header["format"] != "binary_little_endian" or header["count"] is None:
        raise ParseError("expected a binary_little_endian vertex element")
    dtype = np.dtype(header["properties"])
    body = data[end + len(b"end_header\n"):]
    if len(body) != dtype.itemsize * header["count"]:
        raise ParseError("PLY body size does not match header")
    return header, np.frombuffer(body, dtype=dtype)
