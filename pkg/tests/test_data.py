import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from paaconv.data import (
    Block, RoomCloud, attach_normals, canonical_sort, cover_blocks, generate_synthetic_room,
    load_cloud, partition_blocks, read_ply, write_cloud, write_ply,
)
from paaconv.exceptions import ConfigError, InvalidInputError, ParseError
from paaconv.normals import estimate_normals


def _room(rng, n, extent=(1.0, 1.0, 1.0)):
    pos = rng.uniform(0, 1, (n, 3)) * extent
    return RoomCloud(pos, rng.integers(0, 256, (n, 3)), rng.integers(0, 4, n))


# -- text format -------------------------------------------------------------------------------

def test_single_line(tmp_path):
    p = tmp_path / "c.txt"
    p.write_text("0.5 1 2 10 20 30 3\n")
    room = load_cloud(p)
    assert len(room) == 1 and room.labels.tolist() == [3]
    np.testing.assert_array_equal(room.colors, [[10, 20, 30]])


def test_empty_file(tmp_path):
    p = tmp_path / "c.txt"
    p.write_text("")
    assert len(load_cloud(p)) == 0


def test_comments_and_normals(tmp_path):
    p = tmp_path / "c.txt"
    p.write_text("# header\n0 0 0 1 2 3 0 0 1 -1\n\n1 1 1 4 5 6 1 0 0 2\n")
    room = load_cloud(p)
    assert room.labels.tolist() == [-1, 2]
    np.testing.assert_array_equal(room.normals, [[0, 0, 1], [1, 0, 0]])


@pytest.mark.parametrize("body, line", [
    ("0 0 0 1 2 3 0\n0 0 0 1 2\n", 2),
    ("0 0 0 1 2 3 0\n0 0 0 1 2 3 0 0 1 0\n", 2),
    ("0 0 nan 1 2 3 0\n", 1),
    ("0 0 0 1 2 300 0\n", 1),
    ("# c\n0 0 0 1 2 3 13\n", 2),
    ("0 0 0 1 2 3 -2\n", 1),
    ("0 0 x 1 2 3 0\n", 1),
])
def test_parse_errors_name_the_line(tmp_path, body, line):
    p = tmp_path / "c.txt"
    p.write_text(body)
    with pytest.raises(ParseError, match=f"line {line}:"):
        load_cloud(p)


def test_label_range_follows_class_count(tmp_path):
    p = tmp_path / "c.txt"
    p.write_text("0 0 0 1 2 3 5\n")
    with pytest.raises(ParseError):
        load_cloud(p, n_classes=4)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32 - 1), st.booleans())
def test_cloud_round_trip(tmp_path_factory, seed, with_normals):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(0, 30))
    room = RoomCloud(rng.normal(size=(n, 3)) * 10 ** rng.uniform(-6, 6), rng.integers(0, 256, (n, 3)),
                     rng.integers(-1, 13, n), rng.normal(size=(n, 3)) if with_normals else None)
    d = tmp_path_factory.mktemp("rt")
    write_cloud(d / "a.txt", room)
    back = load_cloud(d / "a.txt")
    np.testing.assert_array_equal(back.positions, room.positions)
    np.testing.assert_array_equal(back.colors, room.colors)
    np.testing.assert_array_equal(back.labels, room.labels)
    if with_normals and n:
        np.testing.assert_array_equal(back.normals, room.normals)
    write_cloud(d / "b.txt", back)
    assert (d / "a.txt").read_bytes() == (d / "b.txt").read_bytes()


# -- blocks --------------------------------------------------------------------------------------

def test_single_tile_downsampled(rng):
    blocks = partition_blocks(_room(rng, 10000))
    assert len(blocks) == 1 and len(blocks[0]) == 4096
    assert len(np.unique(blocks[0].indices)) == 4096


def test_two_columns(rng):
    room = _room(rng, 2000, extent=(1.99, 0.99, 2.0))
    assert len(partition_blocks(room, n_pts=256)) == 2


def test_upsampling_keeps_every_point(rng):
    room = _room(rng, 100)
    (block,) = partition_blocks(room)
    assert len(block) == 4096
    assert set(block.indices.tolist()) == set(range(100))
    np.testing.assert_array_equal(block.positions, room.positions[block.indices])
    np.testing.assert_array_equal(block.labels, room.labels[block.indices])


def test_sparse_tiles_dropped(rng):
    a = _room(rng, 500)
    sparse = rng.uniform(0, 1, (10, 3)) + [5.0, 0, 0]
    room = RoomCloud(np.vstack([a.positions, sparse]), np.zeros((510, 3)), np.zeros(510))
    assert len(partition_blocks(room, n_pts=128)) == 1


def test_empty_room_rejected():
    with pytest.raises(InvalidInputError):
        partition_blocks(RoomCloud(np.zeros((0, 3)), np.zeros((0, 3)), np.zeros(0)))


def test_feature_channels(rng):
    room = _room(rng, 3000, extent=(2.5, 1.5, 3.0))
    blocks = partition_blocks(room, n_pts=512, seed=4)
    lo, hi = room.bounds
    for b in blocks:
        f = b.features
        assert f.shape == (512, 9)
        assert (f[:, :3] >= 0).all()
        np.testing.assert_allclose(f[:, 3:6], room.colors[b.indices] / 255.0)
        np.testing.assert_allclose(f[:, 6:9], (b.positions - lo) / (hi - lo))
        assert (f[:, 3:9] >= 0).all() and (f[:, 3:9] <= 1).all()


def test_flat_axis_maps_to_zero(rng):
    pos = np.c_[rng.uniform(0, 1, (200, 2)), np.zeros(200)]
    (block,) = partition_blocks(RoomCloud(pos, np.zeros((200, 3)), np.zeros(200)), n_pts=64)
    assert not block.features[:, 8].any()


def test_partition_is_seeded(rng):
    room = _room(rng, 6000, extent=(2.0, 2.0, 1.0))
    a, b = partition_blocks(room, n_pts=256, seed=3), partition_blocks(room, n_pts=256, seed=3)
    assert all(np.array_equal(x.indices, y.indices) for x, y in zip(a, b))


def test_cover_blocks_reach_every_point(rng):
    room = _room(rng, 5000, extent=(2.0, 1.0, 1.0))
    blocks = cover_blocks(room, n_pts=1024)
    assert all(len(b) == 1024 for b in blocks)
    assert set(np.concatenate([b.indices for b in blocks]).tolist()) == set(range(5000))


def test_attach_normals_on_floor(rng):
    pos = np.c_[rng.uniform(0, 1, (300, 2)), np.zeros(300)]
    room = RoomCloud(pos, np.zeros((300, 3)), np.zeros(300))
    normals, _ = estimate_normals(pos, k=8, center=(0, 0, 1))
    blocks = attach_normals(partition_blocks(room, n_pts=512), normals)
    (b,) = blocks
    assert b.n_channels == 12
    np.testing.assert_allclose(b.features[:, 9:], np.tile([0, 0, 1.0], (512, 1)), atol=1e-9)
    with pytest.raises(InvalidInputError):
        attach_normals(blocks, normals)


def test_duplicates_share_normals(rng):
    room = _room(rng, 100)
    normals, _ = estimate_normals(room.positions, k=8)
    (b,) = attach_normals(partition_blocks(room, n_pts=400), normals)
    for idx in np.unique(b.indices):
        rows = b.features[b.indices == idx, 9:]
        assert (rows == rows[0]).all()


# -- canonical sort --------------------------------------------------------------------------------

def _block(rng, n=60):
    pos = rng.uniform(0, 1, (n, 3))
    return Block(pos, rng.normal(size=(n, 9)), rng.integers(0, 4, n), np.arange(n))


def test_sort_is_idempotent_and_normalizing(rng):
    b = _block(rng)
    s = canonical_sort(b, 0.2)
    np.testing.assert_array_equal(canonical_sort(s, 0.2).positions, s.positions)
    rev = canonical_sort(b.take(np.arange(len(b))[::-1]), 0.2)
    np.testing.assert_array_equal(rev.positions, s.positions)
    np.testing.assert_array_equal(rev.features, s.features)


def test_sort_orders_cells_lexicographically(rng):
    s = canonical_sort(_block(rng), 0.2)
    cells = np.floor((s.positions - s.positions.min(axis=0)) / 0.2).astype(int)
    assert [tuple(c) for c in cells] == sorted(tuple(c) for c in cells)


def test_sort_is_stable_for_coincident_points():
    pos = np.array([[0.5, 0.5, 0.5], [0.1, 0.1, 0.1], [0.5, 0.5, 0.5]])
    b = Block(pos, np.zeros((3, 9)), np.array([0, 1, 2]), np.array([7, 8, 9]))
    assert canonical_sort(b, 0.2).indices.tolist() == [8, 7, 9]


# -- synthetic rooms ---------------------------------------------------------------------------------

def test_floor_only_room():
    room = generate_synthetic_room(n_points=500, floor_only=True, seed=2)
    assert (room.positions[:, 2] == 0).all()
    assert (room.labels == 1).all()


def test_synthetic_room_is_seeded():
    a = generate_synthetic_room(n_points=800, noise=0.01, seed=5)
    b = generate_synthetic_room(n_points=800, noise=0.01, seed=5)
    np.testing.assert_array_equal(a.positions, b.positions)
    np.testing.assert_array_equal(a.colors, b.colors)


def test_class_histogram_follows_proportions():
    props = np.array([0.1, 0.2, 0.3, 0.15, 0.25])
    room = generate_synthetic_room(n_classes=5, n_points=50000, proportions=props, seed=1)
    freq = np.bincount(room.labels, minlength=5) / 50000
    assert (np.abs(freq - props) <= 0.05 * props).all()


def test_too_many_classes():
    with pytest.raises(ConfigError):
        generate_synthetic_room(n_classes=14)


def test_all_classes_generate():
    room = generate_synthetic_room(n_classes=13, n_points=2600, seed=0, n_objects=2)
    assert set(room.labels.tolist()) == set(range(13))
    lo, hi = room.bounds
    assert (lo >= -1e-9).all() and (hi <= np.array([4.0, 4.0, 3.0]) + 1e-9).all()


# -- PLY ------------------------------------------------------------------------------------------------

def test_ply_round_trip(tmp_path, rng):
    pos = rng.normal(size=(25, 3))
    labels = rng.integers(-1, 13, 25)
    write_ply(tmp_path / "o.ply", pos, labels)
    header, verts = read_ply(tmp_path / "o.ply")
    assert header["format"] == "binary_little_endian" and header["count"] == 25
    assert [n for n, _ in header["properties"]] == ["x", "y", "z", "red", "green", "blue"]
    np.testing.assert_array_equal(verts["x"], pos[:, 0].astype(np.float32))
    raw = (tmp_path / "o.ply").read_bytes()
    assert raw.startswith(b"ply\nformat binary_little_endian 1.0\nelement vertex 25\n")


def test_ply_rejects_garbage(tmp_path):
    p = tmp_path / "x.ply"
    p.write_bytes(b"not a ply")
    with pytest.raises(ParseError):
        read_ply(p)
