import numpy as np
import pytest

from surfseg import voxels
from surfseg.voxels import (
    VoxelGrid,
    load_raw,
    make_phantom,
    save_raw,
    world_to_voxel,
)


def write_volume(tmp_path, dims, values, spacing=(1, 1, 1), origin=(0, 0, 0)):
    grid = VoxelGrid(dims, origin, spacing, values)
    header = tmp_path / "vol.json"
    save_raw(grid, str(header))
    return header


def test_load_constant_volume(tmp_path):
    header = write_volume(tmp_path, (2, 2, 2), np.ones(8))
    grid = load_raw(str(header))
    assert grid.dims == (2, 2, 2)
    assert grid.data.dtype == np.float32
    assert np.all(grid.data == 1.0)


def test_load_missing_header(tmp_path):
    with pytest.raises(voxels.MissingFileError):
        load_raw(str(tmp_path / "nope.json"))


def test_load_size_mismatch(tmp_path):
    header = tmp_path / "vol.json"
    header.write_text(
        '{"dims": [2, 2, 2], "spacing": [1, 1, 1], "origin": [0, 0, 0],'
        ' "dtype": "f32", "data": "vol.raw"}'
    )
    np.ones(7, dtype="<f4").tofile(tmp_path / "vol.raw")
    with pytest.raises(voxels.PayloadMismatchError):
        load_raw(str(header))


def test_nonpositive_spacing_rejected():
    with pytest.raises(voxels.InvalidSpacingError):
        VoxelGrid((2, 2, 2), (0, 0, 0), (1, 0, 1), np.ones(8))


def test_nonfinite_rejected():
    values = np.ones(8)
    values[3] = np.nan
    with pytest.raises(voxels.NonFiniteDataError):
        VoxelGrid((2, 2, 2), (0, 0, 0), (1, 1, 1), values)


def test_roundtrip_random_grids(tmp_path):
    rng = np.random.RandomState(7)
    for trial in range(5):
        dims = tuple(rng.randint(2, 9, size=3))
        values = rng.rand(dims[0] * dims[1] * dims[2]).astype(np.float32)
        grid = VoxelGrid(dims, rng.randn(3), rng.rand(3) + 0.1, values)
        header = tmp_path / ("g%d.json" % trial)
        save_raw(grid, str(header))
        back = load_raw(str(header))
        assert back.dims == grid.dims
        assert np.array_equal(back.data, grid.data)
        # payload bytes identical
        raw = (tmp_path / ("g%d.raw" % trial)).read_bytes()
        assert raw == grid.data.astype("<f4").tobytes()


def test_world_to_voxel_basic():
    grid = VoxelGrid((4, 4, 4), (0, 0, 0), (1, 1, 1), np.zeros(64))
    assert world_to_voxel(grid, (0.5, 0.5, 0.5)) == (0, 0, 0)
    assert world_to_voxel(grid, (3.9, 0.1, 2.2)) == (3, 0, 2)


def test_world_to_voxel_face_tie_goes_low():
    grid = VoxelGrid((4, 4, 4), (0, 0, 0), (1, 1, 1), np.zeros(64))
    assert world_to_voxel(grid, (1.0, 0.5, 0.5)) == (0, 0, 0)
    assert world_to_voxel(grid, (4.0, 4.0, 4.0)) == (3, 3, 3)
    assert world_to_voxel(grid, (0.0, 0.0, 0.0)) == (0, 0, 0)


def test_world_to_voxel_outside():
    grid = VoxelGrid((4, 4, 4), (0, 0, 0), (1, 1, 1), np.zeros(64))
    assert world_to_voxel(grid, (-0.1, 1, 1)) is None
    assert world_to_voxel(grid, (1, 1, 4.1)) is None


def test_voxel_center_within_half_spacing():
    rng = np.random.RandomState(3)
    grid = VoxelGrid((5, 4, 3), (-1, 2, 0.5), (0.3, 0.7, 1.1), np.zeros(60))
    lo, hi = grid.box
    for _ in range(200):
        p = lo + rng.rand(3) * (hi - lo)
        idx = world_to_voxel(grid, p)
        assert idx is not None
        center = grid.voxel_center(idx)
        assert np.all(np.abs(center - p) <= grid.spacing / 2 + 1e-12)


def test_two_balls_phantom_values():
    grid = make_phantom("two_balls", (100, 60, 60))
    for p in ((1.2, 0, 0), (-1.2, 0, 0)):
        idx = world_to_voxel(grid, p)
        assert grid.value_at_index(idx) == 0.0
    corner = world_to_voxel(grid, (-2.49, -1.49, -1.49))
    assert grid.value_at_index(corner) == 1.0


def test_one_ball_phantom_values():
    grid = make_phantom("one_ball", (48, 32, 32), radius=0.6)
    idx = world_to_voxel(grid, (0, 0, 0))
    assert grid.value_at_index(idx) == 0.0
    edge = world_to_voxel(grid, (1.19, 0, 0))
    assert grid.value_at_index(edge) == 1.0


def test_torus_phantom_values():
    grid = make_phantom("torus", (64, 64, 32), ring_radius=1.2, tube_radius=0.4)
    on_ring = world_to_voxel(grid, (1.2, 0, 0))
    assert grid.value_at_index(on_ring) == 0.0
    center = world_to_voxel(grid, (0, 0, 0))
    assert grid.value_at_index(center) == 1.0


def test_phantom_binary_values_only():
    for kind in ("two_balls", "one_ball", "torus", "ball"):
        grid = make_phantom(kind, (16, 16, 16))
        assert set(np.unique(grid.data)) <= {0.0, 1.0}


def test_phantom_bad_inputs():
    with pytest.raises(voxels.VoxelImageError):
        make_phantom("blob", (8, 8, 8))
    with pytest.raises(voxels.VoxelImageError):
        make_phantom("one_ball", (8, 8, 8), domain=((0, 0, 0), (0, 1, 1)))
    with pytest.raises(voxels.VoxelImageError):
        make_phantom("one_ball", (1, 8, 8))


def test_values_at_points_matches_voxel_lookup():
    rng = np.random.RandomState(11)
    grid = make_phantom("one_ball", (20, 18, 16))
    lo, hi = grid.box
    pts = lo + rng.rand(50, 3) * (hi - lo)
    vals = grid.values_at_points(pts)
    for p, v in zip(pts, vals):
        assert v == grid.value_at_index(world_to_voxel(grid, p))
