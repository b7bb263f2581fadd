import numpy as np
import pytest

from surfseg import regions as rg
from surfseg.mesh import SurfaceMesh, SurfaceSet, icosphere
from surfseg.regions import (
    RegionState,
    init_regions,
    nodal_force,
    update_regions_incremental,
)
from surfseg.voxels import VoxelGrid, make_phantom

from helpers import winding_inside


def one_sphere_set(center=(0, 0, 0), radius=0.6, subdivisions=2, surface_id=1):
    m = icosphere(center=center, radius=radius, subdivisions=subdivisions)
    m.surface_id = surface_id
    return SurfaceSet([m], [(1, 2)])


def brute_force_state(grid, surfaces):
    """Independent labeling oracle: solid-angle winding per voxel center."""
    xs, ys, zs = grid.center_axes()
    centers = np.stack(
        np.meshgrid(xs, ys, zs, indexing="ij"), axis=-1
    ).transpose(2, 1, 0, 3).reshape(-1, 3)  # x-fastest order
    labels = np.full(grid.n_voxels, 0, dtype=np.int64)
    for mesh, (kp, km) in zip(surfaces.meshes, surfaces.region_topology):
        inside = winding_inside(centers, mesh)
        labels[inside] = km
    exterior = surfaces.region_topology[0][0]
    labels[labels == 0] = exterior
    counts = np.zeros(surfaces.n_regions + 1, dtype=np.int64)
    sums = np.zeros(surfaces.n_regions + 1)
    np.add.at(counts, labels, 1)
    np.add.at(sums, labels, grid.data.astype(np.float64))
    return labels, counts, sums


def test_constant_image_single_sphere():
    grid = VoxelGrid((12, 12, 12), (-1, -1, -1), (1 / 6, 1 / 6, 1 / 6), np.ones(12 ** 3))
    state = init_regions(grid, one_sphere_set(radius=0.5))
    assert state.mean(1) == 1.0
    assert state.mean(2) == 1.0
    assert state.counts[1] + state.counts[2] == grid.n_voxels
    assert state.counts[2] > 0


def test_two_balls_snapped_means():
    grid = make_phantom("two_balls", (100, 60, 60))
    a = icosphere(center=(-1.2, 0, 0), radius=0.8, subdivisions=3)
    b = icosphere(center=(1.2, 0, 0), radius=0.8, subdivisions=3)
    b.surface_id = 2
    state = init_regions(grid, SurfaceSet([a, b], [(1, 2), (1, 2)]))
    # inscribed polyhedra: every object-labeled voxel center is inside a ball
    assert state.mean(2) == 0.0
    assert state.mean(1) >= 0.99


def test_init_matches_winding_oracle():
    rng = np.random.RandomState(42)
    for trial in range(4):
        dims = tuple(rng.randint(6, 12, size=3))
        grid = VoxelGrid(
            dims, (-1, -1, -1), 2.0 / np.asarray(dims), rng.rand(int(np.prod(dims)))
        )
        center = rng.uniform(-0.15, 0.15, size=3)
        surfaces = one_sphere_set(center=center, radius=rng.uniform(0.4, 0.7))
        state = init_regions(grid, surfaces)
        labels, counts, sums = brute_force_state(grid, surfaces)
        np.testing.assert_array_equal(np.asarray(state.labels, dtype=np.int64), labels)
        np.testing.assert_array_equal(state.counts, counts)
        np.testing.assert_array_equal(state.sums, sums)


def test_means_within_image_range():
    rng = np.random.RandomState(1)
    grid = VoxelGrid((10, 10, 10), (-1, -1, -1), (0.2, 0.2, 0.2), rng.rand(1000) * 7 - 2)
    state = init_regions(grid, one_sphere_set(radius=0.55))
    for k in (1, 2):
        assert grid.data.min() <= state.mean(k) <= grid.data.max()


def test_incremental_fixed_point():
    grid = make_phantom("one_ball", (24, 16, 16))
    surfaces = one_sphere_set(radius=0.5)
    state = init_regions(grid, surfaces)
    updated = update_regions_incremental(state, grid, surfaces, band_width=3)
    np.testing.assert_array_equal(updated.labels, state.labels)
    np.testing.assert_array_equal(updated.counts, state.counts)
    np.testing.assert_array_equal(updated.sums, state.sums)
    assert not updated.full_rebuild


def test_incremental_matches_full_relabel():
    rng = np.random.RandomState(9)
    dims = (14, 14, 14)
    grid = VoxelGrid(dims, (-1, -1, -1), 2.0 / np.asarray(dims), rng.rand(int(np.prod(dims))))
    base = icosphere(radius=0.55, subdivisions=2)
    surfaces = SurfaceSet([base], [(1, 2)])
    state = init_regions(grid, surfaces)
    spacing = grid.spacing.min()
    radial = base.vertices / np.linalg.norm(base.vertices, axis=1, keepdims=True)
    for _ in range(20):
        bump = rng.uniform(-0.9, 0.9) * spacing
        moved = SurfaceMesh(base.vertices + bump * radial, base.faces, base.neighbors)
        surfaces = SurfaceSet([moved], [(1, 2)])
        state = update_regions_incremental(state, grid, surfaces, band_width=3)
        fresh = init_regions(grid, surfaces)
        np.testing.assert_array_equal(state.labels, fresh.labels)
        np.testing.assert_array_equal(state.counts, fresh.counts)
        np.testing.assert_allclose(state.sums, fresh.sums, rtol=1e-12, atol=1e-12)


def test_incremental_single_voxel_flip():
    dims = (8, 8, 8)
    values = np.full(512, 0.7, dtype=np.float32)
    grid = VoxelGrid(dims, (-1, -1, -1), (0.25, 0.25, 0.25), values)
    center = np.array([0.03, 0.011, -0.017])
    xs, ys, zs = grid.center_axes()
    pts = np.stack(np.meshgrid(xs, ys, zs, indexing="ij"), axis=-1).reshape(-1, 3)
    d = np.sort(np.linalg.norm(pts - center, axis=1))
    # choose radii so exactly one center sits between them, with fat margins
    lo, hi = np.searchsorted(d, (0.3, 0.65))
    gaps = np.minimum(d[lo:hi] - d[lo - 1:hi - 1], d[lo + 1:hi + 1] - d[lo:hi])
    k = lo + int(np.argmax(gaps))
    assert gaps.max() > 0.004  # margin far above the seed's deviation from a sphere
    r_old = 0.5 * (d[k - 1] + d[k])
    r_new = 0.5 * (d[k] + d[k + 1])

    surfaces = one_sphere_set(center=center, radius=r_old, subdivisions=4)
    state = init_regions(grid, surfaces)
    grown = one_sphere_set(center=center, radius=r_new, subdivisions=4)
    updated = update_regions_incremental(state, grid, grown, band_width=3)
    assert updated.counts[2] == state.counts[2] + 1
    assert updated.counts[1] == state.counts[1] - 1
    stored = float(np.float32(0.7))  # intensities live in float32
    assert updated.sums[2] == pytest.approx(state.sums[2] + stored, abs=1e-12)
    assert updated.sums[1] == pytest.approx(state.sums[1] - stored, abs=1e-12)


def test_incremental_band_too_small_falls_back():
    grid = make_phantom("one_ball", (24, 24, 24), domain=((-1, -1, -1), (1, 1, 1)))
    surfaces = one_sphere_set(radius=0.35)
    state = init_regions(grid, surfaces)
    # jump the surface by far more than one voxel
    grown = one_sphere_set(radius=0.8)
    updated = update_regions_incremental(state, grid, grown, band_width=1)
    assert updated.full_rebuild
    fresh = init_regions(grid, grown)
    np.testing.assert_array_equal(updated.labels, fresh.labels)


def test_overlapping_same_pair_spheres_label_as_union():
    # overlap happens transiently right before a merge; the interiors union
    a = icosphere(center=(-0.25, 0, 0), radius=0.4, subdivisions=2)
    b = icosphere(center=(0.25, 0, 0), radius=0.4, subdivisions=2)
    b.surface_id = 2
    surfaces = SurfaceSet([a, b], [(1, 2), (1, 2)])
    grid = make_phantom("one_ball", (20, 20, 20), domain=((-1, -1, -1), (1, 1, 1)))
    state = init_regions(grid, surfaces)
    labels = np.asarray(state.labels)
    xs, ys, zs = grid.center_axes()
    centers = np.stack(np.meshgrid(xs, ys, zs, indexing="ij"), axis=-1)
    centers = centers.transpose(2, 1, 0, 3).reshape(-1, 3)
    in_a = np.linalg.norm(centers - (-0.25, 0, 0), axis=1) < 0.36
    in_b = np.linalg.norm(centers - (0.25, 0, 0), axis=1) < 0.36
    assert np.all(labels[in_a | in_b] == 2)
    out = np.linalg.norm(centers - (-0.25, 0, 0), axis=1) > 0.45
    out &= np.linalg.norm(centers - (0.25, 0, 0), axis=1) > 0.45
    assert np.all(labels[out] == 1)


def test_inconsistent_orientation_data_rejected():
    # disjoint surfaces disagreeing about the exterior label
    a = icosphere(center=(-0.5, 0, 0), radius=0.3, subdivisions=2)
    b = icosphere(center=(0.5, 0, 0), radius=0.3, subdivisions=2)
    b.surface_id = 2
    surfaces = SurfaceSet([a, b], [(1, 2), (2, 1)])
    grid = make_phantom("one_ball", (16, 16, 16), domain=((-1, -1, -1), (1, 1, 1)))
    with pytest.raises(rg.RegionTopologyError):
        init_regions(grid, surfaces)


def test_contradictory_nesting_rejected():
    # inner surface expects to border region 1 but floats inside region 2
    outer = icosphere(radius=0.8, subdivisions=2)
    inner = icosphere(radius=0.4, subdivisions=2)
    inner.surface_id = 2
    surfaces = SurfaceSet([outer, inner], [(1, 2), (1, 3)], n_regions=3)
    grid = make_phantom("one_ball", (16, 16, 16), domain=((-1, -1, -1), (1, 1, 1)))
    with pytest.raises(rg.RegionTopologyError):
        init_regions(grid, surfaces)


def test_nested_spheres_three_regions():
    outer = icosphere(radius=0.8, subdivisions=2)
    inner = icosphere(radius=0.4, subdivisions=2)
    inner.surface_id = 2
    surfaces = SurfaceSet([outer, inner], [(1, 2), (2, 3)], n_regions=3)
    grid = make_phantom("one_ball", (20, 20, 20), domain=((-1, -1, -1), (1, 1, 1)))
    state = init_regions(grid, surfaces)
    assert state.counts[3] > 0
    assert state.counts[1] > state.counts[2] > 0
    # shell voxels sit between radius 0.4 and 0.8
    shell = np.flatnonzero(np.asarray(state.labels) == 2)
    xs, ys, zs = grid.center_axes()
    centers = np.stack(np.meshgrid(xs, ys, zs, indexing="ij"), axis=-1)
    centers = centers.transpose(2, 1, 0, 3).reshape(-1, 3)
    radii = np.linalg.norm(centers[shell], axis=1)
    assert radii.min() > 0.3 and radii.max() < 0.9


def make_state(means_by_region, n_regions=2):
    counts = np.zeros(n_regions + 1, dtype=np.int64)
    sums = np.zeros(n_regions + 1)
    for k, c in means_by_region.items():
        counts[k] = 10
        sums[k] = 10.0 * c
    return RegionState(
        np.zeros(1, dtype=np.uint16), n_regions, counts, sums, np.zeros(n_regions + 1), 1
    )


def test_nodal_force_values():
    grid1 = VoxelGrid((4, 4, 4), (-1, -1, -1), (0.5, 0.5, 0.5), np.ones(64))
    surfaces = one_sphere_set(radius=0.5, subdivisions=1)

    state = make_state({1: 1.0, 2: 0.0})
    f = nodal_force(grid1, state, surfaces, 100.0)[0]
    np.testing.assert_allclose(f, -100.0)

    grid0 = VoxelGrid((4, 4, 4), (-1, -1, -1), (0.5, 0.5, 0.5), np.zeros(64))
    f = nodal_force(grid0, state, surfaces, 100.0)[0]
    np.testing.assert_allclose(f, 100.0)

    same = make_state({1: 0.4, 2: 0.4})
    f = nodal_force(grid1, same, surfaces, 50.0)[0]
    np.testing.assert_allclose(f, 0.0, atol=1e-12)


def test_nodal_force_empty_region_raises():
    grid = VoxelGrid((4, 4, 4), (-1, -1, -1), (0.5, 0.5, 0.5), np.ones(64))
    state = make_state({1: 1.0})  # region 2 empty
    with pytest.raises(rg.EmptyRegionError):
        nodal_force(grid, state, one_sphere_set(radius=0.5, subdivisions=1), 10.0)
