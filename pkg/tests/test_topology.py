import itertools

import numpy as np
import pytest

from surfseg.mesh import (
    SurfaceMesh,
    SurfaceSet,
    check_mesh,
    enclosed_volume_and_area,
    icosphere,
)
from surfseg.topology import (
    BackgroundGrid,
    DetectionParams,
    TopoEvent,
    classify,
    detect,
    execute_event,
    hungarian_match,
    merge_or_genus_increase,
    run_topology_pass,
    split_or_genus_decrease,
)

from helpers import dimpled_sphere, dumbbell_mesh, thin_hole_torus


PARAMS = DetectionParams(grid_size=0.05, n_detect=20, thr1=20, thr2=150, thr3=40)


def twin_spheres(gap=0.02, radius=0.5, subdivisions=3):
    a = icosphere(center=(-(radius + gap / 2), 0, 0), radius=radius, subdivisions=subdivisions)
    b = icosphere(center=(+(radius + gap / 2), 0, 0), radius=radius, subdivisions=subdivisions)
    b.surface_id = 2
    return SurfaceSet([a, b], [(1, 2), (1, 2)])


def pyramid_pair():
    """Octahedron over a hexagonal bipyramid, facing apexes; loops 4 and 6."""
    oct_v = np.array(
        [(1, 0, 0.9), (0, 1, 0.9), (-1, 0, 0.9), (0, -1, 0.9), (0, 0, 1.9), (0, 0, -0.1)],
        dtype=float,
    )
    oct_f = np.array(
        [(0, 1, 4), (1, 2, 4), (2, 3, 4), (3, 0, 4), (1, 0, 5), (2, 1, 5), (3, 2, 5), (0, 3, 5)]
    )
    top = SurfaceMesh.from_arrays(oct_v, oct_f, 1)

    ring = [
        (np.cos(t), np.sin(t), -0.9) for t in 2 * np.pi * np.arange(6) / 6
    ]
    hex_v = np.array(ring + [(0, 0, 0.1), (0, 0, -1.9)])
    faces = []
    for j in range(6):
        j1 = (j + 1) % 6
        faces.append((j, j1, 6))      # top fan
        faces.append((j1, j, 7))      # bottom fan
    bottom = SurfaceMesh.from_arrays(hex_v, np.array(faces), 2)
    return SurfaceSet([top, bottom], [(1, 2), (1, 2)])


def test_grid_dimensions_match_domain():
    grid = BackgroundGrid((-2.5, -1.5, -1.5), (2.5, 1.5, 1.5), 0.025)
    assert grid.dims[0] == 200
    assert grid.dims[1] == 120 and grid.dims[2] == 120


def test_detect_registers_every_node_once():
    s = twin_spheres(gap=3.0)
    grid, flagged = detect(s, PARAMS)
    assert grid.node_count == s.total_vertices()
    assert sum(len(v) for v in grid.cells.values()) == s.total_vertices()


def test_detect_far_spheres_quiet():
    s = twin_spheres(gap=1.0)
    _, flagged = detect(s, PARAMS)
    assert flagged == []


def test_detect_flags_contact_cube_of_two_surfaces():
    s = twin_spheres(gap=0.02)
    grid, flagged = detect(s, PARAMS)
    assert flagged
    nodes = grid.neighborhood(flagged[0])
    ids = {s.meshes[mp].surface_id for mp, _ in nodes}
    assert ids == {1, 2}


def test_detect_flags_opposed_normals_single_surface():
    s = SurfaceSet([dimpled_sphere()], [(1, 2)])
    _, flagged = detect(s, PARAMS)
    assert flagged


def test_detect_is_deterministic():
    s = twin_spheres(gap=0.02)
    _, f1 = detect(s, PARAMS)
    _, f2 = detect(s, PARAMS)
    assert f1 == f2


def test_classify_uniform_normals_none():
    # crowded cubes on a smooth sphere: many nodes, one normal direction
    s = SurfaceSet([icosphere(subdivisions=3)], [(1, 2)])
    params = DetectionParams(grid_size=0.4, n_detect=2, thr1=20, thr2=150, thr3=40)
    grid, flagged = detect(s, params)
    assert flagged
    for cube in flagged[:5]:
        assert classify(cube, grid, s, params).kind == "none"


def test_classify_merge_vs_genus_increase():
    s = twin_spheres(gap=0.02)
    grid, flagged = detect(s, PARAMS)
    assert classify(flagged[0], grid, s, PARAMS).kind == "merge"

    s1 = SurfaceSet([dimpled_sphere()], [(1, 2)])
    grid, flagged = detect(s1, PARAMS)
    ev = classify(flagged[0], grid, s1, PARAMS)
    assert ev.kind == "genus_increase"


def test_classify_collapsing_neck_as_split_branch():
    s = SurfaceSet([dumbbell_mesh(neck_radius=0.02)], [(1, 2)])
    params = DetectionParams(grid_size=0.06, n_detect=30, thr1=30, thr2=150, thr3=40)
    grid, flagged = detect(s, params)
    ev = classify(flagged[0], grid, s, params)
    assert ev.kind == "split"
    assert ev.n_far > len(ev.nodes) / 3


def test_split_dumbbell():
    s = SurfaceSet([dumbbell_mesh(neck_radius=0.02)], [(1, 2)])
    params = DetectionParams(grid_size=0.06, n_detect=30, thr1=30, thr2=150, thr3=40)
    grid, flagged = detect(s, params)
    ev = classify(flagged[0], grid, s, params)
    res = execute_event(s, ev)
    assert not res.aborted and res.kind == "split"
    assert res.surfaces.n_surfaces == 2
    p_e = s.meshes[0].vertices[[vi for _, vi in ev.nodes]].mean(axis=0)
    for mesh in res.surfaces.meshes:
        rep = check_mesh(mesh)
        assert rep["closed"] and rep["oriented"] and rep["euler"] == 2
        # the fresh cap vertex keeps a face valence of at most 8
        cap = int(np.argmin(np.linalg.norm(mesh.vertices - p_e, axis=1)))
        assert np.sum(mesh.faces == cap) <= 8
    assert res.chi_after - res.chi_before == 2
    assert {m.surface_id for m in res.surfaces.meshes} == {1, 2}


def test_genus_decrease_thin_torus():
    s = SurfaceSet([thin_hole_torus()], [(1, 2)])
    grid, flagged = detect(s, PARAMS)
    ev = classify(flagged[0], grid, s, PARAMS)
    res = execute_event(s, ev)
    assert not res.aborted and res.kind == "genus_decrease"
    rep = check_mesh(res.surfaces.meshes[0])
    assert rep["closed"] and rep["oriented"]
    assert rep["euler"] == 2 and rep["genus"] == 0
    assert res.chi_after - res.chi_before == 2


def test_merge_twin_spheres():
    s = twin_spheres(gap=0.02)
    vol_before = sum(enclosed_volume_and_area(m)[0] for m in s.meshes)
    grid, flagged = detect(s, PARAMS)
    ev = classify(flagged[0], grid, s, PARAMS)
    res = execute_event(s, ev)
    assert not res.aborted and res.kind == "merge"
    assert res.surfaces.n_surfaces == 1
    rep = check_mesh(res.surfaces.meshes[0])
    assert rep["closed"] and rep["oriented"] and rep["euler"] == 2
    assert res.chi_before == 4 and res.chi_after == 2
    vol_after, _ = enclosed_volume_and_area(res.surfaces.meshes[0])
    assert vol_after == pytest.approx(vol_before, rel=0.05)
    assert res.surfaces.meshes[0].surface_id == 1  # absorbed into the first


def test_genus_increase_dimpled_sphere():
    s = SurfaceSet([dimpled_sphere()], [(1, 2)])
    grid, flagged = detect(s, PARAMS)
    ev = classify(flagged[0], grid, s, PARAMS)
    res = execute_event(s, ev)
    assert not res.aborted and res.kind == "genus_increase"
    rep = check_mesh(res.surfaces.meshes[0])
    assert rep["closed"] and rep["oriented"]
    assert rep["euler"] == 0 and rep["genus"] == 1
    assert res.chi_after - res.chi_before == -2


def test_merge_unequal_loops_bisects_shorter():
    s = pyramid_pair()
    event = TopoEvent("merge", 0, np.array([(0, 4), (1, 6)]))  # facing apexes
    res = merge_or_genus_increase(s, event)
    assert not res.aborted
    mesh = res.surfaces.meshes[0]
    # 4-loop gains two bisection nodes, then six pairs fuse to midpoints
    assert mesh.n_vertices == 8
    assert mesh.n_faces == 12
    assert mesh.euler_characteristic() == 2


def test_merge_rejects_mismatched_region_pairs():
    s = twin_spheres(gap=0.02)
    s = SurfaceSet(s.meshes, [(1, 2), (2, 1)], n_regions=2)
    grid, flagged = detect(s, PARAMS)
    ev = classify(flagged[0], grid, s, PARAMS)
    assert ev.kind == "merge"
    res = execute_event(s, ev)
    assert res.aborted
    assert res.surfaces is s


def test_surgery_abort_leaves_input_untouched():
    mesh = icosphere(subdivisions=1)
    s = SurfaceSet([mesh], [(1, 2)])
    before_v = mesh.vertices.copy()
    before_f = mesh.faces.copy()
    # consuming every vertex deletes the whole surface: no components remain
    event = TopoEvent("split", 0, np.array([(0, v) for v in range(mesh.n_vertices)]))
    res = split_or_genus_decrease(s, event)
    assert res.aborted
    assert res.surfaces is s
    np.testing.assert_array_equal(s.meshes[0].vertices, before_v)
    np.testing.assert_array_equal(s.meshes[0].faces, before_f)


def test_run_topology_pass_merges_and_reports():
    s = twin_spheres(gap=0.02)
    out, records = run_topology_pass(s, PARAMS)
    assert len(records) == 1
    assert records[0].kind == "merge"
    assert records[0].chi_before - records[0].chi_after == 2
    assert out.n_surfaces == 1


def test_run_topology_pass_quiet_when_separated():
    s = twin_spheres(gap=1.0)
    out, records = run_topology_pass(s, PARAMS)
    assert records == []
    assert out is s


def test_hungarian_simple_cases():
    pairs, cost = hungarian_match([[1, 2], [2, 1]])
    assert pairs == [(0, 0), (1, 1)] and cost == 2
    pairs, cost = hungarian_match([[4, 1], [2, 3]])
    assert pairs == [(0, 1), (1, 0)] and cost == 3


def test_hungarian_matches_brute_force():
    rng = np.random.RandomState(3)
    for _ in range(30):
        n = rng.randint(2, 8)
        cost = rng.randint(0, 50, size=(n, n)).astype(float)
        _, best = hungarian_match(cost)
        brute = min(
            sum(cost[i, p[i]] for i in range(n))
            for p in itertools.permutations(range(n))
        )
        assert best == brute


def test_hungarian_rectangular():
    rng = np.random.RandomState(5)
    cost = rng.rand(2, 5)
    pairs, best = hungarian_match(cost)
    assert len(pairs) == 2
    brute = min(
        cost[0, a] + cost[1, b]
        for a in range(5) for b in range(5) if a != b
    )
    assert best == pytest.approx(brute)


def test_hungarian_empty_rejected():
    with pytest.raises(ValueError):
        hungarian_match(np.empty((0, 0)))
