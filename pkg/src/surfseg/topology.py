"""Detection, identification and execution of surface topology changes.

A uniform grid of cubes covers the image domain.  One pass bins every
vertex into its cube; a cube is suspicious when it holds many nodes,
nodes of two different surfaces, or two nodes with nearly opposite
weighted normals.  Suspicious cubes are classified by grouping the
normals of the nodes in the cube and its 26 neighbors: two opposed
groups mean merging (two surfaces) or a genus increase (one surface);
three or more directions mean splitting or a genus decrease, decided by
the number of connected components left after the local triangles are
removed.  The surgeries delete the affected triangles and rebuild the
surface across the holes; every surgery either returns a valid closed
mesh or aborts leaving the input untouched.
"""

import logging
from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment

from .mesh import SurfaceMesh, SurfaceSet, build_neighbors, validate_closed, MeshError

logger = logging.getLogger(__name__)


class TopologyError(Exception):
    pass


@dataclass
class DetectionParams:
    """Background-grid size, the node trigger and the grouping angles."""

    grid_size: float
    n_detect: int = 10
    thr1: float = 20.0
    thr2: float = 150.0
    thr3: float = 40.0
    outlier_fraction: float = 0.05
    split_fraction: float = 1.0 / 3.0
    max_seed_restarts: int = 10

    def __post_init__(self):
        if self.grid_size <= 0:
            raise ValueError("grid size must be positive")
        if not (0 < self.thr1 < self.thr3 < self.thr2 < 180):
            raise ValueError("need 0 < thr1 < thr3 < thr2 < 180")
        if self.n_detect < 2:
            raise ValueError("n_detect must be at least 2")


class BackgroundGrid:
    """Uniform cube hash over the (grown) image domain."""

    def __init__(self, lo, hi, grid_size):
        self.a = float(grid_size)
        self.lo = np.asarray(lo, dtype=np.float64)
        span = np.asarray(hi, dtype=np.float64) - self.lo
        self.dims = np.maximum(np.ceil(span / self.a).astype(np.int64), 1)
        self.cells = {}
        self.node_count = 0

    def cube_coords(self, points):
        c = np.floor((np.atleast_2d(points) - self.lo) / self.a).astype(np.int64)
        return np.clip(c, 0, self.dims - 1)

    def linear(self, coords):
        nx, ny, _ = self.dims
        return coords[:, 0] + nx * (coords[:, 1] + ny * coords[:, 2])

    def register(self, surfaces):
        """One pass over all nodes; returns per-node cube ids mirroring offsets."""
        offsets = surfaces.vertex_offsets()
        pts = surfaces.all_vertices()
        if len(pts) == 0:
            return np.empty(0, dtype=np.int64)
        cubes = self.linear(self.cube_coords(pts))
        order = np.argsort(cubes, kind="stable")
        sorted_cubes = cubes[order]
        starts = np.flatnonzero(np.concatenate(([True], sorted_cubes[1:] != sorted_cubes[:-1])))
        bounds = np.concatenate((starts, [len(cubes)]))
        mesh_pos = np.searchsorted(offsets, np.arange(len(pts)), side="right") - 1
        vids = np.arange(len(pts)) - offsets[mesh_pos]
        for s, e in zip(bounds[:-1], bounds[1:]):
            idx = order[s:e]
            self.cells[int(sorted_cubes[s])] = np.column_stack((mesh_pos[idx], vids[idx]))
        self.node_count = len(pts)
        return cubes

    def neighborhood(self, cube):
        """Nodes of the cube and its up-to-26 neighbors as (mesh_pos, vid) rows."""
        nx, ny, nz = self.dims
        ix = cube % nx
        iy = (cube // nx) % ny
        iz = cube // (nx * ny)
        found = []
        for dz in (-1, 0, 1):
            for dy in (-1, 0, 1):
                for dx in (-1, 0, 1):
                    jx, jy, jz = ix + dx, iy + dy, iz + dz
                    if 0 <= jx < nx and 0 <= jy < ny and 0 <= jz < nz:
                        cell = self.cells.get(int(jx + nx * (jy + ny * jz)))
                        if cell is not None:
                            found.append(cell)
        if not found:
            return np.empty((0, 2), dtype=np.int64)
        return np.concatenate(found, axis=0)


@dataclass
class TopoEvent:
    kind: str                      # split | merge | genus_increase | genus_decrease | none
    cube: int
    nodes: np.ndarray              # (n, 2) rows (mesh_pos, vertex id)
    n1: np.ndarray = None
    n2: np.ndarray = None
    n_far: int = 0                 # nodes pointing away from both group normals


@dataclass
class SurgeryResult:
    surfaces: SurfaceSet
    kind: str                      # executed kind, or "none" on abort
    aborted: bool = False
    reason: str = ""
    chi_before: int = 0
    chi_after: int = 0


def _unit_weighted_normals(surfaces):
    out = []
    for mesh in surfaces.meshes:
        w = mesh.weighted_vertex_normals()
        n = np.linalg.norm(w, axis=1)
        out.append(w / np.where(n > 0, n, 1.0)[:, None])
    return out


def detect(surfaces, params, box=None):
    """Flag cubes that may host a topology change (one pass over all nodes).

    Returns (grid, flagged) with flagged sorted by descending node count.
    The supplied box is grown if vertices fall outside it.
    """
    pts = surfaces.all_vertices()
    if box is None:
        lo, hi = pts.min(axis=0), pts.max(axis=0)
    else:
        lo = np.minimum(np.asarray(box[0], dtype=np.float64), pts.min(axis=0))
        hi = np.maximum(np.asarray(box[1], dtype=np.float64), pts.max(axis=0))
    grid = BackgroundGrid(lo, hi + 1e-9, params.grid_size)
    cubes = grid.register(surfaces)

    offsets = surfaces.vertex_offsets()
    ids = np.concatenate(
        [np.full(m.n_vertices, m.surface_id, dtype=np.int64) for m in surfaces.meshes]
    )
    normals = np.concatenate(_unit_weighted_normals(surfaces), axis=0)

    order = np.argsort(cubes, kind="stable")
    sc = cubes[order]
    flagged = {}

    # rule (a): crowded cube
    uniq, first = np.unique(sc, return_index=True)
    cnt = np.diff(np.concatenate((first, [len(sc)])))
    for c, n in zip(uniq[cnt > params.n_detect], cnt[cnt > params.n_detect]):
        flagged[int(c)] = int(n)

    # rules (b)/(c) via same-cube pairs at increasing stride; cubes already
    # flagged by (a) are cheap to re-flag so no special casing is needed
    cos_thr2 = np.cos(np.radians(params.thr2))
    max_stride = int(min(cnt.max() if len(cnt) else 1, params.n_detect + 1))
    for k in range(1, max_stride):
        same = sc[k:] == sc[:-k]
        if not np.any(same):
            break
        i = order[:-k][same]
        j = order[k:][same]
        views = ids[i] != ids[j]
        opposed = np.einsum("ij,ij->i", normals[i], normals[j]) < cos_thr2
        for c in sc[:-k][same][views | opposed]:
            key = int(c)
            if key not in flagged:
                n = int(cnt[np.searchsorted(uniq, c)])
                flagged[key] = n
    ordered = sorted(flagged.items(), key=lambda kv: (-kv[1], kv[0]))
    return grid, [c for c, _ in ordered]


def _group_normals(normals, params):
    """Two-group structure of a normal cloud, with outlier-seed restarts.

    Returns (group1, group2, unassigned, n1, n2) index lists or None when
    no two opposed groups exist.
    """
    n_c = len(normals)
    cos1 = np.cos(np.radians(params.thr1))
    cos2 = np.cos(np.radians(params.thr2))
    for seed in range(min(n_c, params.max_seed_restarts)):
        rep1 = normals[seed]
        g1 = [seed]
        g2 = []
        rep2 = None
        pending = []
        for j in range(n_c):
            if j == seed:
                continue
            d1 = float(normals[j] @ rep1)
            if d1 > cos1:
                g1.append(j)
            elif rep2 is None and d1 < cos2:
                rep2 = normals[j]
                g2 = [j]
            elif rep2 is not None and float(normals[j] @ rep2) > cos1:
                g2.append(j)
            else:
                pending.append(j)
        if not g2:
            continue
        n1 = _mean_dir(normals[g1])
        n2 = _mean_dir(normals[g2])
        unassigned = []
        for j in pending:
            if float(normals[j] @ n1) > cos1:
                g1.append(j)
            elif float(normals[j] @ n2) > cos1:
                g2.append(j)
            else:
                unassigned.append(j)
        if min(len(g1), len(g2)) < params.outlier_fraction * n_c:
            continue
        return g1, g2, unassigned, _mean_dir(normals[g1]), _mean_dir(normals[g2])
    return None


def _mean_dir(vs):
    m = np.mean(vs, axis=0)
    n = np.linalg.norm(m)
    return m / n if n > 0 else m


def classify(cube, grid, surfaces, params):
    """Identify the kind of topology change hinted at by a flagged cube."""
    nodes = grid.neighborhood(cube)
    if len(nodes) < 2:
        return TopoEvent("none", cube, nodes)
    unit = _unit_weighted_normals(surfaces)
    normals = np.array([unit[mp][vi] for mp, vi in nodes])
    grouping = _group_normals(normals, params)
    if grouping is None:
        return TopoEvent("none", cube, nodes)
    g1, g2, unassigned, n1, n2 = grouping
    cos3 = np.cos(np.radians(params.thr3))
    n_far = sum(
        1 for j in unassigned
        if normals[j] @ n1 < cos3 and normals[j] @ n2 < cos3
    )
    if n_far > params.split_fraction * len(nodes):
        # three or more direction groups: a neck or closing hole is collapsing;
        # split vs genus decrease is settled by the post-deletion component count
        return TopoEvent("split", cube, nodes, n1, n2, n_far)
    ids = {surfaces.meshes[mp].surface_id for mp, _ in nodes}
    kind = "merge" if len(ids) >= 2 else "genus_increase"
    return TopoEvent(kind, cube, nodes, n1, n2, n_far)


def hungarian_match(cost):
    """Minimum-cost assignment on the smaller side of a cost matrix."""
    cost = np.asarray(cost, dtype=np.float64)
    if cost.size == 0:
        raise ValueError("empty cost matrix")
    if not np.all(np.isfinite(cost)):
        raise ValueError("costs must be finite")
    rows, cols = linear_sum_assignment(cost)
    return list(zip(rows.tolist(), cols.tolist())), float(cost[rows, cols].sum())


# ---------------------------------------------------------------------------
# working structure for local mesh edits


class _Patch:
    """Editable face soup for one mesh, tracking directed edges of live faces."""

    def __init__(self, mesh):
        self.base_vertices = mesh.vertices
        self.extra_vertices = []
        self.faces = [tuple(int(v) for v in f) for f in mesh.faces]
        self.alive = [True] * len(self.faces)
        self.edge_map = {}
        for idx, (a, b, c) in enumerate(self.faces):
            self.edge_map[(a, b)] = idx
            self.edge_map[(b, c)] = idx
            self.edge_map[(c, a)] = idx

    def n_vertices(self):
        return len(self.base_vertices) + len(self.extra_vertices)

    def position(self, v):
        if v < len(self.base_vertices):
            return self.base_vertices[v]
        return self.extra_vertices[v - len(self.base_vertices)]

    def add_vertex(self, p):
        self.extra_vertices.append(np.asarray(p, dtype=np.float64))
        return self.n_vertices() - 1

    def edges_of(self, idx):
        a, b, c = self.faces[idx]
        return ((a, b), (b, c), (c, a))

    def delete_face(self, idx):
        self.alive[idx] = False
        for e in self.edges_of(idx):
            if self.edge_map.get(e) == idx:
                del self.edge_map[e]

    def add_face(self, a, b, c):
        if a == b or b == c or a == c:
            raise TopologyError("degenerate face (%d, %d, %d)" % (a, b, c))
        idx = len(self.faces)
        self.faces.append((a, b, c))
        self.alive.append(True)
        for e in ((a, b), (b, c), (c, a)):
            if e in self.edge_map:
                raise TopologyError("edge %r already claimed; non-manifold weld" % (e,))
            self.edge_map[e] = idx
        return idx

    def free_edges_of(self, idx):
        return [e for e in self.edges_of(idx) if (e[1], e[0]) not in self.edge_map]

    def live_faces(self):
        return [i for i, a in enumerate(self.alive) if a]

    def delete_touching(self, vertex_set):
        """Delete faces meeting the set, then faces left with >= 2 free edges."""
        queue = []
        for i in self.live_faces():
            if any(v in vertex_set for v in self.faces[i]):
                queue.append(i)
        deleted = 0
        affected = set()
        for i in queue:
            if self.alive[i]:
                for e in self.edges_of(i):
                    rev = self.edge_map.get((e[1], e[0]))
                    if rev is not None:
                        affected.add(rev)
                self.delete_face(i)
                deleted += 1
        work = sorted(affected)
        while work:
            nxt = set()
            for i in work:
                if self.alive[i] and len(self.free_edges_of(i)) >= 2:
                    for e in self.edges_of(i):
                        rev = self.edge_map.get((e[1], e[0]))
                        if rev is not None:
                            nxt.add(rev)
                    self.delete_face(i)
                    deleted += 1
            work = sorted(v for v in nxt if self.alive[v])
        return deleted

    def components(self):
        """Connected components of live faces via shared edges."""
        live = self.live_faces()
        comp = {}
        n = 0
        for start in live:
            if start in comp:
                continue
            stack = [start]
            comp[start] = n
            while stack:
                f = stack.pop()
                for a, b in self.edges_of(f):
                    g = self.edge_map.get((b, a))
                    if g is not None and g not in comp:
                        comp[g] = n
                        stack.append(g)
            n += 1
        return comp, n

    def boundary_loops(self):
        """Free-edge cycles as vertex lists; None when a loop is not simple."""
        free = {}
        for (a, b), idx in self.edge_map.items():
            if (b, a) not in self.edge_map:
                if a in free:
                    return None  # two boundary edges leave one vertex
                free[a] = (b, idx)
        loops = []
        seen = set()
        for a in sorted(free):
            if a in seen:
                continue
            loop_v = [a]
            loop_f = []
            cur = a
            while True:
                seen.add(cur)
                nxt, idx = free[cur]
                loop_f.append(idx)
                if nxt == a:
                    break
                if nxt in seen or nxt not in free:
                    return None
                loop_v.append(nxt)
                cur = nxt
            loops.append((loop_v, loop_f))
        return loops

    def extract(self, face_indices, surface_id):
        """Build a compacted SurfaceMesh from a subset of live faces."""
        faces = np.asarray([self.faces[i] for i in face_indices], dtype=np.int64)
        used = np.unique(faces)
        coords = np.array([self.position(int(v)) for v in used])
        new_faces = np.searchsorted(used, faces)
        return SurfaceMesh(coords, new_faces, build_neighbors(new_faces), surface_id)


def _close_loop_with_fan(patch, loop_v, center):
    """Cap a boundary loop with a fresh vertex, then thin its fan (<= 8 faces).

    Every free edge (a, b) gets the cap face (b, a, p).  Adjacent cap pairs
    are then rewritten into four faces so that only one keeps the fresh
    vertex, roughly halving its valence per sweep; midpoints of the spokes
    become new ring vertices, and an odd leftover face is subdivided in
    three against the midpoints its neighbors created.
    """
    pv = patch.add_vertex(center)
    ring = list(loop_v)
    # fan face for ring edge (v_k -> v_{k+1}) is (v_{k+1}, v_k, pv)
    fan = []
    n = len(ring)
    for k in range(n):
        fan.append(patch.add_face(ring[(k + 1) % n], ring[k], pv))

    while len(ring) > 8:
        n = len(ring)
        pairs = n // 2
        odd = n % 2 == 1
        mid = {}

        def midpoint(k):
            if k not in mid:
                mid[k] = patch.add_vertex(0.5 * (patch.position(ring[k]) + patch.position(pv)))
            return mid[k]

        for f in fan:
            patch.delete_face(f)
        new_ring = []
        new_fan = []
        for i in range(pairs):
            k = 2 * i
            t, l, r = ring[(k + 1) % n], ring[k], ring[(k + 2) % n]
            m1 = midpoint(k)
            m2 = midpoint((k + 2) % n)
            patch.add_face(t, l, m1)
            patch.add_face(t, m1, m2)
            new_fan.append(patch.add_face(m1, pv, m2))
            patch.add_face(t, m2, r)
            new_ring.append(m1)
        if odd:
            v0, v1 = ring[n - 1], ring[0]
            ma = midpoint(n - 1)
            mb = midpoint(0)
            patch.add_face(v1, v0, ma)
            patch.add_face(v1, ma, mb)
            new_fan.append(patch.add_face(ma, pv, mb))
            new_ring.append(ma)
        # new fan triangles (m1, pv, m2) walk the ring in the original order
        ring = new_ring
        fan = new_fan
    return pv


def _restrict_to_dominant_mesh(event, surfaces):
    by_mesh = {}
    for mp, vi in event.nodes:
        by_mesh.setdefault(int(mp), []).append(int(vi))
    dominant = max(sorted(by_mesh), key=lambda mp: len(by_mesh[mp]))
    return dominant, by_mesh


def split_or_genus_decrease(surfaces, event):
    """Delete the collapsing patch and close the two holes at its midpoint.

    Two remaining components mean a split (the second component becomes a
    new surface); one component means a genus decrease.  Any structural
    surprise aborts and returns the input unchanged.
    """
    original = surfaces
    dominant, by_mesh = _restrict_to_dominant_mesh(event, surfaces)
    if len(by_mesh) > 1:
        logger.info("split event restricted to surface with most nodes (of %d)", len(by_mesh))
    mesh = surfaces.meshes[dominant]
    chi_before = sum(m.euler_characteristic() for m in surfaces.meshes)
    vset = set(by_mesh[dominant])
    p_e = mesh.vertices[sorted(vset)].mean(axis=0)

    patch = _Patch(mesh)
    if patch.delete_touching(vset) == 0:
        return SurgeryResult(original, "none", True, "no faces touch the event nodes")
    comp, n_comp = patch.components()
    if n_comp not in (1, 2):
        return SurgeryResult(
            original, "none", True, "deletion left %d components" % n_comp
        )
    loops = patch.boundary_loops()
    if loops is None or len(loops) != 2:
        return SurgeryResult(
            original, "none", True,
            "boundary is not two simple loops (%s)" % ("none" if loops is None else len(loops)),
        )
    kind = "split" if n_comp == 2 else "genus_decrease"
    if kind != event.kind and event.kind in ("split", "genus_decrease"):
        logger.info("component count says %s (classifier suggested %s)", kind, event.kind)

    for loop_v, _ in loops:
        _close_loop_with_fan(patch, loop_v, p_e)

    comp, n_comp2 = patch.components()
    try:
        if kind == "split":
            if n_comp2 != 2:
                raise TopologyError("capping changed the component count")
            groups = {}
            for f, c in comp.items():
                groups.setdefault(c, []).append(f)
            parts = sorted(groups.values(), key=len, reverse=True)
            new_id = surfaces.next_surface_id()
            kept = patch.extract(sorted(parts[0]), mesh.surface_id)
            born = patch.extract(sorted(parts[1]), new_id)
            validate_closed(kept)
            validate_closed(born)
            meshes = list(surfaces.meshes)
            topo = list(surfaces.region_topology)
            meshes[dominant] = kept
            meshes.append(born)
            topo.append(surfaces.region_topology[dominant])
            out = SurfaceSet(meshes, topo, surfaces.n_regions)
        else:
            if n_comp2 != 1:
                raise TopologyError("capping changed the component count")
            rebuilt = patch.extract(sorted(patch.live_faces()), mesh.surface_id)
            validate_closed(rebuilt)
            meshes = list(surfaces.meshes)
            meshes[dominant] = rebuilt
            out = SurfaceSet(meshes, list(surfaces.region_topology), surfaces.n_regions)
    except (MeshError, TopologyError) as exc:
        return SurgeryResult(original, "none", True, "surgery produced invalid mesh: %s" % exc)
    chi_after = sum(m.euler_characteristic() for m in out.meshes)
    expected = 2 if kind in ("split", "genus_decrease") else -2
    if chi_after - chi_before != expected:
        return SurgeryResult(
            original, "none", True,
            "Euler characteristic moved by %d, expected %d" % (chi_after - chi_before, expected),
        )
    return SurgeryResult(out, kind, False, "", chi_before, chi_after)


def _cyclic_offset_cost(cost, offset):
    n = len(cost)
    cols = (offset - np.arange(n)) % n
    return float(cost[np.arange(n), cols].sum())


def _match_loops(cost):
    """Assignment between two equal loops that respects their cyclic order.

    Starts from the optimal unconstrained assignment; if it crosses (it is
    then not a rigid cyclic shift), falls back to the cheapest of the n
    order-preserving shifts.  Seam orientation fixes the direction: walking
    loop 1 forward must walk loop 2 backward.
    """
    n = len(cost)
    pairs, _ = hungarian_match(cost)
    perm = np.empty(n, dtype=np.int64)
    for r, c in pairs:
        perm[r] = c
    offsets = (perm + np.arange(n)) % n
    if np.all(offsets == offsets[0]):
        return perm
    best = min(range(n), key=lambda o: (_cyclic_offset_cost(cost, o), o))
    logger.info("assignment crossed the loops; using best cyclic shift instead")
    return (best - np.arange(n)) % n


def merge_or_genus_increase(surfaces, event):
    """Delete the facing patches and sew the two boundary loops together.

    For a merge the loops live on two surfaces sharing the same (k+, k-)
    pair and the second mesh is absorbed into the first; for a genus
    increase both loops belong to one surface.  Matched nodes collapse to
    their midpoints; loop lengths are first equalized by bisecting faces
    at free edges of the shorter loop.
    """
    original = surfaces
    by_mesh = {}
    for mp, vi in event.nodes:
        by_mesh.setdefault(int(mp), set()).add(int(vi))
    involved = sorted(by_mesh)
    chi_before = sum(m.euler_characteristic() for m in surfaces.meshes)

    if event.kind == "merge":
        if len(involved) != 2:
            return SurgeryResult(original, "none", True,
                                 "merge needs nodes of exactly two surfaces")
        i1, i2 = involved
        if surfaces.region_topology[i1] != surfaces.region_topology[i2]:
            return SurgeryResult(
                original, "none", True,
                "cannot merge surfaces separating different region pairs",
            )
    else:
        if len(involved) != 1:
            return SurgeryResult(original, "none", True,
                                 "genus increase needs nodes of one surface")
        i1 = i2 = involved[0]

    if i1 == i2:
        patch = _Patch(surfaces.meshes[i1])
        if patch.delete_touching(by_mesh[i1]) == 0:
            return SurgeryResult(original, "none", True, "no faces touch the event nodes")
        comp, n_comp = patch.components()
        if n_comp != 1:
            return SurgeryResult(original, "none", True,
                                 "deletion split the surface into %d parts" % n_comp)
        loops = patch.boundary_loops()
        if loops is None or len(loops) != 2:
            return SurgeryResult(original, "none", True, "boundary is not two simple loops")
        loop1, loop2 = loops
        try:
            fused = _sew(patch, None, loop1, loop2, surfaces.meshes[i1].surface_id)
        except (MeshError, TopologyError) as exc:
            return SurgeryResult(original, "none", True, "sewing failed: %s" % exc)
        meshes = list(surfaces.meshes)
        meshes[i1] = fused
        out = SurfaceSet(meshes, list(surfaces.region_topology), surfaces.n_regions)
        kind = "genus_increase"
    else:
        patch1 = _Patch(surfaces.meshes[i1])
        patch2 = _Patch(surfaces.meshes[i2])
        d1 = patch1.delete_touching(by_mesh[i1])
        d2 = patch2.delete_touching(by_mesh[i2])
        if d1 == 0 or d2 == 0:
            return SurgeryResult(original, "none", True, "no faces touch the event nodes")
        for p in (patch1, patch2):
            comp, n_comp = p.components()
            if n_comp != 1:
                return SurgeryResult(original, "none", True, "deletion split a surface")
        l1 = patch1.boundary_loops()
        l2 = patch2.boundary_loops()
        if l1 is None or l2 is None or len(l1) != 1 or len(l2) != 1:
            return SurgeryResult(original, "none", True, "boundary is not two simple loops")
        try:
            fused = _sew(patch1, patch2, l1[0], l2[0], surfaces.meshes[i1].surface_id)
        except (MeshError, TopologyError) as exc:
            return SurgeryResult(original, "none", True, "sewing failed: %s" % exc)
        meshes = [m for k, m in enumerate(surfaces.meshes) if k != i2]
        meshes[i1 if i1 < i2 else i1 - 1] = fused
        topo = [t for k, t in enumerate(surfaces.region_topology) if k != i2]
        out = SurfaceSet(meshes, topo, surfaces.n_regions)
        kind = "merge"

    try:
        validate_closed(fused)
    except MeshError as exc:
        return SurgeryResult(original, "none", True, "fused mesh invalid: %s" % exc)
    chi_after = sum(m.euler_characteristic() for m in out.meshes)
    if chi_after - chi_before != -2:
        return SurgeryResult(
            original, "none", True,
            "Euler characteristic moved by %d, expected -2" % (chi_after - chi_before),
        )
    return SurgeryResult(out, kind, False, "", chi_before, chi_after)


def _bisect_free_edge(patch, loop_v, loop_f):
    """Split the face behind the longest free edge of the loop, adding a node."""
    n = len(loop_v)
    lengths = [
        np.linalg.norm(patch.position(loop_v[(k + 1) % n]) - patch.position(loop_v[k]))
        for k in range(n)
    ]
    k = int(np.argmax(lengths))
    a, b = loop_v[k], loop_v[(k + 1) % n]
    f = patch.edge_map[(a, b)]
    fa, fb, fc = patch.faces[f]
    # rotate so the free edge is (fa, fb)
    while not (fa == a and fb == b):
        fa, fb, fc = fb, fc, fa
    m = patch.add_vertex(0.5 * (patch.position(a) + patch.position(b)))
    patch.delete_face(f)
    f1 = patch.add_face(a, m, fc)
    f2 = patch.add_face(m, b, fc)
    loop_v.insert(k + 1, m)
    loop_f[k:k + 1] = [f1, f2]
    return loop_v, loop_f


def _sew(patch1, patch2, loop1, loop2, surface_id):
    """Equalize, match and fuse two boundary loops into one seam.

    patch2 is None when both loops belong to patch1 (genus increase).
    Matched vertices of loop 2 are redirected onto loop-1 vertices moved to
    the pair midpoints, then the combined face set is compacted.
    """
    second = patch2 if patch2 is not None else patch1
    l1v, l1f = list(loop1[0]), list(loop1[1])
    l2v, l2f = list(loop2[0]), list(loop2[1])
    cap = len(l1v) + len(l2v) + 8
    while len(l1v) < len(l2v):
        l1v, l1f = _bisect_free_edge(patch1, l1v, l1f)
        cap -= 1
        if cap < 0:
            raise TopologyError("loop equalization did not terminate")
    while len(l2v) < len(l1v):
        l2v, l2f = _bisect_free_edge(second, l2v, l2f)
        cap -= 1
        if cap < 0:
            raise TopologyError("loop equalization did not terminate")
    n = len(l1v)
    p1 = np.array([patch1.position(v) for v in l1v])
    p2 = np.array([second.position(v) for v in l2v])
    cost = np.linalg.norm(p1[:, None, :] - p2[None, :, :], axis=2)
    perm = _match_loops(cost)

    # assemble the combined face list with loop-2 vertices redirected
    faces1 = [patch1.faces[i] for i in patch1.live_faces()]
    shift = 0 if patch2 is None else patch1.n_vertices()
    redirect = {}
    midpoints = {}
    for k in range(n):
        u = l1v[k]
        w = l2v[int(perm[k])]
        redirect[w] = u
        midpoints[u] = 0.5 * (patch1.position(u) + second.position(w))
    if patch2 is None:
        faces2 = []
        faces1 = [
            tuple(redirect.get(v, v) for v in f) for f in faces1
        ]
    else:
        faces2 = [
            tuple(redirect[v] if v in redirect else v + shift for v in patch2.faces[i])
            for i in patch2.live_faces()
        ]

    all_faces = np.asarray(faces1 + faces2, dtype=np.int64)
    if len(all_faces) == 0:
        raise TopologyError("nothing left to sew")
    n_total = patch1.n_vertices() + (0 if patch2 is None else patch2.n_vertices())
    coords = np.empty((n_total, 3))
    for v in range(patch1.n_vertices()):
        coords[v] = patch1.position(v)
    if patch2 is not None:
        for v in range(patch2.n_vertices()):
            coords[v + shift] = patch2.position(v)
    for u, p in midpoints.items():
        coords[u] = p

    used = np.unique(all_faces)
    remap = np.full(n_total, -1, dtype=np.int64)
    remap[used] = np.arange(len(used))
    return SurfaceMesh(
        coords[used], remap[all_faces], build_neighbors(remap[all_faces]), surface_id
    )


def execute_event(surfaces, event):
    if event.kind in ("split", "genus_decrease"):
        return split_or_genus_decrease(surfaces, event)
    if event.kind in ("merge", "genus_increase"):
        return merge_or_genus_increase(surfaces, event)
    return SurgeryResult(surfaces, "none", True, "nothing to execute")


@dataclass
class EventRecord:
    kind: str
    cube: int
    n_nodes: int
    chi_before: int
    chi_after: int


def run_topology_pass(surfaces, params, box=None):
    """Detect and execute all topology changes due in this step.

    Flagged cubes are processed in order of decreasing node count; after
    an executed surgery the node bins are rebuilt and cubes within three
    cubes of an executed one are skipped, since their nodes were consumed
    by the surgery.
    """
    grid, flagged = detect(surfaces, params, box)
    if not flagged:
        return surfaces, []
    records = []
    consumed = []
    nx, ny, _ = grid.dims
    for cube in flagged:
        cx, cy, cz = cube % nx, (cube // nx) % ny, cube // (nx * ny)
        if any(
            max(abs(cx - ox), abs(cy - oy), abs(cz - oz)) <= 3
            for ox, oy, oz in consumed
        ):
            continue
        event = classify(cube, grid, surfaces, params)
        if event.kind == "none":
            continue
        result = execute_event(surfaces, event)
        if result.aborted:
            logger.info("surgery aborted at cube %d: %s", cube, result.reason)
            continue
        surfaces = result.surfaces
        records.append(EventRecord(result.kind, cube, len(event.nodes),
                                   result.chi_before, result.chi_after))
        consumed.append((cx, cy, cz))
        grid = BackgroundGrid(grid.lo, grid.lo + grid.dims * grid.a, grid.a)
        grid.register(surfaces)
    return surfaces, records
