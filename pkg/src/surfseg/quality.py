"""Triangle size and angle control: bisection refinement, guarded deletion.

Oversized or obtuse faces are bisected along their largest edge together
with the neighbor across that edge, so no hanging nodes appear.  Tiny
faces collapse onto their centroid (taking their three edge-neighbors
along); sliver faces collapse their shortest edge (taking one neighbor).
Deletions that would break manifoldness or flip orientation are skipped
and logged.  Both passes preserve closedness and the Euler characteristic.
"""

import logging
from dataclasses import dataclass

import numpy as np

from .mesh import SurfaceMesh, build_neighbors

logger = logging.getLogger(__name__)


@dataclass
class QualityParams:
    """Target face area and the refine/delete thresholds around it."""

    desired_area: float
    refine_factor: float = 2.0
    max_angle_deg: float = 160.0
    min_angle_deg: float = 2.0
    min_area_fraction: float = 0.01
    max_passes: int = 20

    def __post_init__(self):
        if self.desired_area <= 0:
            raise ValueError("desired_area must be positive")
        if self.refine_factor <= 1:
            raise ValueError("refine_factor must exceed 1")
        if not (0 < self.min_angle_deg < 60 < self.max_angle_deg < 180):
            raise ValueError("need 0 < min_angle < 60 < max_angle < 180")


def _face_angles(vertices, faces):
    """Interior angles in degrees, shape (n_faces, 3); angle k at vertex k."""
    q = vertices[faces]
    out = np.empty((len(faces), 3))
    for k in range(3):
        u = q[:, (k + 1) % 3] - q[:, k]
        v = q[:, (k + 2) % 3] - q[:, k]
        nu = np.linalg.norm(u, axis=1)
        nv = np.linalg.norm(v, axis=1)
        cosang = np.einsum("ij,ij->i", u, v) / np.maximum(nu * nv, 1e-300)
        out[:, k] = np.degrees(np.arccos(np.clip(cosang, -1.0, 1.0)))
    return out


def _areas(vertices, faces):
    q = vertices[faces]
    return 0.5 * np.linalg.norm(np.cross(q[:, 1] - q[:, 0], q[:, 2] - q[:, 0]), axis=1)


class _EditMesh:
    """List-backed mesh with a directed-edge map for local rewrites."""

    def __init__(self, mesh):
        self.positions = [p for p in mesh.vertices]
        self.faces = [tuple(int(v) for v in f) for f in mesh.faces]
        self.edge_map = {}
        for i, (a, b, c) in enumerate(self.faces):
            self.edge_map[(a, b)] = i
            self.edge_map[(b, c)] = i
            self.edge_map[(c, a)] = i

    def alive(self, i):
        return self.faces[i] is not None

    def delete(self, i):
        a, b, c = self.faces[i]
        for e in ((a, b), (b, c), (c, a)):
            if self.edge_map.get(e) == i:
                del self.edge_map[e]
        self.faces[i] = None

    def add(self, a, b, c):
        i = len(self.faces)
        self.faces.append((a, b, c))
        for e in ((a, b), (b, c), (c, a)):
            self.edge_map[e] = i
        return i

    def add_vertex(self, p):
        self.positions.append(np.asarray(p, dtype=np.float64))
        return len(self.positions) - 1

    def neighbor(self, a, b):
        return self.edge_map.get((b, a))

    def to_mesh(self, surface_id):
        faces = np.asarray([f for f in self.faces if f is not None], dtype=np.int64)
        used = np.unique(faces)
        coords = np.asarray([self.positions[v] for v in used])
        remap = np.searchsorted(used, faces)
        return SurfaceMesh(coords, remap, build_neighbors(remap), surface_id)


def refine_pass(mesh, params):
    """Bisect oversized and overly obtuse faces until none qualify.

    Every bisection splits the face's largest edge (ties to the lowest
    edge index) and the neighbor sharing it: two faces and one midpoint
    vertex per event, total area unchanged.  Stops when no face qualifies
    or after max_passes sweeps.  Returns (mesh, n_bisections).
    """
    area_cap = params.refine_factor * params.desired_area
    area_floor = params.min_area_fraction * params.desired_area
    dirty = mesh
    total = 0
    for sweep in range(params.max_passes):
        areas = _areas(dirty.vertices, dirty.faces)
        marked = areas > area_cap
        if not np.all(marked):
            angles = _face_angles(dirty.vertices, dirty.faces)
            # deletion-bound slivers are the delete pass's job; bisecting them
            # would spawn ever thinner children
            marked |= (angles.max(axis=1) > params.max_angle_deg) & (areas > area_floor)
        if not np.any(marked):
            return dirty, total
        em = _EditMesh(dirty)
        for f in np.flatnonzero(marked):
            f = int(f)
            if not em.alive(f):
                continue
            a, b, c = em.faces[f]
            pts = [em.positions[v] for v in (a, b, c)]
            lengths = [
                np.linalg.norm(pts[1] - pts[0]),
                np.linalg.norm(pts[2] - pts[1]),
                np.linalg.norm(pts[0] - pts[2]),
            ]
            k = int(np.argmax(lengths))
            va, vb = ((a, b), (b, c), (c, a))[k]
            vc = ({a, b, c} - {va, vb}).pop()
            g = em.neighbor(va, vb)
            if g is None:
                continue  # free edge mid-surgery; leave it alone
            ga, gb, gc = em.faces[g]
            while not (ga == vb and gb == va):
                ga, gb, gc = gb, gc, ga
            m = em.add_vertex(0.5 * (em.positions[va] + em.positions[vb]))
            em.delete(f)
            em.delete(g)
            em.add(va, m, vc)
            em.add(m, vb, vc)
            em.add(vb, m, gc)
            em.add(m, va, gc)
            total += 1
        dirty = em.to_mesh(dirty.surface_id)
    logger.warning("refinement hit the %d-pass cap; mesh may still be coarse",
                   params.max_passes)
    return dirty, total


def _local_edge_ok(em, vertices):
    """Directed edges of all live faces touching `vertices` must be unique.

    Any non-manifold pattern created by a local rewrite duplicates a
    directed edge with both endpoints in the touched region, and every
    face holding such an edge touches the region, so this scan sees it.
    """
    seen = set()
    for f in em.faces:
        if f is None or not (f[0] in vertices or f[1] in vertices or f[2] in vertices):
            continue
        for e in _face_edges(f):
            if e in seen:
                return False
            seen.add(e)
    return True


def _face_normal_of(em, face):
    a, b, c = (em.positions[v] for v in face)
    return np.cross(b - a, c - a)


def delete_pass(mesh, params):
    """Remove tiny and sliver faces, collapsing their surroundings.

    A face below min_area_fraction * desired_area collapses to its
    centroid: the face and its three edge-neighbors vanish, its three
    vertices merge (faces -4, vertices -2).  A face with an angle below
    min_angle_deg collapses its shortest edge to the midpoint, deleting
    one neighbor as well (faces -2).  Unsafe collapses are skipped and
    logged.  Returns (mesh, n_deleted_faces, n_skipped).
    """
    areas = _areas(mesh.vertices, mesh.faces)
    angles = _face_angles(mesh.vertices, mesh.faces)
    tiny = areas < params.min_area_fraction * params.desired_area
    sliver = angles.min(axis=1) < params.min_angle_deg
    if not np.any(tiny | sliver):
        return mesh, 0, 0

    em = _EditMesh(mesh)
    deleted = 0
    skipped = 0
    for f in np.flatnonzero(tiny | sliver):
        f = int(f)
        if not em.alive(f):
            continue
        if tiny[f]:
            ok = _collapse_face(em, f)
        else:
            ok = _collapse_shortest_edge(em, f)
        if ok:
            deleted += 1
        else:
            skipped += 1
            logger.info("skipped unsafe deletion of face %d", f)
    if deleted == 0:
        return mesh, 0, skipped
    return em.to_mesh(mesh.surface_id), deleted, skipped


def _collapse_face(em, f):
    """Fig.-style centroid collapse: face + 3 neighbors out, vertices merged."""
    a, b, c = em.faces[f]
    n1 = em.neighbor(a, b)
    n2 = em.neighbor(b, c)
    n3 = em.neighbor(c, a)
    if n1 is None or n2 is None or n3 is None:
        return False
    if len({f, n1, n2, n3}) != 4:
        return False
    centroid = (em.positions[a] + em.positions[b] + em.positions[c]) / 3.0
    return _merge_vertices(em, (a, b, c), {f, n1, n2, n3}, centroid)


def _collapse_shortest_edge(em, f):
    a, b, c = em.faces[f]
    pts = {v: em.positions[v] for v in (a, b, c)}
    edges = ((a, b), (b, c), (c, a))
    lengths = [np.linalg.norm(pts[v] - pts[u]) for u, v in edges]
    u, v = edges[int(np.argmin(lengths))]
    g = em.neighbor(u, v)
    if g is None:
        return False
    mid = 0.5 * (em.positions[u] + em.positions[v])
    return _merge_vertices(em, (u, v), {f, g}, mid)


def _merge_vertices(em, old, dead_faces, new_pos):
    """Replace the vertices in `old` by one new vertex, dropping dead_faces.

    Validates the rewrite on the touched neighborhood before keeping it:
    non-manifold edge patterns or flipped face orientations roll it back.
    """
    old_set = set(old)
    affected = [
        i for i, face in enumerate(em.faces)
        if face is not None and i not in dead_faces and any(v in old_set for v in face)
    ]
    dead_saved = {i: em.faces[i] for i in dead_faces}
    vstar = len(em.positions)
    replaced = []
    for i in affected:
        face = em.faces[i]
        new_face = tuple(vstar if v in old_set else v for v in face)
        if len(set(new_face)) != 3:
            return False
        replaced.append((i, face, new_face))
    em.add_vertex(new_pos)
    before = {i: _face_normal_of(em, em.faces[i]) for i in affected}

    for i in dead_faces:
        em.delete(i)
    for i, face, new_face in replaced:
        for e in _face_edges(face):
            if em.edge_map.get(e) == i:
                del em.edge_map[e]
        em.faces[i] = new_face
        for e in _face_edges(new_face):
            em.edge_map[e] = i

    region = set(old_set) | {vstar}
    for i in affected:
        region.update(em.faces[i])
    ok = _local_edge_ok(em, region)
    if ok:
        for i in affected:
            if np.dot(before[i], _face_normal_of(em, em.faces[i])) < 0:
                ok = False
                break
    if ok:
        return True

    # roll back: drop the new claims, then restore every original face
    for i, _, new_face in replaced:
        for e in _face_edges(new_face):
            if em.edge_map.get(e) == i:
                del em.edge_map[e]
    for i, face, _ in replaced:
        em.faces[i] = face
        for e in _face_edges(face):
            em.edge_map[e] = i
    for i, face in dead_saved.items():
        em.faces[i] = face
        for e in _face_edges(face):
            em.edge_map[e] = i
    em.positions.pop()
    return False


def _face_edges(face):
    a, b, c = face
    return ((a, b), (b, c), (c, a))
