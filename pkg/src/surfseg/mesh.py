"""Oriented closed triangle meshes with face-neighbor adjacency.

Faces store vertex triples wound consistently so the per-face normal
(q2-q1) x (q3-q1) points to the outside of the enclosed region.  The
neighbor table lists, for each face, the face across each of its three
edges; slot k corresponds to the edge (faces[f,k], faces[f,(k+1)%3]) and
-1 marks a free edge (only present mid-surgery, never on a valid mesh).
"""

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components


class MeshError(Exception):
    pass


class MeshTopologyError(MeshError):
    pass


class DegenerateFaceError(MeshError):
    pass


class OpenMeshError(MeshError):
    pass


FREE_EDGE = -1

# area below eps * (bbox diagonal)^2 counts as degenerate
_DEGENERATE_AREA_EPS = 1e-12


def build_neighbors(faces, strict=True):
    """Face-neighbor table from shared edges.

    Each undirected edge may appear in at most two faces; when it appears
    twice the two directed copies must run in opposite directions
    (consistent orientation).  Unpaired edges get the -1 sentinel.  With
    strict=True any violation raises MeshTopologyError.
    """
    faces = np.asarray(faces, dtype=np.int64)
    m = len(faces)
    if m == 0:
        return np.empty((0, 3), dtype=np.int64)
    directed = np.concatenate(
        [faces[:, (0, 1)], faces[:, (1, 2)], faces[:, (2, 0)]], axis=0
    )  # entry f + m*k is slot k of face f
    und = np.sort(directed, axis=1)
    order = np.lexsort((und[:, 1], und[:, 0]))
    su = und[order]
    same = np.all(su[1:] == su[:-1], axis=1)
    starts = np.flatnonzero(np.concatenate(([True], ~same)))
    counts = np.diff(np.concatenate((starts, [len(su)])))
    if strict and np.any(counts > 2):
        raise MeshTopologyError("non-manifold edge shared by more than two faces")
    neighbors = np.full(3 * m, FREE_EDGE, dtype=np.int64)
    pair_start = starts[counts == 2]
    i = order[pair_start]
    j = order[pair_start + 1]
    if strict and len(i):
        if np.any(np.all(directed[i] == directed[j], axis=1)):
            raise MeshTopologyError("two faces traverse an edge in the same direction")
    neighbors[i] = j % m
    neighbors[j] = i % m
    return neighbors.reshape(3, m).T.copy()


class SurfaceMesh:
    """One closed oriented triangulated surface."""

    def __init__(self, vertices, faces, neighbors, surface_id=1):
        self.vertices = np.asarray(vertices, dtype=np.float64).reshape(-1, 3)
        self.faces = np.asarray(faces, dtype=np.int64).reshape(-1, 3)
        self.neighbors = np.asarray(neighbors, dtype=np.int64).reshape(-1, 3)
        self.surface_id = int(surface_id)

    @classmethod
    def from_arrays(cls, vertices, faces, surface_id=1):
        faces = np.asarray(faces, dtype=np.int64).reshape(-1, 3)
        return cls(vertices, faces, build_neighbors(faces), surface_id)

    def copy(self):
        return SurfaceMesh(
            self.vertices.copy(), self.faces.copy(), self.neighbors.copy(), self.surface_id
        )

    @property
    def n_vertices(self):
        return len(self.vertices)

    @property
    def n_faces(self):
        return len(self.faces)

    def corner_points(self):
        """Vertex coordinates per face corner, shape (n_faces, 3, 3)."""
        return self.vertices[self.faces]

    def face_cross(self):
        q = self.corner_points()
        return np.cross(q[:, 1] - q[:, 0], q[:, 2] - q[:, 0])

    def face_areas(self):
        return 0.5 * np.linalg.norm(self.face_cross(), axis=1)

    def face_areas_normals(self):
        cross = self.face_cross()
        nrm = np.linalg.norm(cross, axis=1)
        areas = 0.5 * nrm
        safe = np.where(nrm > 0.0, nrm, 1.0)
        return areas, cross / safe[:, None]

    def degenerate_area_threshold(self):
        span = self.vertices.max(axis=0) - self.vertices.min(axis=0)
        diag2 = float(np.dot(span, span))
        return _DEGENERATE_AREA_EPS * max(diag2, 1e-30)

    def vertex_star_areas(self):
        """Total area of the faces incident to each vertex."""
        areas = self.face_areas()
        star = np.zeros(self.n_vertices)
        np.add.at(star, self.faces.ravel(), np.repeat(areas, 3))
        return star

    def weighted_vertex_normals(self):
        """Area-weighted average of incident face normals, one per vertex.

        Not unit length in general; the norm is <= 1 and shrinks where the
        incident faces disagree.  Raises for vertices in no face.
        """
        areas, normals = self.face_areas_normals()
        acc = np.zeros((self.n_vertices, 3))
        star = np.zeros(self.n_vertices)
        w = areas[:, None] * normals
        for k in range(3):
            np.add.at(acc, self.faces[:, k], w)
            np.add.at(star, self.faces[:, k], areas)
        if np.any(star <= 0.0):
            raise MeshTopologyError(
                "surface %d has isolated or zero-area-star vertices" % self.surface_id
            )
        return acc / star[:, None]

    def euler_characteristic(self):
        und = np.sort(
            np.concatenate(
                [self.faces[:, (0, 1)], self.faces[:, (1, 2)], self.faces[:, (2, 0)]], axis=0
            ),
            axis=1,
        )
        n_edges = len(np.unique(und, axis=0))
        return self.n_vertices - n_edges + self.n_faces

    def genus(self):
        chi = self.euler_characteristic()
        if chi > 2 or chi % 2 != 0:
            raise MeshTopologyError("Euler characteristic %d is not 2-2g" % chi)
        return (2 - chi) // 2


def face_area_normal(mesh, f):
    """(area, unit normal) for one face; degenerate faces raise."""
    q = mesh.vertices[mesh.faces[f]]
    cross = np.cross(q[1] - q[0], q[2] - q[0])
    area = 0.5 * float(np.linalg.norm(cross))
    if area < mesh.degenerate_area_threshold():
        raise DegenerateFaceError("face %d of surface %d is degenerate" % (f, mesh.surface_id))
    return area, cross / (2.0 * area)


def weighted_vertex_normal(mesh, v):
    """Weighted normal at one vertex (see weighted_vertex_normals)."""
    incident = np.flatnonzero(np.any(mesh.faces == v, axis=1))
    if len(incident) == 0:
        raise MeshTopologyError("vertex %d belongs to no face" % v)
    areas, normals = mesh.face_areas_normals()
    a = areas[incident]
    return (a[:, None] * normals[incident]).sum(axis=0) / a.sum()


def unit_vertex_normal(mesh, v):
    w = weighted_vertex_normal(mesh, v)
    n = np.linalg.norm(w)
    if n == 0.0:
        raise DegenerateFaceError("vertex %d has vanishing weighted normal" % v)
    return w / n


def enclosed_volume_and_area(mesh):
    """(volume, area) of a closed oriented mesh via the divergence theorem."""
    report = check_mesh(mesh)
    if not report["closed"]:
        raise OpenMeshError("surface %d is not closed" % mesh.surface_id)
    q = mesh.corner_points()
    signed = np.einsum("fi,fi->f", q[:, 0], np.cross(q[:, 1], q[:, 2])).sum() / 6.0
    return abs(float(signed)), float(mesh.face_areas().sum())


def signed_volume(mesh):
    q = mesh.corner_points()
    return float(np.einsum("fi,fi->f", q[:, 0], np.cross(q[:, 1], q[:, 2])).sum() / 6.0)


def check_mesh(mesh):
    """Structural report: closedness, orientation, Euler characteristic, genus.

    Does not raise; callers that require validity use validate_closed.
    """
    faces = mesh.faces
    report = {
        "n_vertices": mesh.n_vertices,
        "n_faces": len(faces),
        "closed": False,
        "oriented": False,
        "manifold": False,
        "euler": None,
        "genus": None,
        "n_components": 0,
    }
    if len(faces) == 0:
        return report
    if np.any(faces < 0) or np.any(faces >= mesh.n_vertices):
        return report
    if np.any(faces[:, 0] == faces[:, 1]) or np.any(faces[:, 1] == faces[:, 2]) or np.any(
        faces[:, 0] == faces[:, 2]
    ):
        return report
    directed = np.concatenate([faces[:, (0, 1)], faces[:, (1, 2)], faces[:, (2, 0)]], axis=0)
    und = np.sort(directed, axis=1)
    uniq, inverse, counts = np.unique(und, axis=0, return_inverse=True, return_counts=True)
    report["manifold"] = bool(np.all(counts <= 2))
    report["closed"] = bool(np.all(counts == 2))
    if report["closed"]:
        # opposite direction across every shared edge
        flipped = directed[:, 0] > directed[:, 1]
        per_edge = np.zeros(len(uniq), dtype=np.int64)
        np.add.at(per_edge, inverse, np.where(flipped, 1, -1))
        report["oriented"] = bool(np.all(per_edge == 0))
    n_edges = len(uniq)
    chi = mesh.n_vertices - n_edges + len(faces)
    report["euler"] = int(chi)
    m = len(faces)
    adj = mesh.neighbors
    ok = adj >= 0
    rows = np.repeat(np.arange(m), 3)[ok.ravel()]
    cols = adj.ravel()[ok.ravel()]
    graph = coo_matrix((np.ones(len(rows)), (rows, cols)), shape=(m, m))
    report["n_components"] = int(connected_components(graph, directed=False)[0])
    if report["closed"] and report["n_components"] == 1 and chi <= 2 and chi % 2 == 0:
        report["genus"] = (2 - chi) // 2
    return report


def validate_closed(mesh):
    """Raise unless the mesh is a closed, consistently oriented 2-manifold."""
    report = check_mesh(mesh)
    if not report["manifold"]:
        raise MeshTopologyError("surface %d is not edge-manifold" % mesh.surface_id)
    if not report["closed"]:
        raise OpenMeshError("surface %d has free edges" % mesh.surface_id)
    if not report["oriented"]:
        raise MeshTopologyError("surface %d is not consistently oriented" % mesh.surface_id)
    if report["n_components"] != 1:
        raise MeshTopologyError(
            "surface %d has %d components" % (mesh.surface_id, report["n_components"])
        )
    nb = build_neighbors(mesh.faces)
    if not np.array_equal(nb, mesh.neighbors):
        raise MeshTopologyError("surface %d neighbor table is stale" % mesh.surface_id)
    areas = mesh.face_areas()
    if np.any(areas <= mesh.degenerate_area_threshold()):
        raise DegenerateFaceError(
            "surface %d has %d degenerate faces"
            % (mesh.surface_id, int(np.sum(areas <= mesh.degenerate_area_threshold())))
        )
    return report


class SurfaceSet:
    """Collection of surfaces plus the region labels each one separates.

    region_topology[i] = (k_plus, k_minus): the unit normal of mesh i
    points from region k_minus into region k_plus.
    """

    def __init__(self, meshes, region_topology, n_regions=None):
        self.meshes = list(meshes)
        self.region_topology = [tuple(int(x) for x in kk) for kk in region_topology]
        if n_regions is None:
            n_regions = max((max(kk) for kk in self.region_topology), default=0)
        self.n_regions = int(n_regions)
        self.validate_labels()

    def validate_labels(self):
        if len(self.meshes) != len(self.region_topology):
            raise MeshError("one (k+, k-) pair required per surface")
        ids = [m.surface_id for m in self.meshes]
        if len(set(ids)) != len(ids):
            raise MeshError("surface ids are not unique: %r" % ids)
        for kp, km in self.region_topology:
            if kp == km:
                raise MeshError("k+ and k- must differ, got (%d, %d)" % (kp, km))
            if not (1 <= kp <= self.n_regions and 1 <= km <= self.n_regions):
                raise MeshError("region labels out of range in (%d, %d)" % (kp, km))

    @property
    def n_surfaces(self):
        return len(self.meshes)

    def total_vertices(self):
        return sum(m.n_vertices for m in self.meshes)

    def vertex_offsets(self):
        """Start offset of each mesh in the concatenated vertex numbering."""
        off = np.zeros(len(self.meshes) + 1, dtype=np.int64)
        for i, m in enumerate(self.meshes):
            off[i + 1] = off[i] + m.n_vertices
        return off

    def all_vertices(self):
        if not self.meshes:
            return np.empty((0, 3))
        return np.concatenate([m.vertices for m in self.meshes], axis=0)

    def bounding_box(self):
        pts = self.all_vertices()
        return pts.min(axis=0), pts.max(axis=0)

    def next_surface_id(self):
        return max((m.surface_id for m in self.meshes), default=0) + 1

    def copy(self):
        return SurfaceSet([m.copy() for m in self.meshes], list(self.region_topology), self.n_regions)

    def validate(self):
        self.validate_labels()
        return [validate_closed(m) for m in self.meshes]


# ---------------------------------------------------------------------------
# seed shapes


def _orient_outward(vertices, faces):
    mesh = SurfaceMesh.from_arrays(vertices, faces)
    if signed_volume(mesh) < 0.0:
        faces = faces[:, (0, 2, 1)]
        mesh = SurfaceMesh.from_arrays(vertices, faces)
    return mesh


_ICO_T = (1.0 + np.sqrt(5.0)) / 2.0
_ICO_VERTS = np.array(
    [
        (-1, _ICO_T, 0), (1, _ICO_T, 0), (-1, -_ICO_T, 0), (1, -_ICO_T, 0),
        (0, -1, _ICO_T), (0, 1, _ICO_T), (0, -1, -_ICO_T), (0, 1, -_ICO_T),
        (_ICO_T, 0, -1), (_ICO_T, 0, 1), (-_ICO_T, 0, -1), (-_ICO_T, 0, 1),
    ],
    dtype=np.float64,
)
_ICO_FACES = np.array(
    [
        (0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11),
        (1, 5, 9), (5, 11, 4), (11, 10, 2), (10, 7, 6), (7, 1, 8),
        (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8), (3, 8, 9),
        (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1),
    ],
    dtype=np.int64,
)


def icosphere(center=(0.0, 0.0, 0.0), radius=1.0, subdivisions=3):
    """Subdivided icosahedron projected onto the sphere."""
    if radius <= 0:
        raise MeshError("sphere radius must be positive")
    verts = [v / np.linalg.norm(v) for v in _ICO_VERTS]
    faces = [tuple(f) for f in _ICO_FACES]
    for _ in range(int(subdivisions)):
        midpoint = {}
        new_faces = []

        def mid(a, b):
            key = (a, b) if a < b else (b, a)
            if key not in midpoint:
                p = verts[a] + verts[b]
                verts.append(p / np.linalg.norm(p))
                midpoint[key] = len(verts) - 1
            return midpoint[key]

        for a, b, c in faces:
            ab, bc, ca = mid(a, b), mid(b, c), mid(c, a)
            new_faces += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
        faces = new_faces
    vertices = np.asarray(verts) * radius + np.asarray(center, dtype=np.float64)
    return _orient_outward(vertices, np.asarray(faces, dtype=np.int64))


def _revolution_frame(axis):
    u = np.asarray(axis, dtype=np.float64)
    n = np.linalg.norm(u)
    if n == 0:
        raise MeshError("axis must be nonzero")
    u = u / n
    e = np.zeros(3)
    e[np.argmin(np.abs(u))] = 1.0
    v = np.cross(u, e)
    v /= np.linalg.norm(v)
    w = np.cross(u, v)
    return u, v, w


def _lathe(xs, radii, n_theta, frame, center):
    """Closed surface of revolution: pole, rings with radii>0, pole."""
    u, v, w = frame
    center = np.asarray(center, dtype=np.float64)
    theta = 2.0 * np.pi * np.arange(n_theta) / n_theta
    cos_t, sin_t = np.cos(theta), np.sin(theta)
    verts = [center + xs[0] * u]
    for x, rho in zip(xs[1:-1], radii):
        ring = center + x * u + rho * (np.outer(cos_t, v) + np.outer(sin_t, w))
        verts.append(ring)
    verts.append((center + xs[-1] * u)[None, :])
    verts[0] = verts[0][None, :]
    vertices = np.concatenate(verts, axis=0)

    n_rings = len(radii)
    faces = []
    ring0 = 1  # vertex index of first ring start
    for j in range(n_theta):
        faces.append((0, ring0 + j, ring0 + (j + 1) % n_theta))
    for i in range(n_rings - 1):
        a0 = ring0 + i * n_theta
        b0 = a0 + n_theta
        for j in range(n_theta):
            j1 = (j + 1) % n_theta
            faces.append((a0 + j, b0 + j, b0 + j1))
            faces.append((a0 + j, b0 + j1, a0 + j1))
    top = ring0 + n_rings * n_theta
    last = ring0 + (n_rings - 1) * n_theta
    for j in range(n_theta):
        faces.append((top, last + (j + 1) % n_theta, last + j))
    return _orient_outward(vertices, np.asarray(faces, dtype=np.int64))


def capsule(center=(0.0, 0.0, 0.0), axis=(1.0, 0.0, 0.0), half_length=1.0, radius=0.5,
            n_theta=24, n_cap=6, n_len=None):
    """Cylinder with hemispherical caps, axis through `center`."""
    if radius <= 0 or half_length < 0:
        raise MeshError("capsule needs radius > 0 and half_length >= 0")
    if n_theta < 3 or n_cap < 2:
        raise MeshError("capsule resolution too coarse")
    if n_len is None:
        n_len = max(2, int(round(2.0 * half_length / (radius * np.pi / n_cap))))
    psi = np.linspace(0.0, np.pi / 2.0, n_cap + 1)[1:]
    x_lo = -half_length - radius * np.cos(psi)
    r_lo = radius * np.sin(psi)
    x_mid = np.linspace(-half_length, half_length, n_len + 1)[1:-1]
    r_mid = np.full(len(x_mid), radius)
    x_hi = half_length + radius * np.cos(psi)[::-1]
    r_hi = radius * np.sin(psi)[::-1]
    xs = np.concatenate(([-half_length - radius], x_lo, x_mid, x_hi, [half_length + radius]))
    radii = np.concatenate((r_lo, r_mid, r_hi))
    return _lathe(xs, radii, n_theta, _revolution_frame(axis), center)


def torus(center=(0.0, 0.0, 0.0), ring_radius=1.2, tube_radius=0.4, n_ring=48, n_tube=24,
          axis=(0.0, 0.0, 1.0)):
    """Torus of revolution around `axis`."""
    if ring_radius <= tube_radius or tube_radius <= 0:
        raise MeshError("torus needs ring_radius > tube_radius > 0")
    if n_ring < 3 or n_tube < 3:
        raise MeshError("torus resolution too coarse")
    u, v, w = _revolution_frame(axis)
    center = np.asarray(center, dtype=np.float64)
    theta = 2.0 * np.pi * np.arange(n_ring) / n_ring
    phi = 2.0 * np.pi * np.arange(n_tube) / n_tube
    rho = ring_radius + tube_radius * np.cos(phi)[None, :]
    ring_dir = np.cos(theta)[:, None, None] * v + np.sin(theta)[:, None, None] * w
    pts = center + rho[:, :, None] * ring_dir + (tube_radius * np.sin(phi))[None, :, None] * u
    vertices = pts.reshape(-1, 3)

    faces = []
    for i in range(n_ring):
        i1 = (i + 1) % n_ring
        for j in range(n_tube):
            j1 = (j + 1) % n_tube
            a, b = i * n_tube + j, i * n_tube + j1
            c, d = i1 * n_tube + j, i1 * n_tube + j1
            faces.append((a, c, d))
            faces.append((a, d, b))
    return _orient_outward(vertices, np.asarray(faces, dtype=np.int64))


def make_seed(shape, **params):
    """Seed surface for the evolution: 'sphere', 'capsule' or 'torus'."""
    builders = {"sphere": icosphere, "capsule": capsule, "torus": torus}
    if shape not in builders:
        raise MeshError("unknown seed shape %r" % (shape,))
    mesh = builders[shape](**params)
    if mesh.n_faces < 8:
        raise MeshError("seed resolution yields fewer than 8 faces")
    validate_closed(mesh)
    return mesh


# ---------------------------------------------------------------------------
# export / import


def export_obj(surface_set, path):
    """Wavefront OBJ with one named object per surface, 1-based indices."""
    with open(path, "w") as fh:
        fh.write("# surfseg surface export\n")
        base = 1
        for mesh, (kp, km) in zip(surface_set.meshes, surface_set.region_topology):
            fh.write("o surface_%d\n" % mesh.surface_id)
            fh.write("# regions k+=%d k-=%d\n" % (kp, km))
            for p in mesh.vertices:
                fh.write("v %.9g %.9g %.9g\n" % (p[0], p[1], p[2]))
            for f in mesh.faces:
                fh.write("f %d %d %d\n" % (f[0] + base, f[1] + base, f[2] + base))
            base += mesh.n_vertices


def import_obj(path):
    """Read an OBJ written by export_obj (or any v/f triangle file)."""
    vertices = []
    groups = []  # (name, faces)
    current = None

    def start(name):
        groups.append((name, []))

    with open(path, "r") as fh:
        for line in fh:
            parts = line.split()
            if not parts or parts[0] == "#":
                continue
            if parts[0] == "o" or parts[0] == "g":
                start(parts[1] if len(parts) > 1 else "surface_%d" % (len(groups) + 1))
                current = groups[-1][1]
            elif parts[0] == "v":
                vertices.append([float(parts[1]), float(parts[2]), float(parts[3])])
            elif parts[0] == "f":
                if current is None:
                    start("surface_1")
                    current = groups[-1][1]
                idx = [int(tok.split("/")[0]) - 1 for tok in parts[1:]]
                if len(idx) != 3:
                    raise MeshError("only triangle faces are supported, got %d-gon" % len(idx))
                current.append(idx)
    vertices = np.asarray(vertices, dtype=np.float64)
    meshes = []
    topo = []
    for i, (name, face_list) in enumerate(g for g in groups if g[1]):
        faces = np.asarray(face_list, dtype=np.int64)
        used = np.unique(faces)
        remap = np.full(len(vertices), -1, dtype=np.int64)
        remap[used] = np.arange(len(used))
        sid = i + 1
        if name.startswith("surface_"):
            try:
                sid = int(name.split("_", 1)[1])
            except ValueError:
                pass
        meshes.append(SurfaceMesh.from_arrays(vertices[used], remap[faces], sid))
        topo.append((1, 2))
    return SurfaceSet(meshes, topo, n_regions=2)


def export_stl(surface_set, path):
    """Binary STL (80-byte header, little-endian) for external viewers."""
    total = sum(m.n_faces for m in surface_set.meshes)
    with open(path, "wb") as fh:
        fh.write(b"surfseg binary stl".ljust(80, b" "))
        fh.write(np.uint32(total).tobytes())
        for mesh in surface_set.meshes:
            areas, normals = mesh.face_areas_normals()
            q = mesh.corner_points().astype("<f4")
            n = normals.astype("<f4")
            for f in range(mesh.n_faces):
                fh.write(n[f].tobytes())
                fh.write(q[f].tobytes())
                fh.write(b"\x00\x00")
