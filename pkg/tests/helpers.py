"""Shared test utilities: independent geometric oracles and fixture meshes."""

import numpy as np

from surfseg.mesh import SurfaceMesh, build_neighbors


def random_rotation(rng):
    """Uniform-ish random rotation matrix via QR of a Gaussian sample."""
    q, r = np.linalg.qr(rng.randn(3, 3))
    q *= np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q


def winding_inside(points, mesh):
    """Inside test by total signed solid angle (van Oosterom-Strackee).

    Independent of the package's ray-parity labeling: sums the solid angle
    subtended by every face; ~4pi magnitude inside, ~0 outside.
    """
    points = np.atleast_2d(points)
    q = mesh.vertices[mesh.faces]
    total = np.zeros(len(points))
    for f in range(len(q)):
        a = q[f, 0] - points
        b = q[f, 1] - points
        c = q[f, 2] - points
        la = np.linalg.norm(a, axis=1)
        lb = np.linalg.norm(b, axis=1)
        lc = np.linalg.norm(c, axis=1)
        num = np.einsum("ij,ij->i", a, np.cross(b, c))
        den = (
            la * lb * lc
            + np.einsum("ij,ij->i", a, b) * lc
            + np.einsum("ij,ij->i", b, c) * la
            + np.einsum("ij,ij->i", a, c) * lb
        )
        total += 2.0 * np.arctan2(num, den)
    return np.abs(total) > 2.0 * np.pi


def lathe_mesh(xs, radii, n_theta, surface_id=1):
    """Closed surface of revolution around the x-axis with polar end caps.

    xs has len(radii) + 2 entries: pole, ring stations, pole.
    """
    theta = 2.0 * np.pi * np.arange(n_theta) / n_theta
    cos_t, sin_t = np.cos(theta), np.sin(theta)
    verts = [np.array([[xs[0], 0.0, 0.0]])]
    for x, rho in zip(xs[1:-1], radii):
        ring = np.column_stack([np.full(n_theta, x), rho * cos_t, rho * sin_t])
        verts.append(ring)
    verts.append(np.array([[xs[-1], 0.0, 0.0]]))
    vertices = np.concatenate(verts, axis=0)

    n_rings = len(radii)
    faces = []
    for j in range(n_theta):
        faces.append((0, 1 + j, 1 + (j + 1) % n_theta))
    for i in range(n_rings - 1):
        a0 = 1 + i * n_theta
        b0 = a0 + n_theta
        for j in range(n_theta):
            j1 = (j + 1) % n_theta
            faces.append((a0 + j, b0 + j, b0 + j1))
            faces.append((a0 + j, b0 + j1, a0 + j1))
    top = 1 + n_rings * n_theta
    last = 1 + (n_rings - 1) * n_theta
    for j in range(n_theta):
        faces.append((top, last + (j + 1) % n_theta, last + j))
    faces = np.asarray(faces, dtype=np.int64)
    mesh = SurfaceMesh(vertices, faces, build_neighbors(faces), surface_id)
    # poles at -x and +x give outward winding already; flip if not
    from surfseg.mesh import signed_volume

    if signed_volume(mesh) < 0:
        faces = faces[:, (0, 2, 1)]
        mesh = SurfaceMesh(vertices, faces, build_neighbors(faces), surface_id)
    return mesh


def dumbbell_mesh(bulb_radius=0.5, bulb_offset=0.9, neck_radius=0.02, n_theta=16,
                  n_profile=40, surface_id=1):
    """Two bulbs joined by a thin waist at x=0; pinches like a collapsing neck."""
    span = bulb_offset + bulb_radius
    xs_inner = np.linspace(-span * 0.98, span * 0.98, n_profile)
    radii = []
    for x in xs_inner:
        r2 = bulb_radius ** 2 - (abs(x) - bulb_offset) ** 2
        bulb = np.sqrt(max(r2, 0.0)) if abs(x) > bulb_offset - bulb_radius else bulb_radius
        envelope = max(bulb, 0.0)
        waist = neck_radius + (envelope - neck_radius) * min(1.0, (abs(x) / bulb_offset) ** 2)
        radii.append(max(waist, neck_radius))
    xs = np.concatenate(([-span], xs_inner, [span]))
    return lathe_mesh(xs, np.asarray(radii), n_theta, surface_id)


def thin_hole_torus(ring_radius=0.5, hole_radius=0.012, n_ring=48, n_tube=24, surface_id=1):
    """Torus whose central hole has nearly closed (inner wall hugs the z-axis)."""
    from surfseg.mesh import torus

    mesh = torus(ring_radius=ring_radius, tube_radius=ring_radius - hole_radius,
                 n_ring=n_ring, n_tube=n_tube)
    mesh.surface_id = surface_id
    return mesh


def dimpled_sphere(radius=1.0, dimple_r=0.3, flat_r=0.15, gap=0.004, subdivisions=5,
                   surface_id=1):
    """Sphere with both poles pressed flat to z = +-gap/2 over a polar disk.

    Vertices within flat_r of the axis sit exactly on the flats; the ring
    out to dimple_r blends back to the sphere.  The two flats face each
    other across a thin slab, the precursor of a genus increase.
    """
    from surfseg.mesh import icosphere

    base = icosphere(radius=radius, subdivisions=subdivisions)
    v = base.vertices.copy()
    rho = np.sqrt(v[:, 0] ** 2 + v[:, 1] ** 2)
    s = np.clip((dimple_r - rho) / (dimple_r - flat_r), 0.0, 1.0)
    blend = s * s * (3 - 2 * s)
    top = (rho < dimple_r) & (v[:, 2] > 0)
    bot = (rho < dimple_r) & (v[:, 2] < 0)
    v[top, 2] = v[top, 2] * (1 - blend[top]) + (gap / 2.0) * blend[top]
    v[bot, 2] = v[bot, 2] * (1 - blend[bot]) - (gap / 2.0) * blend[bot]
    return SurfaceMesh(v, base.faces.copy(), base.neighbors.copy(), surface_id)


def mean_radius(mesh, center=None):
    if center is None:
        center = mesh.vertices.mean(axis=0)
    return float(np.linalg.norm(mesh.vertices - center, axis=1).mean())
