"""Scalar 3D voxel images: raw-file I/O, synthetic test volumes, coordinate maps.

A volume is a box-aligned grid of Nx*Ny*Nz voxels.  Intensities are stored
x-fastest (index = ix + Nx*(iy + Ny*iz)) as float32, the layout of the raw
payload on disk.  The image is treated as piecewise constant per voxel.
"""

import json
import os

import numpy as np


class VoxelImageError(Exception):
    """Base error for voxel image loading/usage."""


class MissingFileError(VoxelImageError):
    pass


class PayloadMismatchError(VoxelImageError):
    pass


class InvalidSpacingError(VoxelImageError):
    pass


class NonFiniteDataError(VoxelImageError):
    pass


class VoxelGrid:
    """Immutable scalar volume with a world-coordinate mapping.

    dims     -- (Nx, Ny, Nz) voxel counts
    origin   -- world coordinates of the minimum corner of the box
    spacing  -- per-axis voxel edge length, all > 0
    data     -- float32 intensities, flat, x-fastest
    """

    def __init__(self, dims, origin, spacing, data):
        self.dims = tuple(int(n) for n in dims)
        if len(self.dims) != 3 or any(n < 1 for n in self.dims):
            raise VoxelImageError("dims must be three positive integers, got %r" % (dims,))
        self.origin = np.asarray(origin, dtype=np.float64).copy()
        self.spacing = np.asarray(spacing, dtype=np.float64).copy()
        if self.origin.shape != (3,) or self.spacing.shape != (3,):
            raise VoxelImageError("origin and spacing must be 3-vectors")
        if np.any(self.spacing <= 0.0):
            raise InvalidSpacingError("spacing must be strictly positive, got %r" % (spacing,))
        data = np.asarray(data, dtype=np.float32).reshape(-1)
        if data.size != self.dims[0] * self.dims[1] * self.dims[2]:
            raise PayloadMismatchError(
                "payload has %d values, dims %r require %d"
                % (data.size, self.dims, self.dims[0] * self.dims[1] * self.dims[2])
            )
        if not np.all(np.isfinite(data)):
            raise NonFiniteDataError("image contains non-finite intensities")
        self.data = data.copy()
        self.data.setflags(write=False)
        self.origin.setflags(write=False)
        self.spacing.setflags(write=False)

    @property
    def n_voxels(self):
        return self.dims[0] * self.dims[1] * self.dims[2]

    @property
    def voxel_volume(self):
        return float(self.spacing[0] * self.spacing[1] * self.spacing[2])

    @property
    def box(self):
        """(min_corner, max_corner) of the image domain."""
        return self.origin.copy(), self.origin + self.spacing * np.asarray(self.dims)

    def center_axes(self):
        """Per-axis arrays of voxel-center coordinates."""
        return tuple(
            self.origin[a] + (np.arange(self.dims[a]) + 0.5) * self.spacing[a] for a in range(3)
        )

    def flat_index(self, ix, iy, iz):
        nx, ny, _ = self.dims
        return ix + nx * (iy + ny * iz)

    def value_at_index(self, idx):
        ix, iy, iz = idx
        return float(self.data[self.flat_index(ix, iy, iz)])

    def voxel_center(self, idx):
        return self.origin + (np.asarray(idx, dtype=np.float64) + 0.5) * self.spacing

    def values_at_points(self, points):
        """Intensity of the voxel containing each point (piecewise-constant lookup).

        Points outside the domain use the nearest in-domain voxel.
        """
        points = np.atleast_2d(np.asarray(points, dtype=np.float64))
        t = (points - self.origin) / self.spacing
        idx = np.floor(t).astype(np.int64)
        # exact-face points drop to the lower cell, matching world_to_voxel
        on_face = (t == idx) & (idx > 0)
        idx[on_face] -= 1
        for a in range(3):
            np.clip(idx[:, a], 0, self.dims[a] - 1, out=idx[:, a])
        flat = idx[:, 0] + self.dims[0] * (idx[:, 1] + self.dims[1] * idx[:, 2])
        return self.data[flat].astype(np.float64)


def world_to_voxel(grid, p):
    """Index of the voxel whose closed cell contains p, or None if outside.

    Points on a shared voxel face resolve to the lower index, so every
    in-domain point maps to exactly one voxel.
    """
    p = np.asarray(p, dtype=np.float64)
    lo, hi = grid.box
    if np.any(p < lo) or np.any(p > hi):
        return None
    t = (p - grid.origin) / grid.spacing
    idx = np.floor(t).astype(np.int64)
    for a in range(3):
        if t[a] == idx[a] and idx[a] > 0:
            idx[a] -= 1
        if idx[a] >= grid.dims[a]:
            idx[a] = grid.dims[a] - 1
    return int(idx[0]), int(idx[1]), int(idx[2])


def load_raw(header_path):
    """Load a volume described by a JSON header plus a raw float32 payload.

    Header keys: dims [3 ints], spacing [3 floats], origin [3 floats],
    dtype ("f32"), data (payload path relative to the header).
    """
    if not os.path.isfile(header_path):
        raise MissingFileError("header file not found: %s" % header_path)
    with open(header_path, "r") as fh:
        try:
            header = json.load(fh)
        except json.JSONDecodeError as exc:
            raise VoxelImageError("malformed header %s: %s" % (header_path, exc)) from exc
    for key in ("dims", "spacing", "origin", "dtype", "data"):
        if key not in header:
            raise VoxelImageError("header %s missing key %r" % (header_path, key))
    if header["dtype"] != "f32":
        raise VoxelImageError("unsupported dtype %r (only f32)" % header["dtype"])
    payload_path = os.path.join(os.path.dirname(os.path.abspath(header_path)), header["data"])
    if not os.path.isfile(payload_path):
        raise MissingFileError("payload file not found: %s" % payload_path)
    dims = header["dims"]
    expected = int(dims[0]) * int(dims[1]) * int(dims[2])
    raw = np.fromfile(payload_path, dtype="<f4")
    if raw.size != expected:
        raise PayloadMismatchError(
            "payload %s holds %d values, header dims %r require %d"
            % (payload_path, raw.size, dims, expected)
        )
    return VoxelGrid(dims, header["origin"], header["spacing"], raw)


def save_raw(grid, header_path, payload_path=None):
    """Write a grid as JSON header + little-endian float32 payload."""
    if payload_path is None:
        base, _ = os.path.splitext(header_path)
        payload_path = base + ".raw"
    header = {
        "dims": list(grid.dims),
        "spacing": [float(v) for v in grid.spacing],
        "origin": [float(v) for v in grid.origin],
        "dtype": "f32",
        "data": os.path.basename(payload_path),
    }
    grid.data.astype("<f4").tofile(payload_path)
    with open(header_path, "w") as fh:
        json.dump(header, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return header_path, payload_path


_DEFAULT_DOMAINS = {
    "two_balls": ((-2.5, -1.5, -1.5), (2.5, 1.5, 1.5)),
    "one_ball": ((-1.2, -0.8, -0.8), (1.2, 0.8, 0.8)),
    "ball": ((-1.5, -1.5, -1.5), (1.5, 1.5, 1.5)),
    "torus": ((-2.0, -2.0, -1.0), (2.0, 2.0, 1.0)),
}


def make_phantom(kind, dims, domain=None, **params):
    """Build a binary test volume: 0 inside the object(s), 1 outside.

    Kinds:
      two_balls               -- two balls of radius 0.8 at (+-1.2, 0, 0)
      one_ball [radius]       -- ball at the origin, default radius 0.6
      ball [center, radius]   -- ball anywhere
      torus [ring_radius, tube_radius] -- (sqrt(x^2+y^2)-R)^2 + z^2 <= r^2

    Intensities are evaluated at voxel centers.  `domain` is the
    ((xmin,ymin,zmin), (xmax,ymax,zmax)) box; each kind has a default.
    """
    dims = tuple(int(n) for n in dims)
    if any(n < 2 for n in dims):
        raise VoxelImageError("phantom dims must be >= 2 per axis, got %r" % (dims,))
    if kind not in _DEFAULT_DOMAINS:
        raise VoxelImageError("unknown phantom kind %r" % (kind,))
    if domain is None:
        domain = _DEFAULT_DOMAINS[kind]
    lo = np.asarray(domain[0], dtype=np.float64)
    hi = np.asarray(domain[1], dtype=np.float64)
    if np.any(hi <= lo):
        raise VoxelImageError("degenerate phantom domain %r" % (domain,))
    spacing = (hi - lo) / np.asarray(dims)

    xs = lo[0] + (np.arange(dims[0]) + 0.5) * spacing[0]
    ys = lo[1] + (np.arange(dims[1]) + 0.5) * spacing[1]
    zs = lo[2] + (np.arange(dims[2]) + 0.5) * spacing[2]
    # broadcast to (Nz, Ny, Nx) so that ravel() is x-fastest
    x = xs[None, None, :]
    y = ys[None, :, None]
    z = zs[:, None, None]

    if kind == "two_balls":
        r2 = 0.8 ** 2
        inside = ((x - 1.2) ** 2 + y ** 2 + z ** 2 <= r2) | (
            (x + 1.2) ** 2 + y ** 2 + z ** 2 <= r2
        )
    elif kind == "one_ball":
        r = float(params.get("radius", 0.6))
        if r <= 0:
            raise VoxelImageError("ball radius must be positive")
        inside = x ** 2 + y ** 2 + z ** 2 <= r ** 2
    elif kind == "ball":
        c = np.asarray(params.get("center", (0.0, 0.0, 0.0)), dtype=np.float64)
        r = float(params.get("radius", 0.8))
        if r <= 0:
            raise VoxelImageError("ball radius must be positive")
        inside = (x - c[0]) ** 2 + (y - c[1]) ** 2 + (z - c[2]) ** 2 <= r ** 2
    else:  # torus
        big = float(params.get("ring_radius", 1.2))
        tube = float(params.get("tube_radius", 0.4))
        if big <= 0 or tube <= 0:
            raise VoxelImageError("torus radii must be positive")
        inside = (np.sqrt(x ** 2 + y ** 2) - big) ** 2 + z ** 2 <= tube ** 2

    values = np.where(np.broadcast_to(inside, (dims[2], dims[1], dims[0])), 0.0, 1.0)
    return VoxelGrid(dims, lo, spacing, values.ravel())
