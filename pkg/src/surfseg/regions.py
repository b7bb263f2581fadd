"""Voxel-to-region labeling, region means and the nodal image force.

Every voxel is assigned to the region containing its center.  Labels are
computed by counting oriented surface crossings along voxel-center rows
parallel to the x axis: walking inward from outside the domain, each
crossing moves between the two region labels carried by the surface.
When all surfaces separate the same two regions, the enclosure depth
decides (union of interiors, tolerant of the transient overlaps that
precede a merge); mixed region pairs take a strict per-row walk that
validates every crossing against the declared topology.  Re-labeling
after a small surface motion only re-tests a voxel band around the
surfaces and adjusts the per-region counts and intensity sums in place.
"""

import logging

import numpy as np
from scipy import ndimage

logger = logging.getLogger(__name__)


class RegionError(Exception):
    pass


class RegionTopologyError(RegionError):
    """A row of crossings contradicts the surface orientation data."""


class EmptyRegionError(RegionError):
    pass


class RegionState:
    """Per-voxel labels plus running count/sum/mean per region."""

    def __init__(self, labels, n_regions, counts, sums, sums_sq, exterior_region,
                 full_rebuild=False):
        self.labels = labels  # uint16, flat x-fastest, values 1..n_regions
        self.n_regions = int(n_regions)
        self.counts = counts  # int64, index 0 unused
        self.sums = sums  # float64
        self.sums_sq = sums_sq
        self.exterior_region = int(exterior_region)
        self.full_rebuild = bool(full_rebuild)

    def mean(self, k):
        if self.counts[k] == 0:
            raise EmptyRegionError("region %d holds no voxels" % k)
        return self.sums[k] / self.counts[k]

    def means(self):
        if np.any(self.counts[1:] == 0):
            empty = [int(k) for k in range(1, self.n_regions + 1) if self.counts[k] == 0]
            raise EmptyRegionError("regions %r hold no voxels" % empty)
        out = np.zeros(self.n_regions + 1)
        out[1:] = self.sums[1:] / self.counts[1:]
        return out

    def copy(self):
        return RegionState(
            self.labels.copy(), self.n_regions, self.counts.copy(), self.sums.copy(),
            self.sums_sq.copy(), self.exterior_region, self.full_rebuild,
        )


# ---------------------------------------------------------------------------
# oriented crossings of voxel-center rows


def _row_crossings(grid, surfaces):
    """All oriented intersections of x-rows with the surface triangles.

    Returns (row, x, mesh_index, positive) arrays, one entry per crossing;
    row = iy + Ny*iz, `positive` is True when the face normal has a
    positive x component.  Triangles whose projection on the (y, z) plane
    is degenerate are invisible to x-rows and contribute nothing.  A
    boundary point of the projected triangle is counted by exactly one of
    the two adjacent triangles (top-left fill rule), so crossing parity
    stays watertight for closed meshes.
    """
    nx, ny, nz = grid.dims
    oy, oz = grid.origin[1], grid.origin[2]
    dy, dz = grid.spacing[1], grid.spacing[2]

    rows_all, xs_all, mesh_all, pos_all = [], [], [], []
    for mi, mesh in enumerate(surfaces.meshes):
        q = mesh.vertices[mesh.faces]
        n = np.cross(q[:, 1] - q[:, 0], q[:, 2] - q[:, 0])
        nx_comp = n[:, 0]
        keep = nx_comp != 0.0
        if not np.any(keep):
            continue
        q = q[keep]
        n = n[keep]
        nx_comp = nx_comp[keep]

        # normalize projected winding to CCW in (y, z)
        a = q[:, 0, 1:]
        b = np.where(nx_comp[:, None] > 0, q[:, 1, 1:], q[:, 2, 1:])
        c = np.where(nx_comp[:, None] > 0, q[:, 2, 1:], q[:, 1, 1:])

        ymin = np.minimum(np.minimum(a[:, 0], b[:, 0]), c[:, 0])
        ymax = np.maximum(np.maximum(a[:, 0], b[:, 0]), c[:, 0])
        zmin = np.minimum(np.minimum(a[:, 1], b[:, 1]), c[:, 1])
        zmax = np.maximum(np.maximum(a[:, 1], b[:, 1]), c[:, 1])
        iy0 = np.maximum(np.ceil((ymin - oy) / dy - 0.5).astype(np.int64), 0)
        iy1 = np.minimum(np.floor((ymax - oy) / dy - 0.5).astype(np.int64), ny - 1)
        iz0 = np.maximum(np.ceil((zmin - oz) / dz - 0.5).astype(np.int64), 0)
        iz1 = np.minimum(np.floor((zmax - oz) / dz - 0.5).astype(np.int64), nz - 1)
        cy = np.maximum(iy1 - iy0 + 1, 0)
        cz = np.maximum(iz1 - iz0 + 1, 0)
        total = cy * cz
        if total.sum() == 0:
            continue
        tri = np.repeat(np.arange(len(q)), total)
        offsets = np.concatenate(([0], np.cumsum(total)))
        k = np.arange(total.sum()) - offsets[tri]
        iy = iy0[tri] + k % cy[tri]
        iz = iz0[tri] + k // cy[tri]
        py = oy + (iy + 0.5) * dy
        pz = oz + (iz + 0.5) * dz

        at, bt, ct = a[tri], b[tri], c[tri]
        inside = np.ones(len(tri), dtype=bool)
        for u, v in ((at, bt), (bt, ct), (ct, at)):
            e = (v[:, 0] - u[:, 0]) * (pz - u[:, 1]) - (v[:, 1] - u[:, 1]) * (py - u[:, 0])
            top_left = (v[:, 1] > u[:, 1]) | ((v[:, 1] == u[:, 1]) & (v[:, 0] < u[:, 0]))
            inside &= (e > 0) | ((e == 0) & top_left)
        if not np.any(inside):
            continue
        tri = tri[inside]
        iy, iz, py, pz = iy[inside], iz[inside], py[inside], pz[inside]
        nf = n[tri]
        q0 = q[tri, 0]
        x = q0[:, 0] - (nf[:, 1] * (py - q0[:, 1]) + nf[:, 2] * (pz - q0[:, 2])) / nf[:, 0]
        # near-silhouette triangles divide by a tiny n_x; keep x inside the face
        x = np.clip(x, q[tri, :, 0].min(axis=1), q[tri, :, 0].max(axis=1))

        rows_all.append(iy + ny * iz)
        xs_all.append(x)
        mesh_all.append(np.full(len(tri), mi, dtype=np.int64))
        pos_all.append(nx_comp[tri] > 0)

    if not rows_all:
        empty = np.empty(0, dtype=np.int64)
        return empty, np.empty(0), empty, np.empty(0, dtype=bool)
    return (
        np.concatenate(rows_all),
        np.concatenate(xs_all),
        np.concatenate(mesh_all),
        np.concatenate(pos_all),
    )


def _exterior_from_crossings(surfaces, rows, mesh_idx, positive, order):
    """Region on the +x side of each row's outermost crossing; must agree."""
    if len(rows) == 0:
        raise RegionTopologyError("no surface crossings found inside the image domain")
    sorted_rows = rows[order]
    last_of_row = np.flatnonzero(np.concatenate((sorted_rows[1:] != sorted_rows[:-1], [True])))
    outer = order[last_of_row]
    kp = np.array([surfaces.region_topology[m][0] for m in range(surfaces.n_surfaces)])
    km = np.array([surfaces.region_topology[m][1] for m in range(surfaces.n_surfaces)])
    ext = np.where(positive[outer], kp[mesh_idx[outer]], km[mesh_idx[outer]])
    first = int(ext[0])
    if np.any(ext != first):
        raise RegionTopologyError("rows disagree on the exterior region label")
    return first


def _label_rows_depth(grid, rows, xs, positive, order, exterior, interior, row_ids, labels):
    """Two-label fast path: enclosure depth above the voxel center.

    Walking from outside the domain along -x, a crossing against the
    normal enters an interior and one along it leaves; the running depth
    is therefore the number of surfaces enclosing the point.  Depth >= 1
    labels interior.  Surfaces sharing one (k+, k-) pair may overlap or
    nest (union-of-interiors semantics), which happens transiently right
    before a merge; a negative depth means broken orientation.
    """
    nx, ny, _ = grid.dims
    width = nx + 2.0
    ux = (xs - grid.origin[0]) / grid.spacing[0]
    keys = rows * width + np.clip(ux, -0.5, nx + 0.5)
    keys_sorted = keys[order]
    # crossing with n_x > 0 is an exit when walking toward +infinity
    step = np.where(positive[order], 1, -1)
    prefix = np.concatenate(([0], np.cumsum(step)))

    row_end = np.searchsorted(keys_sorted, (row_ids + 1) * width)
    row_start = np.searchsorted(keys_sorted, row_ids * width)
    per_row = prefix[row_end] - prefix[row_start]
    if np.any(per_row != 0):
        raise RegionTopologyError(
            "unbalanced crossings on %d rows; surfaces are not closed/consistent"
            % int(np.sum(per_row != 0))
        )

    centers = np.arange(nx) + 0.5
    vox_keys = (row_ids[:, None] * width + centers[None, :]).ravel()
    pos = np.searchsorted(keys_sorted, vox_keys)
    depth = prefix[np.repeat(row_end, nx)] - prefix[pos]
    if np.any(depth < 0):
        raise RegionTopologyError("negative enclosure depth; surface orientation is broken")
    out = np.where(depth >= 1, np.uint16(interior), np.uint16(exterior))

    # row r covers flat indices [r*nx, (r+1)*nx) in x-fastest layout
    flat = np.repeat(row_ids * nx, nx) + np.tile(np.arange(nx), len(row_ids))
    labels[flat] = out
    return flat


def _label_rows_walk(grid, surfaces, rows, xs, mesh_idx, positive, exterior, row_ids, labels):
    """General multiphase path: walk each row from outside, checking consistency."""
    nx, ny, _ = grid.dims
    order = np.lexsort((-xs, rows))
    rows_s, xs_s, mesh_s, pos_s = rows[order], xs[order], mesh_idx[order], positive[order]
    starts = np.searchsorted(rows_s, row_ids, side="left")
    ends = np.searchsorted(rows_s, row_ids, side="right")
    centers = grid.origin[0] + (np.arange(nx) + 0.5) * grid.spacing[0]
    topo = surfaces.region_topology
    touched = []
    for r, s, e in zip(row_ids, starts, ends):
        flat = r * nx + np.arange(nx)
        touched.append(flat)
        cur = exterior
        hi = nx  # voxels with index < hi still unlabeled
        for j in range(s, e):
            kp, km = topo[mesh_s[j]]
            if pos_s[j]:
                expected, nxt = kp, km
            else:
                expected, nxt = km, kp
            if cur != expected:
                raise RegionTopologyError(
                    "row %d: crossing of surface %d expects region %d but walk is in %d"
                    % (r, surfaces.meshes[mesh_s[j]].surface_id, expected, cur)
                )
            lo = np.searchsorted(centers, xs_s[j], side="right")
            labels[flat[lo:hi]] = cur
            hi = lo
            cur = nxt
        if cur != exterior:
            raise RegionTopologyError("row %d does not return to the exterior region" % r)
        labels[flat[0:hi]] = cur
    return np.concatenate(touched) if touched else np.empty(0, dtype=np.int64)


def _uniform_topology(surfaces):
    pairs = set(surfaces.region_topology)
    return len(pairs) == 1


def _tally(grid, labels, n_regions):
    counts = np.bincount(labels, minlength=n_regions + 1).astype(np.int64)
    values = grid.data.astype(np.float64)
    sums = np.bincount(labels, weights=values, minlength=n_regions + 1)
    sums_sq = np.bincount(labels, weights=values * values, minlength=n_regions + 1)
    return counts, sums, sums_sq


def init_regions(grid, surfaces):
    """Label every voxel by the region containing its center.

    Surfaces must be closed, consistently oriented and non-intersecting;
    a crossing pattern contradicting the per-surface (k+, k-) data raises
    RegionTopologyError.
    """
    nx, ny, nz = grid.dims
    labels = np.zeros(nx * ny * nz, dtype=np.uint16)
    rows, xs, mesh_idx, positive = _row_crossings(grid, surfaces)
    order = np.lexsort((xs, rows))
    exterior = _exterior_from_crossings(surfaces, rows, mesh_idx, positive, order)

    all_rows = np.arange(ny * nz, dtype=np.int64)
    if _uniform_topology(surfaces):
        kp, km = surfaces.region_topology[0]
        interior = km if exterior == kp else kp
        _label_rows_depth(grid, rows, xs, positive, order, exterior, interior, all_rows, labels)
    else:
        _label_rows_walk(grid, surfaces, rows, xs, mesh_idx, positive, exterior, all_rows, labels)

    counts, sums, sums_sq = _tally(grid, labels, surfaces.n_regions)
    labels.setflags(write=False)
    return RegionState(labels, surfaces.n_regions, counts, sums, sums_sq, exterior)


def _band_mask(grid, surfaces, band_width):
    """Voxels within band_width voxels of any surface triangle (bbox dilation)."""
    nx, ny, nz = grid.dims
    mask = np.zeros((nz, ny, nx), dtype=bool)
    lo = grid.origin
    sp = grid.spacing
    for mesh in surfaces.meshes:
        q = mesh.vertices[mesh.faces]
        tmin = (q.min(axis=1) - lo) / sp
        tmax = (q.max(axis=1) - lo) / sp
        i0 = np.clip(np.floor(tmin).astype(np.int64), 0, np.array(grid.dims) - 1)
        i1 = np.clip(np.floor(tmax).astype(np.int64), 0, np.array(grid.dims) - 1)
        cx = i1[:, 0] - i0[:, 0] + 1
        cy = i1[:, 1] - i0[:, 1] + 1
        cz = i1[:, 2] - i0[:, 2] + 1
        total = cx * cy * cz
        tri = np.repeat(np.arange(len(q)), total)
        offs = np.concatenate(([0], np.cumsum(total)))
        k = np.arange(int(total.sum())) - offs[tri]
        ix = i0[tri, 0] + k % cx[tri]
        rest = k // cx[tri]
        iy = i0[tri, 1] + rest % cy[tri]
        iz = i0[tri, 2] + rest // cy[tri]
        mask[iz, iy, ix] = True
    if band_width > 0:
        mask = ndimage.binary_dilation(mask, iterations=int(band_width))
    return mask.reshape(-1)


def update_regions_incremental(state, grid, surfaces, band_width=3):
    """Re-test only voxels near the surfaces and adjust counts and sums.

    Valid when the surfaces moved by less than band_width voxels since
    `state` was computed.  If a voxel outside the band is found to have
    flipped, the band was too small: the full labeling is recomputed and
    the returned state carries full_rebuild=True.
    """
    nx, ny, nz = grid.dims
    rows, xs, mesh_idx, positive = _row_crossings(grid, surfaces)
    order = np.lexsort((xs, rows))
    exterior = _exterior_from_crossings(surfaces, rows, mesh_idx, positive, order)

    band = _band_mask(grid, surfaces, band_width)
    band3 = band.reshape(nz, ny, nx)
    # collapsing x leaves (iz, iy); flat order matches row id iy + ny*iz
    row_ids = np.flatnonzero(band3.any(axis=2).reshape(nz * ny)).astype(np.int64)

    new_labels = state.labels.copy()
    if _uniform_topology(surfaces):
        kp, km = surfaces.region_topology[0]
        interior = km if exterior == kp else kp
        touched = _label_rows_depth(
            grid, rows, xs, positive, order, exterior, interior, row_ids, new_labels
        )
    else:
        touched = _label_rows_walk(
            grid, surfaces, rows, xs, mesh_idx, positive, exterior, row_ids, new_labels
        )

    old = np.asarray(state.labels)
    changed = touched[new_labels[touched] != old[touched]]
    if len(changed) and not np.all(band[changed]):
        n_out = int(np.sum(~band[changed]))
        logger.warning(
            "region band width %d too small (%d flips on band boundary); relabeling fully",
            band_width, n_out,
        )
        fresh = init_regions(grid, surfaces)
        fresh.full_rebuild = True
        return fresh

    counts = state.counts.copy()
    sums = state.sums.copy()
    sums_sq = state.sums_sq.copy()
    if len(changed):
        vals = grid.data[changed].astype(np.float64)
        old_k = old[changed].astype(np.int64)
        new_k = new_labels[changed].astype(np.int64)
        np.add.at(counts, new_k, 1)
        np.add.at(counts, old_k, -1)
        np.add.at(sums, new_k, vals)
        np.add.at(sums, old_k, -vals)
        np.add.at(sums_sq, new_k, vals * vals)
        np.add.at(sums_sq, old_k, -vals * vals)
    new_labels.setflags(write=False)
    return RegionState(new_labels, state.n_regions, counts, sums, sums_sq, exterior)


def nodal_force(grid, state, surfaces, lam):
    """Image force at every vertex, one array per surface.

    F = lam * ((u0 - c_{k+})^2 - (u0 - c_{k-})^2) with u0 read from the
    voxel containing the vertex (nearest in-domain voxel outside the box).
    Positive F pushes along the surface normal, toward region k+.
    """
    out = []
    for mesh, (kp, km) in zip(surfaces.meshes, surfaces.region_topology):
        ckp = state.mean(kp)
        ckm = state.mean(km)
        u = grid.values_at_points(mesh.vertices)
        out.append(lam * ((u - ckp) ** 2 - (u - ckm) ** 2))
    return out
