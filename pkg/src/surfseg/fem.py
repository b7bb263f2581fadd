"""Mass-lumped finite element step for the surface evolution.

Each time step solves, on the current triangulation, the coupled system

    (1/tau) <dX, chi w>  - sigma <kappa, chi>  = <F, chi>     (normal motion)
    <kappa w, eta>       + <grad X+dX, grad eta> = 0          (curvature relation)

with piecewise-linear elements and vertex-lumped products.  Lumping makes
the mass matrix diagonal (vertex star area / 3) and the normal-coupling
matrix a diagonal of 3-vectors (lumped mass times the area-weighted
vertex normal), so eliminating kappa leaves one symmetric positive
definite system for the displacement:

    ( (1/(sigma tau)) N M^-1 N^T + A ) dX = -A X + (1/sigma) N M^-1 b

The solver is conjugate gradients with a per-vertex 3x3 block-Jacobi
preconditioner; small systems can use a dense direct path, which the
tests treat as the oracle.
"""

from dataclasses import dataclass

import numpy as np
from scipy import io as spio
from scipy.sparse import coo_matrix, csr_matrix


class AssemblyError(Exception):
    pass


class NumericalError(Exception):
    pass


class StagnationError(NumericalError):
    pass


@dataclass
class TimeStepControl:
    """Bounds for the per-step normal displacement and the retry factor."""

    dxn_min: float
    dxn_max: float
    lam_t: int = 10
    tau_min: float = 0.0
    tau_max: float = np.inf
    max_retries: int = 60

    def __post_init__(self):
        if not (0 < self.dxn_min < self.dxn_max):
            raise ValueError("need 0 < dxn_min < dxn_max")
        if int(self.lam_t) < 2:
            raise ValueError("lam_t must be an integer >= 2")
        self.lam_t = int(self.lam_t)

    @classmethod
    def with_tau_bounds(cls, dxn_min, dxn_max, lam_t, tau0):
        """Paper-style control with tau clamped to [1e-9, 1e3] * tau0."""
        return cls(dxn_min, dxn_max, lam_t, tau_min=1e-9 * tau0, tau_max=1e3 * tau0)


@dataclass
class SolveInfo:
    method: str
    iterations: int
    residual: float


@dataclass
class StepSystem:
    """Assembled matrices of one step, concatenated over all surfaces."""

    m_diag: np.ndarray          # (N,) lumped masses |star|/3
    omega: np.ndarray           # (N, 3) weighted vertex normals
    stiffness: csr_matrix      # (N, N) scalar stiffness, applied per coordinate
    load: np.ndarray            # (N,) nodal force values F
    sigma: float
    tau: float
    offsets: np.ndarray         # per-surface start offsets, len n_surfaces+1

    @property
    def n_vertices(self):
        return len(self.m_diag)

    @property
    def n_blocks(self):
        """Diagonal of the normal-coupling matrix: lumped mass times normal."""
        return self.m_diag[:, None] * self.omega

    @property
    def load_vector(self):
        """b with lumped products: b_k = M_kk F_k."""
        return self.m_diag * self.load

    def with_tau(self, tau):
        return StepSystem(self.m_diag, self.omega, self.stiffness, self.load,
                          self.sigma, float(tau), self.offsets)


def _face_stiffness_coo(vertices, faces, areas):
    """P1 stiffness entries: K_ab = (e_a . e_b) / (4 area), e_a opposite a."""
    q = vertices[faces]
    e = np.stack([q[:, 2] - q[:, 1], q[:, 0] - q[:, 2], q[:, 1] - q[:, 0]], axis=1)
    rows, cols, vals = [], [], []
    for a in range(3):
        for b in range(3):
            rows.append(faces[:, a])
            cols.append(faces[:, b])
            vals.append(np.einsum("fi,fi->f", e[:, a], e[:, b]) / (4.0 * areas))
    return np.concatenate(rows), np.concatenate(cols), np.concatenate(vals)


def assemble(surfaces, force, sigma, tau):
    """Build the step system for all surfaces at once.

    `force` is one per-vertex array per surface (zeros allowed).  Raises
    AssemblyError when a face is degenerate or the weighted normals of a
    surface do not span 3D space (uniqueness would be lost).
    """
    if sigma <= 0 or tau <= 0:
        raise AssemblyError("sigma and tau must be positive")
    offsets = surfaces.vertex_offsets()
    n = int(offsets[-1])
    m_diag = np.zeros(n)
    omega = np.zeros((n, 3))
    load = np.zeros(n)
    rows_all, cols_all, vals_all = [], [], []
    for i, mesh in enumerate(surfaces.meshes):
        areas, normals = mesh.face_areas_normals()
        if np.any(areas <= mesh.degenerate_area_threshold()):
            raise AssemblyError(
                "surface %d violates the positive-area assumption" % mesh.surface_id
            )
        off = offsets[i]
        star = np.zeros(mesh.n_vertices)
        acc = np.zeros((mesh.n_vertices, 3))
        for k in range(3):
            np.add.at(star, mesh.faces[:, k], areas)
            np.add.at(acc, mesh.faces[:, k], areas[:, None] * normals)
        if np.any(star <= 0.0):
            raise AssemblyError("surface %d has isolated vertices" % mesh.surface_id)
        w = acc / star[:, None]
        sv = np.linalg.svd(w, compute_uv=False)
        if sv[2] <= 1e-8 * sv[0]:
            raise AssemblyError(
                "surface %d weighted normals do not span 3D space" % mesh.surface_id
            )
        m_diag[off:off + mesh.n_vertices] = star / 3.0
        omega[off:off + mesh.n_vertices] = w
        load[off:off + mesh.n_vertices] = np.asarray(force[i], dtype=np.float64)
        r, c, v = _face_stiffness_coo(mesh.vertices, mesh.faces, areas)
        rows_all.append(r + off)
        cols_all.append(c + off)
        vals_all.append(v)
    stiffness = coo_matrix(
        (np.concatenate(vals_all), (np.concatenate(rows_all), np.concatenate(cols_all))),
        shape=(n, n),
    ).tocsr()
    stiffness.sum_duplicates()
    return StepSystem(m_diag, omega, stiffness, load, float(sigma), float(tau), offsets)


def schur_matrix(system):
    """Explicit CSR of the displacement system (vertex-major 3N ordering)."""
    n = system.n_vertices
    a = system.stiffness.tocoo()
    coef = system.m_diag / (system.sigma * system.tau)
    rows = [3 * a.row, 3 * a.row + 1, 3 * a.row + 2]
    cols = [3 * a.col, 3 * a.col + 1, 3 * a.col + 2]
    vals = [a.data, a.data, a.data]
    v = np.arange(n)
    for c in range(3):
        for d in range(3):
            rows.append(3 * v + c)
            cols.append(3 * v + d)
            vals.append(coef * system.omega[:, c] * system.omega[:, d])
    mat = coo_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(3 * n, 3 * n),
    ).tocsr()
    mat.sum_duplicates()
    return mat


def dump_schur(system, path):
    """MatrixMarket dump of the step matrix for external verification."""
    spio.mmwrite(path, schur_matrix(system))


def _rhs(system, positions):
    mf = system.m_diag * system.load
    return -(system.stiffness @ positions) + (mf / system.sigma)[:, None] * system.omega


def _kappa(system, delta):
    wd = np.einsum("ij,ij->i", system.omega, delta)
    return (wd / system.tau - system.load) / system.sigma


def _solve_cg(system, rhs, rtol):
    coef = system.m_diag / (system.sigma * system.tau)
    a = system.stiffness
    omega = system.omega
    d = np.asarray(a.diagonal())
    if np.any(d <= 0.0):
        raise NumericalError("stiffness diagonal not positive; degenerate mesh")
    # inverse of the per-vertex block d*I + coef*w w^T (Sherman-Morrison)
    w2 = np.einsum("ij,ij->i", omega, omega)
    sm = coef / (d * (d + coef * w2))

    def matvec(x):
        return a @ x + (coef * np.einsum("ij,ij->i", omega, x))[:, None] * omega

    def precond(r):
        return r / d[:, None] - (sm * np.einsum("ij,ij->i", omega, r))[:, None] * omega

    norm_rhs = np.linalg.norm(rhs)
    if norm_rhs == 0.0:
        return np.zeros_like(rhs), SolveInfo("cg", 0, 0.0)
    x = np.zeros_like(rhs)
    r = rhs.copy()
    z = precond(r)
    p = z.copy()
    rz = float(np.sum(r * z))
    max_iter = 10 * 3 * system.n_vertices
    tol = rtol * norm_rhs
    for it in range(1, max_iter + 1):
        q = matvec(p)
        pq = float(np.sum(p * q))
        if pq <= 0.0:
            raise NumericalError(
                "matrix is not positive definite (p.Sp = %.3g); "
                "weighted normals may not span 3D space" % pq
            )
        alpha = rz / pq
        x += alpha * p
        r -= alpha * q
        res = float(np.linalg.norm(r))
        if res <= tol:
            return x, SolveInfo("cg", it, res)
        z = precond(r)
        rz_new = float(np.sum(r * z))
        p = z + (rz_new / rz) * p
        rz = rz_new
    raise NumericalError(
        "conjugate gradients failed to reach %.1e (residual %.3e after %d iterations)"
        % (rtol, res, max_iter)
    )


def _solve_dense(system, rhs):
    mat = schur_matrix(system).toarray()
    flat = np.linalg.solve(mat, rhs.reshape(-1))
    res = float(np.linalg.norm(mat @ flat - rhs.reshape(-1)))
    return flat.reshape(-1, 3), SolveInfo("dense", 1, res)


def solve_step(system, positions, method="auto", rtol=1e-10):
    """Solve one step: displacement of every vertex plus the discrete curvature.

    positions is the (N, 3) concatenation of current vertex coordinates in
    surface order.  Returns (delta, kappa, info); the residual of the
    displacement system is below rtol times the right-hand side norm.
    """
    positions = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
    if len(positions) != system.n_vertices:
        raise ValueError("positions do not match the assembled system")
    rhs = _rhs(system, positions)
    if method == "auto":
        method = "dense" if system.n_vertices < 500 else "cg"
    if method == "dense":
        delta, info = _solve_dense(system, rhs)
    elif method == "cg":
        delta, info = _solve_cg(system, rhs, rtol)
    else:
        raise ValueError("unknown method %r" % (method,))
    return delta, _kappa(system, delta), info


def normal_displacement(delta, omega):
    """Controller metric: max over vertices of |dX . w|."""
    return float(np.abs(np.einsum("ij,ij->i", omega, delta)).max())


def solve_step_with_control(solve_at, tau0, control):
    """Adaptive time-step loop around a solver callable.

    solve_at(tau) must return (delta, kappa, dxn) where dxn is the maximum
    normal displacement of that trial.  The step size is divided by lam_t
    while dxn exceeds dxn_max, multiplied by lam_t while it falls short of
    dxn_min, and the first tau landing inside the window is accepted.  A
    tau at the upper bound is accepted even when slow; dropping below the
    lower bound without acceptance raises StagnationError.

    Returns (delta, kappa, tau_used, n_solves).
    """
    tau = float(tau0)
    attempts = []  # (tau, delta, kappa, dxn)
    for n_solves in range(1, control.max_retries + 1):
        delta, kappa, dxn = solve_at(tau)
        attempts.append((tau, delta, kappa, dxn))
        if dxn > control.dxn_max:
            if tau <= control.tau_min:
                raise StagnationError(
                    "dxn %.3g still above %.3g at the minimum step size %.3g"
                    % (dxn, control.dxn_max, tau)
                )
            tau = max(tau / control.lam_t, control.tau_min)
        elif dxn < control.dxn_min:
            if tau >= control.tau_max:
                return delta, kappa, tau, n_solves
            tau = min(tau * control.lam_t, control.tau_max)
        else:
            return delta, kappa, tau, n_solves
    # retry budget exhausted (window narrower than the lam_t grid):
    # fall back to the fastest safe trial
    safe = [t for t in attempts if t[3] <= control.dxn_max]
    if not safe:
        raise StagnationError("no trial satisfied dxn <= %.3g" % control.dxn_max)
    tau, delta, kappa, _ = max(safe, key=lambda t: t[0])
    return delta, kappa, tau, control.max_retries


def apply_displacement(surfaces, delta):
    """New vertex positions per surface from the concatenated displacement."""
    offsets = surfaces.vertex_offsets()
    for i, mesh in enumerate(surfaces.meshes):
        mesh.vertices = mesh.vertices + delta[offsets[i]:offsets[i + 1]]
    return surfaces
