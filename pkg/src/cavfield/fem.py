"""P1 assembly on triangle meshes and a diagonally preconditioned CG solver.

Coefficients enter elementwise through the cell mean of the nodal phase field,
so the discrete misfit functional stays differentiable in the nodal values.
Reaction-type integrals use the 3-point edge-midpoint rule (exact to degree 2);
the stiffness needs only the one-point rule since coefficients are cellwise
constant.  Matrices are scipy CSR; assembly order is fixed, so results are
bit-reproducible run to run.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .errors import NoConvergenceError, NotSpdError

# local node pairs defining the three edge midpoints of a cell
_EDGE_PAIRS = ((0, 1), (1, 2), (2, 0))


@dataclass(frozen=True)
class CoefficientField:
    """Cellwise symmetric 2x2 conductivity tensor with ellipticity bounds.

    cell_mats : (nt, 2, 2) tensor sampled at cell centroids
    lam, Lam  : lower/upper eigenvalue bounds, checked at construction
    """

    cell_mats: np.ndarray
    lam: float
    Lam: float

    def __post_init__(self):
        mats = np.asarray(self.cell_mats, dtype=float)
        object.__setattr__(self, "cell_mats", mats)
        if not np.allclose(mats[:, 0, 1], mats[:, 1, 0], rtol=0, atol=1e-14):
            raise ValueError("coefficient tensor must be symmetric")
        half_tr = 0.5 * (mats[:, 0, 0] + mats[:, 1, 1])
        disc = np.sqrt(0.25 * (mats[:, 0, 0] - mats[:, 1, 1]) ** 2 + mats[:, 0, 1] ** 2)
        lo, hi = (half_tr - disc).min(), (half_tr + disc).max()
        tol = 1e-12 * max(1.0, abs(self.Lam))
        if not (0 < self.lam <= self.Lam):
            raise ValueError(f"need 0 < lam <= Lam, got lam={self.lam}, Lam={self.Lam}")
        if lo < self.lam - tol or hi > self.Lam + tol:
            raise ValueError(
                f"coefficient eigenvalues [{lo:.6g}, {hi:.6g}] leave the declared "
                f"ellipticity interval [{self.lam}, {self.Lam}]")

    @staticmethod
    def identity(mesh):
        mats = np.broadcast_to(np.eye(2), (mesh.num_cells, 2, 2)).copy()
        return CoefficientField(mats, 1.0, 1.0)

    @staticmethod
    def constant(mesh, a11, a12, a22, lam=None, Lam=None):
        m = np.array([[a11, a12], [a12, a22]], dtype=float)
        eigs = np.linalg.eigvalsh(m)
        lam = float(eigs[0]) if lam is None else float(lam)
        Lam = float(eigs[1]) if Lam is None else float(Lam)
        mats = np.broadcast_to(m, (mesh.num_cells, 2, 2)).copy()
        return CoefficientField(mats, lam, Lam)

    @staticmethod
    def sinusoidal(mesh, amplitude=0.25):
        """Isotropic a(x) I with a = 1 + amplitude*sin(2 pi x)*sin(2 pi y)."""
        if not 0 <= amplitude < 1:
            raise ValueError("amplitude must be in [0, 1)")
        c = mesh.cell_centroids
        a = 1.0 + amplitude * np.sin(2 * np.pi * c[:, 0]) * np.sin(2 * np.pi * c[:, 1])
        mats = np.einsum("t,ij->tij", a, np.eye(2))
        return CoefficientField(mats, 1.0 - amplitude, 1.0 + amplitude)


def _trapezoid(x, lo, hi, w_lo, w_hi):
    t = np.ones_like(x)
    if w_lo > 0:
        t = np.minimum(t, np.clip((x - (lo - w_lo)) / w_lo, 0.0, 1.0))
    else:
        t = np.where(x >= lo - 1e-12, t, 0.0)
    if w_hi > 0:
        t = np.minimum(t, np.clip(((hi + w_hi) - x) / w_hi, 0.0, 1.0))
    else:
        t = np.where(x <= hi + 1e-12, t, 0.0)
    return t


def build_source(mesh, labels, value, plateau_rect, skirt=0.0):
    """Nodal source: ``value`` on the plateau, linear skirt of width ``skirt``.

    Skirts collapse on sides where the plateau touches the domain boundary.
    With plateau corners and skirt width on common grid lines, every nested
    mesh samples the same continuous profile, so the source carries identical
    mass across synthesis and reconstruction meshes.  The support must stay
    inside omega2.
    """
    if value < 0:
        raise ValueError("source value must be nonnegative")
    x0, y0, x1, y1 = plateau_rect
    dx0, dy0, dx1, dy1 = mesh.rect
    tol = 1e-12
    wx_lo = 0.0 if x0 <= dx0 + tol else skirt
    wx_hi = 0.0 if x1 >= dx1 - tol else skirt
    wy_lo = 0.0 if y0 <= dy0 + tol else skirt
    wy_hi = 0.0 if y1 >= dy1 - tol else skirt
    p = mesh.nodes
    f = float(value) * _trapezoid(p[:, 0], x0, x1, wx_lo, wx_hi) \
        * _trapezoid(p[:, 1], y0, y1, wy_lo, wy_hi)
    omega2_nodes = np.unique(mesh.triangles[labels.omega2_cells])
    mask = np.zeros(mesh.num_nodes, dtype=bool)
    mask[omega2_nodes] = True
    if np.any(f[~mask] != 0.0):
        raise ValueError("source support leaves omega2")
    return f


def validate_source(mesh, labels, f):
    f = np.asarray(f)
    if np.any(f < 0):
        raise ValueError("source field must be nonnegative")
    omega2_nodes = np.unique(mesh.triangles[labels.omega2_cells])
    mask = np.zeros(mesh.num_nodes, dtype=bool)
    mask[omega2_nodes] = True
    if np.any(f[~mask] != 0.0):
        raise ValueError("source support leaves omega2")


def stiffness_blocks(mesh, coeff):
    """(nt, 3, 3) elementwise stiffness for unit scalar weight."""
    g = mesh.cell_basis_gradients            # (nt, 2, 3)
    ag = np.einsum("tij,tjk->tik", coeff.cell_mats, g)
    return np.einsum("t,tik,tij->tkj", mesh.cell_areas, g, ag)


def _coo_indices(tri):
    rows = np.repeat(tri, 3, axis=1).ravel()
    cols = np.tile(tri, (1, 3)).ravel()
    return rows, cols


def _csr_from_blocks(tri, blocks, n):
    rows, cols = _coo_indices(tri)
    mat = sp.coo_matrix((blocks.reshape(-1), (rows, cols)), shape=(n, n))
    return mat.tocsr()


def cell_means(mesh, v, cells=None):
    tri = mesh.triangles if cells is None else mesh.triangles[cells]
    return np.asarray(v)[tri].mean(axis=1)


def conductivity_scale(vbar, delta):
    """Fictitious-material interpolation delta + (1 - delta) * vbar."""
    return delta + (1.0 - delta) * vbar


def _cells_view(mesh, cells):
    if cells is None:
        return mesh.triangles, mesh.cell_areas
    return mesh.triangles[cells], mesh.cell_areas[cells]


def assemble_stiffness(mesh, coeff, cell_weights, blocks=None, cells=None):
    """Stiffness with explicit nonnegative cellwise weights on the tensor."""
    if blocks is None:
        blocks = stiffness_blocks(mesh, coeff)
    tri, _ = _cells_view(mesh, cells)
    if cells is not None:
        blocks = blocks[cells]
    w = np.asarray(cell_weights, dtype=float)
    return _csr_from_blocks(tri, blocks * w[:, None, None], mesh.num_nodes)


def assemble_weighted_stiffness(mesh, coeff, v, delta, blocks=None, cells=None):
    """Stiffness of the form with cellwise weight a(vbar) = delta + (1-delta) vbar.

    Symmetric positive semidefinite; with delta > 0 the nullspace is exactly
    the constants.  ``cells`` restricts assembly to a cell subset (full node
    numbering is kept).
    """
    if delta <= 0:
        raise ValueError(f"fictitious conductivity must be positive, got {delta}")
    v = np.asarray(v, dtype=float)
    if v.min() < -1e-12 or v.max() > 1 + 1e-12:
        raise ValueError("phase field must take values in [0, 1]")
    scale = conductivity_scale(cell_means(mesh, v, cells), delta)
    return assemble_stiffness(mesh, coeff, scale, blocks=blocks, cells=cells)


def _midpoint_values(tri_vals):
    """(nc, 3) values at the three edge midpoints from (nc, 3) nodal values."""
    out = np.empty_like(tri_vals)
    for m, (a, b) in enumerate(_EDGE_PAIRS):
        out[:, m] = 0.5 * (tri_vals[:, a] + tri_vals[:, b])
    return out


def _midpoint_functional(tri, areas, cell_weight, gmid, n):
    """Vector F_i = sum_T w_T (area_T/3) sum_m g(m) phi_i(m) via edge midpoints."""
    w = cell_weight * areas / 3.0
    local = np.empty((tri.shape[0], 3))
    # node k touches the midpoints of its two incident edges with phi = 1/2
    local[:, 0] = 0.5 * (gmid[:, 0] + gmid[:, 2])
    local[:, 1] = 0.5 * (gmid[:, 0] + gmid[:, 1])
    local[:, 2] = 0.5 * (gmid[:, 1] + gmid[:, 2])
    local *= w[:, None]
    return np.bincount(tri.ravel(), weights=local.ravel(), minlength=n)


def assemble_reaction_residual(mesh, v, u, cells=None):
    """Vector of the cubic reaction pairing with cell-mean phase weight."""
    u = np.asarray(u, dtype=float)
    if u.shape[0] != mesh.num_nodes:
        raise ValueError("state vector does not match the mesh")
    tri, areas = _cells_view(mesh, cells)
    vbar = cell_means(mesh, v, cells)
    um = _midpoint_values(u[tri])
    return _midpoint_functional(tri, areas, vbar, um**3, mesh.num_nodes)


def assemble_load(mesh, f, cells=None):
    """Load vector with the same quadrature as the reaction terms."""
    f = np.asarray(f, dtype=float)
    tri, areas = _cells_view(mesh, cells)
    fm = _midpoint_values(f[tri])
    return _midpoint_functional(tri, areas, np.ones(tri.shape[0]), fm, mesh.num_nodes)


def assemble_reaction_jacobian(mesh, v, u, cells=None):
    """Derivative of the reaction residual; positive semidefinite."""
    u = np.asarray(u, dtype=float)
    tri, areas = _cells_view(mesh, cells)
    vbar = cell_means(mesh, v, cells)
    um2 = _midpoint_values(u[tri]) ** 2
    w = vbar * areas / 4.0      # area * u(m)^2 * phi_i phi_j with phi = 1/2
    blocks = np.zeros((tri.shape[0], 3, 3))
    for m, (a, b) in enumerate(_EDGE_PAIRS):
        s = w * um2[:, m]
        blocks[:, a, a] += s
        blocks[:, b, b] += s
        blocks[:, a, b] += s
        blocks[:, b, a] += s
    return _csr_from_blocks(tri, blocks, mesh.num_nodes)


def assemble_mass(mesh):
    """Consistent P1 mass matrix (edge-midpoint rule is exact for it)."""
    blocks = np.empty((mesh.num_cells, 3, 3))
    blocks[:] = np.array([[2, 1, 1], [1, 2, 1], [1, 1, 2]]) / 12.0
    blocks *= mesh.cell_areas[:, None, None]
    return _csr_from_blocks(mesh.triangles, blocks, mesh.num_nodes)


def lumped_mass(mesh):
    """Diagonal (row-sum) mass vector: one third of the incident cell areas."""
    w = np.repeat(mesh.cell_areas / 3.0, 3)
    return np.bincount(mesh.triangles.ravel(), weights=w, minlength=mesh.num_nodes)


def quadrature_integral(mesh, cell_weight, u, power=1, cells=None):
    """Edge-midpoint quadrature of w(x) * u(x)^power with cellwise weight."""
    tri, areas = _cells_view(mesh, cells)
    um = _midpoint_values(np.asarray(u, dtype=float)[tri])
    return float(np.sum(cell_weight * areas / 3.0 * (um**power).sum(axis=1)))


def assemble_sigma_mass(mesh, labels):
    """1-D consistent mass on the sigma edges, zero elsewhere."""
    n = mesh.num_nodes
    if labels.sigma_edges.size == 0:
        return sp.csr_matrix((n, n))
    rows, cols, vals = [], [], []
    for e in labels.sigma_edges:
        a, b = (int(x) for x in mesh.boundary_edges[e])
        length = float(np.linalg.norm(mesh.nodes[a] - mesh.nodes[b]))
        rows += [a, a, b, b]
        cols += [a, b, a, b]
        vals += [length / 3.0, length / 6.0, length / 6.0, length / 3.0]
    return sp.coo_matrix((vals, (rows, cols)), shape=(n, n)).tocsr()


def sigma_l2_norm(sigma_mass, d):
    """L2(<sigma>) norm of a nodal field supported on the arc."""
    return float(np.sqrt(max(d @ (sigma_mass @ d), 0.0)))


def solve_spd(mat, rhs, tol=1e-12, max_iter=20000, x0=None):
    """Conjugate gradients with diagonal (Jacobi) preconditioning.

    Returns x with ||A x - b|| <= tol * ||b||.  Raises NotSpdError when a
    direction of nonpositive curvature shows up, NoConvergenceError when the
    iteration budget runs out.
    """
    rhs = np.asarray(rhs, dtype=float)
    n = rhs.shape[0]
    bnorm = float(np.linalg.norm(rhs))
    if bnorm == 0.0:
        return np.zeros(n)
    diag = np.asarray(mat.diagonal(), dtype=float)
    if np.any(diag <= 0):
        raise NotSpdError("matrix has a nonpositive diagonal entry")
    x = np.zeros(n) if x0 is None else np.asarray(x0, dtype=float).copy()
    r = rhs - mat @ x
    if np.linalg.norm(r) <= tol * bnorm:
        return x
    z = r / diag
    p = z.copy()
    rz = float(r @ z)
    for _ in range(max_iter):
        ap = mat @ p
        pap = float(p @ ap)
        if pap <= 0.0:
            raise NotSpdError(f"nonpositive curvature p^T A p = {pap:.3g}")
        alpha = rz / pap
        x += alpha * p
        r -= alpha * ap
        if np.linalg.norm(r) <= tol * bnorm:
            return x
        z = r / diag
        rz_new = float(r @ z)
        p = z + (rz_new / rz) * p
        rz = rz_new
    raise NoConvergenceError(
        "conjugate gradients exhausted the iteration budget",
        {"residual": float(np.linalg.norm(r) / bnorm), "max_iter": max_iter})


def export_matrix_market(path, mat):
    from scipy.io import mmwrite

    mmwrite(str(path), sp.coo_matrix(mat))
