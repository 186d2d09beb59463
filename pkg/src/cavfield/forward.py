"""Damped Newton solver for the semilinear Neumann state equation.

The discrete residual is the exact gradient of a convex energy (quadratic
stiffness part plus quartic reaction part minus the load), so Newton steps
with Armijo backtracking on that energy converge globally.  A tiny diagonal
shift keeps the Jacobian definite near the flat start.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from . import fem
from .errors import DisconnectedDomainError, NoConvergenceError

BOUND_SLACK = 1e-8


@dataclass(frozen=True)
class NewtonOptions:
    tol_residual: float = 1e-11     # relative to the load norm
    max_iters: int = 60
    armijo_c: float = 1e-4
    backtrack_factor: float = 0.5
    jacobian_shift: float | None = None   # None: 1e-10 * trace(K)/n
    max_backtracks: int = 50
    cg_tol: float = 1e-12
    cg_max_iter: int = 50000

    def __post_init__(self):
        if not 0 < self.armijo_c < 0.5:
            raise ValueError("armijo_c must lie in (0, 1/2)")
        if not 0 < self.backtrack_factor < 1:
            raise ValueError("backtrack_factor must lie in (0, 1)")
        if self.jacobian_shift is not None and self.jacobian_shift < 0:
            raise ValueError("jacobian_shift must be nonnegative")


@dataclass
class StateSolution:
    """Converged nodal potential plus Newton diagnostics.

    For cavity-excluding solves, ``active_nodes``/``active_cells`` list the
    retained degrees of freedom; the potential is zero on removed nodes.
    """

    u: np.ndarray
    residual_norm: float
    newton_iters: int
    energy: float
    converged: bool
    energy_history: list = field(default_factory=list)
    active_cells: np.ndarray | None = None
    active_nodes: np.ndarray | None = None


def discrete_energy(mesh, coeff, v, delta, f, u, stiffness=None, load=None, cells=None):
    """Convex merit: half the weighted Dirichlet energy plus a quarter of the
    phase-weighted quartic, minus the load pairing."""
    u = np.asarray(u, dtype=float)
    K = fem.assemble_weighted_stiffness(mesh, coeff, v, delta, cells=cells) \
        if stiffness is None else stiffness
    F = fem.assemble_load(mesh, f, cells=cells) if load is None else load
    vbar = fem.cell_means(mesh, v, cells)
    quartic = fem.quadrature_integral(mesh, vbar, u, power=4, cells=cells)
    return float(0.5 * (u @ (K @ u)) + 0.25 * quartic - F @ u)


def _initial_guess(mesh, f, cells=None):
    area = float(np.sum(mesh.cell_areas if cells is None else mesh.cell_areas[cells]))
    weight = np.ones(mesh.num_cells if cells is None else len(cells))
    mean_f = fem.quadrature_integral(mesh, weight, f, power=1, cells=cells) / area
    return max(mean_f, 0.0) ** (1.0 / 3.0) + 1e-3


def solve_state(mesh, labels, coeff, v, delta, f, opts=None, u0=None, blocks=None):
    """Solve the fictitious-material problem for a phase field v on the whole domain."""
    if not 0 < delta <= 1:
        raise ValueError(f"fictitious conductivity must lie in (0, 1], got {delta}")
    opts = opts or NewtonOptions()
    K = fem.assemble_weighted_stiffness(mesh, coeff, v, delta, blocks=blocks)
    F = fem.assemble_load(mesh, f)
    start = np.full(mesh.num_nodes, _initial_guess(mesh, f)) if u0 is None \
        else np.asarray(u0, dtype=float)
    vbar = fem.cell_means(mesh, v)
    u, rnorm, iters, energies = _newton_core(mesh.triangles, mesh.cell_areas, vbar,
                                             K, F, opts, start)
    return StateSolution(u=u, residual_norm=rnorm, newton_iters=iters,
                         energy=energies[-1], converged=True, energy_history=energies)


def kept_cells_connected(mesh, kept):
    """True when the kept cells form a single edge-connected component."""
    kept = np.asarray(kept)
    if kept.size == 0:
        return False
    mask = np.zeros(mesh.num_cells, dtype=bool)
    mask[kept] = True
    nbrs = mesh.cell_neighbors
    seen = np.zeros(mesh.num_cells, dtype=bool)
    stack = [int(kept[0])]
    seen[kept[0]] = True
    while stack:
        t = stack.pop()
        for nb in nbrs[t]:
            if nb >= 0 and mask[nb] and not seen[nb]:
                seen[nb] = True
                stack.append(int(nb))
    return bool(seen[mask].all())


def solve_with_cavity_cells(mesh, labels, coeff, f, cavity_cells, opts=None,
                            cell_weights=None):
    """Solve the true-cavity problem by dropping the cavity-interior cells.

    Degrees of freedom not touched by any kept cell are removed (their value
    reported as zero); the hole boundary gets the natural no-flux condition.
    ``cell_weights`` (per kept cell) scales the tensor and the reaction; the
    indicator-based solvers pass the conductive node fraction there so the
    reduced problem is the exact vanishing-conductivity limit of the
    fictitious-material discretization.
    """
    opts = opts or NewtonOptions()
    cavity_cells = np.asarray(cavity_cells, dtype=np.int64)
    kept = np.setdiff1d(np.arange(mesh.num_cells), cavity_cells)
    if kept.size == 0:
        raise DisconnectedDomainError("cavity swallows the whole domain")
    if not kept_cells_connected(mesh, kept):
        raise DisconnectedDomainError("cavity splits the domain into several components")
    weights = np.ones(kept.size) if cell_weights is None \
        else np.asarray(cell_weights, dtype=float)
    if weights.shape[0] != kept.size or np.any(weights <= 0):
        raise ValueError("cell_weights must be positive, one per kept cell")
    K = fem.assemble_stiffness(mesh, coeff, weights, cells=kept)
    F = fem.assemble_load(mesh, f, cells=kept)
    active = np.unique(mesh.triangles[kept])
    start = np.zeros(mesh.num_nodes)
    start[active] = _initial_guess(mesh, f, cells=kept)

    # reduce to active nodes so the removed block cannot pollute the solve
    red = np.full(mesh.num_nodes, -1, dtype=np.int64)
    red[active] = np.arange(active.size)
    Kr = K[active][:, active].tocsr()
    Fr = F[active]
    tri_r = red[mesh.triangles[kept]]
    areas_r = mesh.cell_areas[kept]

    u_r, rnorm, iters, energies = _newton_core(tri_r, areas_r, weights, Kr, Fr, opts,
                                               start[active])
    u = np.zeros(mesh.num_nodes)
    u[active] = u_r
    return StateSolution(u=u, residual_norm=rnorm, newton_iters=iters,
                         energy=energies[-1], converged=True, energy_history=energies,
                         active_cells=kept, active_nodes=active)


def solve_reference_from_indicator(mesh, labels, coeff, f, v, opts=None):
    """Reduced hole solve matching the delta -> 0 limit of the indicator field.

    Cells without conductive nodes are dropped; the remaining cells keep the
    conductive node fraction as tensor and reaction weight.
    """
    vbar = fem.cell_means(mesh, v)
    cavity = np.flatnonzero(vbar <= 1e-12)
    kept = np.flatnonzero(vbar > 1e-12)
    return solve_with_cavity_cells(mesh, labels, coeff, f, cavity, opts=opts,
                                   cell_weights=vbar[kept])


def _newton_core(tri, areas, vbar, K, F, opts, u0):
    """Newton driver over plain cell arrays; works on full or reduced index sets."""
    n = K.shape[0]
    u = np.asarray(u0, dtype=float).copy()
    shift = opts.jacobian_shift
    if shift is None:
        shift = 1e-10 * K.diagonal().sum() / n
    shift_mat = shift * sp.identity(n, format="csr")
    fnorm = float(np.linalg.norm(F))
    scale = fnorm if fnorm > 0 else 1.0

    def midpow(w, p):
        wm = fem._midpoint_values(w[tri])
        return wm**p

    def energy(w):
        quart = float(np.sum(vbar * areas / 3.0 * midpow(w, 4).sum(axis=1)))
        return float(0.5 * (w @ (K @ w)) + 0.25 * quart - F @ w)

    def residual(w):
        return K @ w + fem._midpoint_functional(tri, areas, vbar, midpow(w, 3), n) - F

    def jacobian(w):
        um2 = midpow(w, 2)
        wgt = vbar * areas / 4.0
        blocks = np.zeros((tri.shape[0], 3, 3))
        for m, (a, b) in enumerate(fem._EDGE_PAIRS):
            s = wgt * um2[:, m]
            blocks[:, a, a] += s
            blocks[:, b, b] += s
            blocks[:, a, b] += s
            blocks[:, b, a] += s
        return fem._csr_from_blocks(tri, blocks, n)

    r = residual(u)
    rnorm = float(np.linalg.norm(r))
    energies = [energy(u)]
    for it in range(opts.max_iters):
        if rnorm <= opts.tol_residual * scale:
            return u, rnorm, it, energies
        J = K + jacobian(u) + shift_mat
        d = fem.solve_spd(J, -r, tol=opts.cg_tol, max_iter=opts.cg_max_iter)
        slope = float(r @ d)
        if slope >= 0:
            raise NoConvergenceError("Newton direction is not a descent direction",
                                     {"iters": it, "residual": rnorm, "slope": slope})
        e0 = energies[-1]
        s = 1.0
        for _ in range(opts.max_backtracks):
            trial = u + s * d
            et = energy(trial)
            if et <= e0 + opts.armijo_c * s * slope + 1e-14 * max(1.0, abs(e0)):
                break
            s *= opts.backtrack_factor
        else:
            raise NoConvergenceError("Newton line search stalled",
                                     {"iters": it, "residual": rnorm})
        u = trial
        energies.append(et)
        r = residual(u)
        rnorm = float(np.linalg.norm(r))
    if rnorm <= opts.tol_residual * scale:
        return u, rnorm, opts.max_iters, energies
    raise NoConvergenceError("Newton exhausted its iteration budget",
                             {"iters": opts.max_iters, "residual": rnorm})


def solve_cavity_reference(mesh, labels, coeff, shape, f, opts=None):
    """Reference solve with the rasterized cavity removed from the triangulation."""
    from .geometry import rasterize_cavity

    v = rasterize_cavity(mesh, labels, shape)
    return solve_reference_from_indicator(mesh, labels, coeff, f, v, opts=opts)


def check_state_bounds(mesh, coeff, sol, f, slack=BOUND_SLACK):
    """Compare a solution against the a-priori and pointwise bounds.

    The dual-norm factor in the energy bound is majorized by the quadrature
    L2 norm of the source.  Returns a report dict with measured slack.
    """
    f = np.asarray(f, dtype=float)
    cells = sol.active_cells
    nodes = sol.active_nodes if sol.active_nodes is not None \
        else np.arange(mesh.num_nodes)
    u = sol.u

    weights = np.ones(mesh.num_cells if cells is None else len(cells))
    area = float(np.sum(mesh.cell_areas if cells is None else mesh.cell_areas[cells]))
    grad_sq = _dirichlet_energy(mesh, u, cells)
    mass_sq = fem.quadrature_integral(mesh, weights, u, power=2, cells=cells)
    h1 = float(np.sqrt(grad_sq + mass_sq))
    f_l2 = float(np.sqrt(fem.quadrature_integral(mesh, weights, f, power=2, cells=cells)))
    rhs = f_l2 / coeff.lam + area ** (1.0 / 3.0) * f_l2 ** (1.0 / 3.0)

    fmax = float(f.max()) if f.size else 0.0
    upper = fmax ** (1.0 / 3.0)
    umin = float(u[nodes].min())
    umax = float(u[nodes].max())

    report = {
        "h1_bound": {"lhs": h1, "rhs": rhs, "passed": bool(h1 <= rhs + 1e-12)},
        "pointwise_lower": {"min_u": umin, "bound": 0.0,
                            "passed": bool(umin >= -slack)},
        "pointwise_upper": {"max_u": umax, "bound": upper,
                            "passed": bool(umax <= upper + slack)},
    }
    report["passed"] = all(entry["passed"] for entry in report.values()
                           if isinstance(entry, dict))
    return report


def _dirichlet_energy(mesh, u, cells=None):
    tri = mesh.triangles if cells is None else mesh.triangles[cells]
    areas = mesh.cell_areas if cells is None else mesh.cell_areas[cells]
    grads = mesh.cell_basis_gradients if cells is None else mesh.cell_basis_gradients[cells]
    gu = np.einsum("tdk,tk->td", grads, np.asarray(u)[tri])
    return float(np.sum(areas * (gu**2).sum(axis=1)))


def max_principle_violation(sol, f, mesh=None):
    """Largest overshoot of the pointwise bounds (0 when they hold)."""
    nodes = sol.active_nodes if sol.active_nodes is not None else slice(None)
    u = sol.u[nodes]
    upper = float(np.asarray(f).max()) ** (1.0 / 3.0)
    return float(max(0.0, u.max() - upper, -u.min()))
