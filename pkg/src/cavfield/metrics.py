"""Scalar diagnostics: misfit, perimeter, set distances, stability studies,
and randomized certificates for the discrete operator."""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np
from scipy.spatial import cKDTree

from . import fem, forward, geometry
from .adjoint import GAMMA_DEFAULT, regularizer_energy


@dataclass(frozen=True)
class SetOnMesh:
    """Cell subset of a mesh with derived boundary polylines."""

    mesh: geometry.Mesh
    cells: np.ndarray

    def __post_init__(self):
        cells = np.unique(np.asarray(self.cells, dtype=np.int64))
        cells.flags.writeable = False
        object.__setattr__(self, "cells", cells)

    @staticmethod
    def from_indicator(mesh, v, threshold=0.5):
        """Cells whose mean indicator falls below the threshold (the recovered set)."""
        vbar = fem.cell_means(mesh, v)
        return SetOnMesh(mesh, np.flatnonzero(vbar < threshold))

    @staticmethod
    def from_shape(mesh, shape):
        """Cells whose centroid lies inside the shape."""
        if shape.is_empty():
            return SetOnMesh(mesh, np.empty(0, dtype=np.int64))
        return SetOnMesh(mesh, np.flatnonzero(shape.contains(mesh.cell_centroids)))

    @property
    def area(self):
        return float(self.mesh.cell_areas[self.cells].sum())

    def is_empty(self):
        return self.cells.size == 0

    @cached_property
    def boundary_edges(self):
        """Edges incident to exactly one member cell, as sorted node pairs."""
        counts = {}
        for tri in self.mesh.triangles[self.cells]:
            for a, b in ((tri[0], tri[1]), (tri[1], tri[2]), (tri[2], tri[0])):
                key = (int(a), int(b)) if a < b else (int(b), int(a))
                counts[key] = counts.get(key, 0) + 1
        return tuple(sorted(e for e, c in counts.items() if c == 1))

    @cached_property
    def boundary_polylines(self):
        """Closed node loops chained from the boundary edges."""
        unused = set(self.boundary_edges)
        incident = {}
        for e in unused:
            incident.setdefault(e[0], []).append(e)
            incident.setdefault(e[1], []).append(e)
        loops = []
        while unused:
            start = min(unused)
            unused.discard(start)
            loop = [start[0], start[1]]
            while loop[-1] != loop[0]:
                here = loop[-1]
                nxt = next(e for e in incident[here] if e in unused)
                unused.discard(nxt)
                loop.append(nxt[1] if nxt[0] == here else nxt[0])
            loops.append(loop)
        return loops

    @cached_property
    def boundary_nodes(self):
        if not self.boundary_edges:
            return np.empty(0, dtype=np.int64)
        return np.unique(np.asarray(self.boundary_edges, dtype=np.int64).ravel())


def misfit(labels, sigma_mass, trace_values, meas_values):
    """Half the squared arc-L2 distance between trace and measurement."""
    d = np.zeros(sigma_mass.shape[0])
    d[labels.sigma_nodes] = np.asarray(trace_values) - np.asarray(meas_values)
    return 0.5 * float(d @ (sigma_mass @ d))


def gl_energy(mesh, v, eps, gamma=GAMMA_DEFAULT, k1=None, mlump=None):
    """Diffuse-interface (perimeter-like) energy of a phase field."""
    return regularizer_energy(mesh, v, eps, gamma=gamma, k1=k1, mlump=mlump)


def tv_perimeter(cell_set):
    """Length of the set boundary interior to the domain (outer wall excluded)."""
    mesh = cell_set.mesh
    wall = mesh.boundary_edge_set
    total = 0.0
    for a, b in cell_set.boundary_edges:
        if (a, b) in wall:
            continue
        total += float(np.linalg.norm(mesh.nodes[a] - mesh.nodes[b]))
    return total


def hausdorff(set_a, set_b):
    """Hausdorff distance between boundary-polyline vertex samples."""
    if set_a.is_empty() and set_b.is_empty():
        return 0.0
    if set_a.is_empty() or set_b.is_empty():
        return float("inf")
    pa = set_a.mesh.nodes[set_a.boundary_nodes]
    pb = set_b.mesh.nodes[set_b.boundary_nodes]
    d_ab, _ = cKDTree(pb).query(pa, k=1)
    d_ba, _ = cKDTree(pa).query(pb, k=1)
    return float(max(d_ab.max(), d_ba.max()))


def symmetric_difference_area(set_a, set_b):
    """Area of cells belonging to exactly one of the two sets (same mesh)."""
    if set_a.mesh is not set_b.mesh:
        raise ValueError("symmetric difference requires sets on the same mesh")
    mesh = set_a.mesh
    in_a = np.zeros(mesh.num_cells, dtype=bool)
    in_b = np.zeros(mesh.num_cells, dtype=bool)
    in_a[set_a.cells] = True
    in_b[set_b.cells] = True
    return float(mesh.cell_areas[in_a ^ in_b].sum())


def _level_crossing(x, vals, start, step, level):
    """Walk from ``start`` in direction ``step`` until vals crosses ``level``."""
    i = start
    while 0 <= i + step < len(vals):
        a, b = vals[i], vals[i + step]
        if (a - level) * (b - level) <= 0 and a != b:
            t = (level - a) / (b - a)
            return float(x[i] + t * (x[i + step] - x[i]))
        i += step
    return None


def _line_widths(x, vals, lo, hi):
    widths = []
    s = np.sign(vals - 0.5)
    for k in np.flatnonzero(s[:-1] * s[1:] < 0):
        if vals[k] > vals[k + 1]:       # descending run: hi left, lo right
            xh = _level_crossing(x, vals, k, -1, hi)
            xl = _level_crossing(x, vals, k + 1, +1, lo)
        else:
            xl = _level_crossing(x, vals, k, -1, lo)
            xh = _level_crossing(x, vals, k + 1, +1, hi)
        if xh is not None and xl is not None:
            widths.append(abs(xh - xl))
    return widths


def interface_width(mesh, v, lo=0.1, hi=0.9):
    """Median arc distance between the lo and hi level sets along grid lines.

    Returns nan when no transition is found.  Requires the structured grid
    layout produced by build_structured_mesh.
    """
    nxp, nyp = mesh.nx + 1, mesh.ny + 1
    grid = np.asarray(v).reshape(nyp, nxp)
    xs = mesh.nodes[:nxp, 0]
    ys = mesh.nodes[::nxp, 1]
    widths = []
    for j in range(nyp):
        widths += _line_widths(xs, grid[j, :], lo, hi)
    for i in range(nxp):
        widths += _line_widths(ys, grid[:, i], lo, hi)
    return float(np.median(widths)) if widths else float("nan")


def caccioppoli_check(mesh, coeff, state, v, delta, center, radius):
    """Interior energy bound: weighted gradient mass on B_R against weighted
    L2 mass on B_2R, scaled by R^2; the admissible constant is 32 Lam / lam^2
    (cutoff-gradient constant fixed at 2).

    The doubled ball must sit inside the low-phase region {vbar < 1/2}.
    """
    center = np.asarray(center, dtype=float)
    dist = np.linalg.norm(mesh.cell_centroids - center, axis=1)
    in_r = dist <= radius
    in_2r = dist <= 2.0 * radius
    vbar = fem.cell_means(mesh, v)
    if not np.any(in_2r):
        raise ValueError("ball contains no cells")
    if np.any(vbar[in_2r] >= 0.5):
        raise ValueError("doubled ball is not contained in the cavity region")
    x0, y0, x1, y1 = mesh.rect
    if (center[0] - 2 * radius < x0 or center[0] + 2 * radius > x1
            or center[1] - 2 * radius < y0 or center[1] + 2 * radius > y1):
        raise ValueError("doubled ball leaves the domain")

    w = fem.conductivity_scale(vbar, delta)
    tri = mesh.triangles
    gu = np.einsum("tdk,tk->td", mesh.cell_basis_gradients, state.u[tri])
    grad_density = mesh.cell_areas * (gu**2).sum(axis=1)
    lhs = float(np.sum(w[in_r] * grad_density[in_r]))
    um2 = fem._midpoint_values(state.u[tri]) ** 2
    mass_density = mesh.cell_areas / 3.0 * um2.sum(axis=1)
    rhs = float(np.sum(w[in_2r] * mass_density[in_2r]))

    bound = 32.0 * coeff.Lam / coeff.lam**2
    tiny = 1e-28
    if rhs < tiny:
        return {"ratio": 0.0, "bound": bound, "passed": bool(lhs < tiny),
                "degenerate": True, "lhs": lhs, "rhs": rhs}
    ratio = lhs * radius**2 / rhs
    return {"ratio": ratio, "bound": bound, "passed": bool(ratio <= bound),
            "degenerate": False, "lhs": lhs, "rhs": rhs}


def trace_stability_study(setup, center, base_radius, h0=0.05, steps=5, floor=1e-9):
    """Trace errors for a shrinking family of disks against the limit disk.

    Radii are base_radius + h0 / 2^n; the error sequence should decrease until
    it reaches the solver floor.
    """
    limit_shape = geometry.CavityShape.disk(center, base_radius)
    ref = forward.solve_cavity_reference(setup.mesh, setup.labels, setup.coeff,
                                         limit_shape, setup.f, opts=setup.newton)
    trace_limit = geometry.sigma_trace(setup.labels, ref.u)
    rows = []
    for n in range(steps):
        radius = base_radius + h0 / 2**n
        shape = geometry.CavityShape.disk(center, radius)
        sol = forward.solve_cavity_reference(setup.mesh, setup.labels, setup.coeff,
                                             shape, setup.f, opts=setup.newton)
        tr = geometry.sigma_trace(setup.labels, sol.u)
        d = np.zeros(setup.mesh.num_nodes)
        d[setup.labels.sigma_nodes] = tr - trace_limit
        err = fem.sigma_l2_norm(setup.sigma_mass, d)
        rows.append({"n": n, "radius": radius, "error": err})
    errors = [r["error"] for r in rows]
    above = [e for e in errors if e > floor]
    decreasing = all(b < a for a, b in zip(above, above[1:]))
    ratios = [b / a for a, b in zip(above, above[1:])]
    return {"rows": rows, "floor": floor, "decreasing": bool(decreasing),
            "ratios": ratios}


def distinguishability_study(setup, shape_a, shape_b, eta=0.0):
    """Arc-trace gap between two cavities, compared against the noise floor."""
    traces = []
    for shape in (shape_a, shape_b):
        sol = forward.solve_cavity_reference(setup.mesh, setup.labels, setup.coeff,
                                             shape, setup.f, opts=setup.newton)
        traces.append(geometry.sigma_trace(setup.labels, sol.u))
    d = np.zeros(setup.mesh.num_nodes)
    d[setup.labels.sigma_nodes] = traces[0] - traces[1]
    gap = fem.sigma_l2_norm(setup.sigma_mass, d)
    scale = float(np.abs(traces[0]).max())
    noise_floor = eta * scale
    set_a = SetOnMesh.from_shape(setup.mesh, shape_a)
    set_b = SetOnMesh.from_shape(setup.mesh, shape_b)
    return {"gap": gap, "noise_floor": noise_floor, "trace_scale": scale,
            "hausdorff": hausdorff(set_a, set_b),
            "separated": bool(gap > max(noise_floor, 1e-12))}


def operator_certificates(setup, trials=100, seed=0, monotone_tol=1e-12,
                          coercive_slack=1e-10):
    """Randomized monotonicity and coercivity checks of the discrete operator.

    Runs on the plain problem (phase field one everywhere), mirroring the
    continuous estimates: pairing differences are nonnegative and the operator
    dominates the discrete H1 norm up to the constant lam^2 |Omega| / 4.
    """
    mesh, coeff = setup.mesh, setup.coeff
    ones = np.ones(mesh.num_nodes)
    K = fem.assemble_weighted_stiffness(mesh, coeff, ones, 1.0)
    k1 = fem.assemble_weighted_stiffness(mesh, fem.CoefficientField.identity(mesh),
                                         ones, 1.0)
    mass = fem.assemble_mass(mesh)
    area = float(mesh.cell_areas.sum())
    lam = coeff.lam
    rng = np.random.default_rng(seed)

    def T(u):
        return K @ u + fem.assemble_reaction_residual(mesh, ones, u)

    mono_vals = []
    for _ in range(trials):
        u = rng.uniform(-1, 1, mesh.num_nodes)
        w = rng.uniform(-1, 1, mesh.num_nodes)
        mono_vals.append(float((T(u) - T(w)) @ (u - w)))
    coercive_margins = []
    for _ in range(trials):
        u = rng.uniform(-1, 1, mesh.num_nodes)
        pairing = float(T(u) @ u)
        h1_sq = float(u @ (k1 @ u) + u @ (mass @ u))
        margin = pairing - (lam * h1_sq - lam**2 * area / 4.0)
        coercive_margins.append(margin)

    mono_min = min(mono_vals)
    coer_min = min(coercive_margins)
    return {
        "trials": trials,
        "monotonicity_min": mono_min,
        "monotonicity_passed": bool(mono_min >= -monotone_tol),
        "coercivity_min_margin": coer_min,
        "coercivity_passed": bool(coer_min >= -coercive_slack),
        "passed": bool(mono_min >= -monotone_tol and coer_min >= -coercive_slack),
    }
