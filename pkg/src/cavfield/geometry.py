"""Structured triangulations of a rectangle with marked subregions and cavities.

The domain is an axis-aligned rectangle meshed with right triangles (each grid
cell split along the same diagonal), so every triangle is nonobtuse.  Regions:
a conductive collar ``omega1`` containing a source region ``omega2`` whose
boundary carries the measurement arc ``sigma`` on one side of the rectangle.
Cavity shapes live away from the collar by a safety distance ``d0``.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from functools import cached_property

import numpy as np
from scipy.spatial import cKDTree

from .errors import ConstraintViolationError, InconsistentRegionError

_TOL = 1e-12


def _readonly(a):
    a = np.ascontiguousarray(a)
    a.flags.writeable = False
    return a


@dataclass(frozen=True)
class Mesh:
    """Conforming triangulation of a rectangle.

    nodes          : (nn, 2) float coordinates
    triangles      : (nt, 3) node indices, counter-clockwise
    boundary_edges : (ne, 2) node pairs on the outer boundary
    h              : maximum edge length
    rect           : (x0, y0, x1, y1) of the meshed rectangle
    nx, ny         : grid cell counts of the structured build
    """

    nodes: np.ndarray
    triangles: np.ndarray
    boundary_edges: np.ndarray
    h: float
    rect: tuple
    nx: int
    ny: int

    def __post_init__(self):
        object.__setattr__(self, "nodes", _readonly(np.asarray(self.nodes, dtype=float)))
        object.__setattr__(self, "triangles", _readonly(np.asarray(self.triangles, dtype=np.int64)))
        object.__setattr__(self, "boundary_edges", _readonly(np.asarray(self.boundary_edges, dtype=np.int64)))

    @property
    def num_nodes(self):
        return self.nodes.shape[0]

    @property
    def num_cells(self):
        return self.triangles.shape[0]

    @cached_property
    def cell_areas(self):
        p = self.nodes
        a, b, c = (p[self.triangles[:, k]] for k in range(3))
        return _readonly(0.5 * ((b[:, 0] - a[:, 0]) * (c[:, 1] - a[:, 1])
                                - (b[:, 1] - a[:, 1]) * (c[:, 0] - a[:, 0])))

    @cached_property
    def cell_centroids(self):
        return _readonly(self.nodes[self.triangles].mean(axis=1))

    @cached_property
    def cell_circumradii(self):
        p = self.nodes[self.triangles]
        la = np.linalg.norm(p[:, 1] - p[:, 2], axis=1)
        lb = np.linalg.norm(p[:, 2] - p[:, 0], axis=1)
        lc = np.linalg.norm(p[:, 0] - p[:, 1], axis=1)
        return _readonly(la * lb * lc / (4.0 * self.cell_areas))

    @cached_property
    def cell_basis_gradients(self):
        """(nt, 2, 3) gradients of the three nodal hat functions per cell."""
        p = self.nodes
        a, b, c = (p[self.triangles[:, k]] for k in range(3))
        det = 2.0 * self.cell_areas
        g = np.empty((self.num_cells, 2, 3))
        g[:, 0, 0] = (b[:, 1] - c[:, 1]) / det
        g[:, 1, 0] = (c[:, 0] - b[:, 0]) / det
        g[:, 0, 1] = (c[:, 1] - a[:, 1]) / det
        g[:, 1, 1] = (a[:, 0] - c[:, 0]) / det
        g[:, 0, 2] = (a[:, 1] - b[:, 1]) / det
        g[:, 1, 2] = (b[:, 0] - a[:, 0]) / det
        return _readonly(g)

    @cached_property
    def edge_counts(self):
        """Map sorted-edge -> number of incident triangles."""
        counts = {}
        for tri in self.triangles:
            for a, b in ((tri[0], tri[1]), (tri[1], tri[2]), (tri[2], tri[0])):
                key = (int(a), int(b)) if a < b else (int(b), int(a))
                counts[key] = counts.get(key, 0) + 1
        return counts

    @cached_property
    def boundary_edge_set(self):
        return frozenset((int(min(a, b)), int(max(a, b))) for a, b in self.boundary_edges)

    @cached_property
    def cell_neighbors(self):
        """(nt, 3) neighbor cell across each local edge (0-1, 1-2, 2-0); -1 on boundary."""
        owner = {}
        nbr = -np.ones((self.num_cells, 3), dtype=np.int64)
        for t, tri in enumerate(self.triangles):
            for k, (a, b) in enumerate(((tri[0], tri[1]), (tri[1], tri[2]), (tri[2], tri[0]))):
                key = (int(a), int(b)) if a < b else (int(b), int(a))
                if key in owner:
                    t2, k2 = owner[key]
                    nbr[t, k] = t2
                    nbr[t2, k2] = t
                else:
                    owner[key] = (t, k)
        return _readonly(nbr)

    def content_id(self):
        """Short hash of the mesh geometry, used as inverse-crime guard token."""
        hsh = hashlib.sha256()
        hsh.update(np.ascontiguousarray(self.nodes).tobytes())
        hsh.update(np.ascontiguousarray(self.triangles).tobytes())
        return hsh.hexdigest()[:16]


def build_structured_mesh(nx, ny, rect=(0.0, 0.0, 1.0, 1.0)):
    """Right-triangle grid mesh: nx-by-ny cells, each split along the same diagonal.

    All triangles are right-angled (hence nonobtuse); ``h`` is the hypotenuse.
    """
    if nx < 2 or ny < 2:
        raise ValueError(f"need nx, ny >= 2, got nx={nx}, ny={ny}")
    x0, y0, x1, y1 = map(float, rect)
    if not (x1 > x0 and y1 > y0):
        raise ValueError(f"degenerate rectangle {rect}")
    xs = np.linspace(x0, x1, nx + 1)
    ys = np.linspace(y0, y1, ny + 1)
    X, Y = np.meshgrid(xs, ys, indexing="xy")
    nodes = np.column_stack([X.ravel(), Y.ravel()])

    def nid(i, j):
        return j * (nx + 1) + i

    tris = np.empty((2 * nx * ny, 3), dtype=np.int64)
    k = 0
    for j in range(ny):
        for i in range(nx):
            n00, n10 = nid(i, j), nid(i + 1, j)
            n01, n11 = nid(i, j + 1), nid(i + 1, j + 1)
            tris[k] = (n00, n10, n11)
            tris[k + 1] = (n00, n11, n01)
            k += 2

    edges = []
    for i in range(nx):
        edges.append((nid(i, 0), nid(i + 1, 0)))
    for j in range(ny):
        edges.append((nid(nx, j), nid(nx, j + 1)))
    for i in range(nx, 0, -1):
        edges.append((nid(i, ny), nid(i - 1, ny)))
    for j in range(ny, 0, -1):
        edges.append((nid(0, j), nid(0, j - 1)))

    dx, dy = (x1 - x0) / nx, (y1 - y0) / ny
    h = float(np.hypot(dx, dy))
    return Mesh(nodes=nodes, triangles=tris, boundary_edges=np.asarray(edges),
                h=h, rect=(x0, y0, x1, y1), nx=int(nx), ny=int(ny))


def validate_mesh(mesh, require_nonobtuse=True):
    """Check positivity, conformity, the Euler relation, and angle bounds.

    Raises ValueError on the first violated invariant.
    """
    areas = mesh.cell_areas
    if np.any(areas <= 0):
        raise ValueError("mesh has a triangle with nonpositive signed area")
    counts = mesh.edge_counts
    n_edges = len(counts)
    boundary = {e for e, c in counts.items() if c == 1}
    if any(c not in (1, 2) for c in counts.values()):
        raise ValueError("nonconforming mesh: an edge is shared by more than two triangles")
    if boundary != set(mesh.boundary_edge_set):
        raise ValueError("boundary_edges do not match the edges incident to exactly one triangle")
    euler = mesh.num_nodes - n_edges + (mesh.num_cells + 1)
    if euler != 2:
        raise ValueError(f"Euler relation violated: V-E+F = {euler}")
    if require_nonobtuse:
        p = mesh.nodes[mesh.triangles]
        for k in range(3):
            u = p[:, (k + 1) % 3] - p[:, k]
            w = p[:, (k + 2) % 3] - p[:, k]
            if np.any((u * w).sum(axis=1) < -1e-10 * mesh.h**2):
                raise ValueError("mesh contains an obtuse triangle")


@dataclass(frozen=True)
class RegionSpec:
    """Geometric description of the marked regions.

    omega1 / omega2 : axis-aligned rectangles (x0, y0, x1, y1), omega2 inside omega1
    sigma_side      : rectangle side carrying the measurement arc
    sigma_span      : interval along that side (axis coordinate of the side)
    """

    omega1: tuple
    omega2: tuple
    sigma_side: str = "bottom"
    sigma_span: tuple = (0.0, 1.0)


@dataclass(frozen=True)
class RegionLabels:
    """Cell/node/edge index sets for the marked regions plus the safety distance d0."""

    omega1_cells: np.ndarray
    omega2_cells: np.ndarray
    omega1_nodes: np.ndarray
    sigma_edges: np.ndarray          # indices into mesh.boundary_edges
    sigma_nodes: np.ndarray          # node indices ordered along the arc
    sigma_arc: np.ndarray            # cumulative arc length per sigma node
    d0: float

    def __post_init__(self):
        for name in ("omega1_cells", "omega2_cells", "omega1_nodes",
                     "sigma_edges", "sigma_nodes"):
            object.__setattr__(self, name, _readonly(np.asarray(getattr(self, name), dtype=np.int64)))
        object.__setattr__(self, "sigma_arc", _readonly(np.asarray(self.sigma_arc, dtype=float)))

    @property
    def sigma_length(self):
        return float(self.sigma_arc[-1]) if self.sigma_arc.size else 0.0


def _cells_in_rect(mesh, rect, tol):
    x0, y0, x1, y1 = rect
    p = mesh.nodes[mesh.triangles]  # (nt, 3, 2)
    inside = ((p[..., 0] >= x0 - tol) & (p[..., 0] <= x1 + tol)
              & (p[..., 1] >= y0 - tol) & (p[..., 1] <= y1 + tol))
    return np.flatnonzero(inside.all(axis=1))


def _side_geometry(rect, side):
    x0, y0, x1, y1 = rect
    if side == "bottom":
        return 1, y0, 0   # (coordinate axis along the side, fixed value, fixed axis)
    if side == "top":
        return 1, y1, 0
    if side == "left":
        return 0, x0, 1
    if side == "right":
        return 0, x1, 1
    raise ValueError(f"unknown side {side!r}")


def mark_regions(mesh, spec):
    """Label omega1/omega2 cells and the sigma edges; recompute d0 from geometry.

    d0 is a conservative lower bound for dist(omega2, domain minus omega1):
    nearest centroid distance minus both circumradii.
    """
    tol = _TOL * max(abs(v) for v in mesh.rect) + _TOL
    omega1_cells = _cells_in_rect(mesh, spec.omega1, tol)
    omega2_cells = _cells_in_rect(mesh, spec.omega2, tol)
    if omega1_cells.size == 0 or omega2_cells.size == 0:
        raise InconsistentRegionError("omega1 or omega2 contains no cells")
    if not np.isin(omega2_cells, omega1_cells).all():
        raise InconsistentRegionError("omega2 cells are not a subset of omega1 cells")
    omega1_nodes = np.unique(mesh.triangles[omega1_cells])

    fixed_axis, fixed_val, run_axis = _side_geometry(mesh.rect, spec.sigma_side)
    lo, hi = sorted(spec.sigma_span)
    nodes = mesh.nodes
    sigma_edges = []
    for e, (a, b) in enumerate(mesh.boundary_edges):
        pa, pb = nodes[a], nodes[b]
        if abs(pa[fixed_axis] - fixed_val) > tol or abs(pb[fixed_axis] - fixed_val) > tol:
            continue
        ra, rb = pa[run_axis], pb[run_axis]
        if min(ra, rb) >= lo - tol and max(ra, rb) <= hi + tol:
            sigma_edges.append(e)
    if not sigma_edges:
        raise InconsistentRegionError("sigma span selects no boundary edges")
    sigma_edges = np.asarray(sigma_edges, dtype=np.int64)

    # every sigma edge must lie on the boundary of omega2 as well
    omega2_nodes = set(np.unique(mesh.triangles[omega2_cells]).tolist())
    for e in sigma_edges:
        a, b = mesh.boundary_edges[e]
        if int(a) not in omega2_nodes or int(b) not in omega2_nodes:
            raise InconsistentRegionError("sigma edge does not lie on the omega2 boundary")

    sigma_node_ids = np.unique(mesh.boundary_edges[sigma_edges])
    order = np.argsort(nodes[sigma_node_ids, run_axis], kind="stable")
    sigma_nodes = sigma_node_ids[order]
    pts = nodes[sigma_nodes]
    seg = np.linalg.norm(np.diff(pts, axis=0), axis=1)
    sigma_arc = np.concatenate([[0.0], np.cumsum(seg)])

    outside = np.setdiff1d(np.arange(mesh.num_cells), omega1_cells, assume_unique=False)
    if outside.size == 0:
        d0 = np.inf
    else:
        tree = cKDTree(mesh.cell_centroids[outside])
        dists, _ = tree.query(mesh.cell_centroids[omega2_cells], k=1)
        d0 = float(dists.min()
                   - mesh.cell_circumradii[omega2_cells].max()
                   - mesh.cell_circumradii[outside].max())
    if d0 <= 0:
        raise InconsistentRegionError(f"separation between omega2 and the outside of omega1 is {d0:.3g} <= 0")

    return RegionLabels(omega1_cells=omega1_cells, omega2_cells=omega2_cells,
                        omega1_nodes=omega1_nodes, sigma_edges=sigma_edges,
                        sigma_nodes=sigma_nodes, sigma_arc=sigma_arc, d0=d0)


@dataclass(frozen=True)
class CavityShape:
    """Closed cavity shape with an inside predicate and sampled boundary.

    kind is one of "empty", "disk", "ellipse", "polygon", "half_disk".
    """

    kind: str
    params: dict

    @staticmethod
    def empty():
        return CavityShape("empty", {})

    @staticmethod
    def disk(center, radius):
        if radius <= 0:
            raise ValueError("disk radius must be positive")
        return CavityShape("disk", {"center": (float(center[0]), float(center[1])),
                                    "radius": float(radius)})

    @staticmethod
    def ellipse(center, rx, ry, angle=0.0):
        if rx <= 0 or ry <= 0:
            raise ValueError("ellipse radii must be positive")
        return CavityShape("ellipse", {"center": (float(center[0]), float(center[1])),
                                       "rx": float(rx), "ry": float(ry), "angle": float(angle)})

    @staticmethod
    def polygon(vertices):
        verts = np.asarray(vertices, dtype=float)
        if verts.ndim != 2 or verts.shape[0] < 3 or verts.shape[1] != 2:
            raise ValueError("polygon needs at least 3 planar vertices")
        if _polygon_self_intersects(verts):
            raise ValueError("polygon is self-intersecting")
        return CavityShape("polygon", {"vertices": tuple(map(tuple, verts))})

    @staticmethod
    def half_disk(center, radius, side="top"):
        """Disk centered on a domain wall, clipped to the inner half."""
        if radius <= 0:
            raise ValueError("half-disk radius must be positive")
        if side not in ("top", "bottom", "left", "right"):
            raise ValueError(f"unknown side {side!r}")
        return CavityShape("half_disk", {"center": (float(center[0]), float(center[1])),
                                         "radius": float(radius), "side": side})

    def is_empty(self):
        return self.kind == "empty"

    def contains(self, points):
        """Strict inside predicate, vectorized over (n, 2) points."""
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        if self.kind == "empty":
            return np.zeros(pts.shape[0], dtype=bool)
        if self.kind == "disk":
            c = np.asarray(self.params["center"])
            return np.linalg.norm(pts - c, axis=1) < self.params["radius"] - _TOL
        if self.kind == "half_disk":
            c = np.asarray(self.params["center"])
            near = np.linalg.norm(pts - c, axis=1) < self.params["radius"] - _TOL
            side = self.params["side"]
            if side == "top":
                return near & (pts[:, 1] < c[1] + _TOL)
            if side == "bottom":
                return near & (pts[:, 1] > c[1] - _TOL)
            if side == "left":
                return near & (pts[:, 0] > c[0] - _TOL)
            return near & (pts[:, 0] < c[0] + _TOL)
        if self.kind == "ellipse":
            c = np.asarray(self.params["center"])
            d = pts - c
            ang = self.params["angle"]
            if ang:
                ca, sa = np.cos(ang), np.sin(ang)
                d = d @ np.array([[ca, sa], [-sa, ca]]).T
            r = (d[:, 0] / self.params["rx"])**2 + (d[:, 1] / self.params["ry"])**2
            return r < 1.0 - _TOL
        if self.kind == "polygon":
            return _points_in_polygon(pts, np.asarray(self.params["vertices"]))
        raise ValueError(f"unknown shape kind {self.kind!r}")

    def boundary_points(self, n=256):
        if self.kind == "empty":
            return np.empty((0, 2))
        if self.kind in ("disk", "half_disk"):
            c = np.asarray(self.params["center"])
            t = np.linspace(0, 2 * np.pi, n, endpoint=False)
            r = self.params["radius"]
            return c + r * np.column_stack([np.cos(t), np.sin(t)])
        if self.kind == "ellipse":
            c = np.asarray(self.params["center"])
            t = np.linspace(0, 2 * np.pi, n, endpoint=False)
            q = np.column_stack([self.params["rx"] * np.cos(t), self.params["ry"] * np.sin(t)])
            ang = self.params["angle"]
            if ang:
                ca, sa = np.cos(ang), np.sin(ang)
                q = q @ np.array([[ca, -sa], [sa, ca]]).T
            return c + q
        if self.kind == "polygon":
            verts = np.asarray(self.params["vertices"])
            out = []
            m = max(2, n // len(verts))
            for k in range(len(verts)):
                a, b = verts[k], verts[(k + 1) % len(verts)]
                t = np.linspace(0, 1, m, endpoint=False)[:, None]
                out.append(a + t * (b - a))
            return np.vstack(out)
        raise ValueError(f"unknown shape kind {self.kind!r}")

    def distance(self, points):
        """Distance to the shape (0 inside), vectorized over (n, 2) points."""
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        if self.kind == "empty":
            return np.full(pts.shape[0], np.inf)
        if self.kind in ("disk", "half_disk"):
            c = np.asarray(self.params["center"])
            return np.maximum(np.linalg.norm(pts - c, axis=1) - self.params["radius"], 0.0)
        bnd = self.boundary_points(512)
        d, _ = cKDTree(bnd).query(pts, k=1)
        d = np.asarray(d, dtype=float)
        d[self.contains(pts)] = 0.0
        return d


def _polygon_self_intersects(verts):
    n = len(verts)

    def seg_cross(p, q, r, s):
        d1 = np.cross(q - p, r - p)
        d2 = np.cross(q - p, s - p)
        d3 = np.cross(s - r, p - r)
        d4 = np.cross(s - r, q - r)
        return (d1 * d2 < 0) and (d3 * d4 < 0)

    for i in range(n):
        a, b = verts[i], verts[(i + 1) % n]
        for j in range(i + 1, n):
            if abs(i - j) in (0, 1) or (i == 0 and j == n - 1):
                continue
            c, d = verts[j], verts[(j + 1) % n]
            if seg_cross(a, b, c, d):
                return True
    return False


def _points_in_polygon(pts, verts):
    """Even-odd ray casting; points on an edge count as outside (strict inside)."""
    x, y = pts[:, 0], pts[:, 1]
    inside = np.zeros(len(pts), dtype=bool)
    n = len(verts)
    for i in range(n):
        x1, y1 = verts[i]
        x2, y2 = verts[(i + 1) % n]
        crosses = (y1 > y) != (y2 > y)
        with np.errstate(divide="ignore", invalid="ignore"):
            xint = x1 + (y - y1) * (x2 - x1) / (y2 - y1)
        inside ^= crosses & (x < xint)
    return inside


def validate_shape(shape, mesh, labels):
    """Check the cavity shape against the domain and the omega1 safety distance."""
    if shape.is_empty():
        return
    bnd = shape.boundary_points(512)
    x0, y0, x1, y1 = mesh.rect
    tol = 1e-9 * max(x1 - x0, y1 - y0)
    if (bnd[:, 0] < x0 - tol).any() or (bnd[:, 0] > x1 + tol).any() \
            or (bnd[:, 1] < y0 - tol).any() or (bnd[:, 1] > y1 + tol).any():
        raise ConstraintViolationError("cavity shape leaves the domain rectangle")
    if not np.isfinite(labels.d0):
        return
    omega1_pts = mesh.nodes[labels.omega1_nodes]
    dmin = float(shape.distance(omega1_pts).min())
    if dmin < labels.d0 - tol:
        raise ConstraintViolationError(
            f"cavity is {dmin:.4g} from the omega1 collar, closer than d0={labels.d0:.4g}")


def rasterize_cavity(mesh, labels, shape):
    """Nodal indicator of the conductive region: 0 strictly inside the cavity, 1 elsewhere."""
    validate_shape(shape, mesh, labels)
    v = np.ones(mesh.num_nodes)
    if not shape.is_empty():
        v[shape.contains(mesh.nodes)] = 0.0
    v[labels.omega1_nodes] = 1.0
    return v


def cavity_cells_from_shape(mesh, shape):
    """Cells whose three vertices are strictly inside the shape."""
    if shape.is_empty():
        return np.empty(0, dtype=np.int64)
    node_in = shape.contains(mesh.nodes)
    return np.flatnonzero(node_in[mesh.triangles].all(axis=1))


def cavity_cells_from_indicator(mesh, v):
    """Cells whose three nodal indicator values vanish."""
    return np.flatnonzero((np.asarray(v)[mesh.triangles] <= _TOL).all(axis=1))


def sigma_trace(labels, u):
    """Values of a nodal field at the sigma nodes, ordered along the arc."""
    return np.asarray(u)[labels.sigma_nodes]


def mesh_to_json(mesh, labels=None):
    """Mesh file schema: nodes, triangles, boundary edges with sigma/wall markers."""
    markers = ["wall"] * mesh.boundary_edges.shape[0]
    if labels is not None:
        for e in labels.sigma_edges:
            markers[int(e)] = "sigma"
    return json.dumps({
        "nodes": mesh.nodes.tolist(),
        "triangles": mesh.triangles.tolist(),
        "boundary_edges": [[int(a), int(b), m]
                           for (a, b), m in zip(mesh.boundary_edges, markers)],
    }, sort_keys=True)


def mesh_from_json(text):
    """Rebuild nodes/triangles/boundary data from the mesh file schema.

    Returns (nodes, triangles, boundary_edges, markers); the structured-grid
    metadata is not part of the schema.
    """
    doc = json.loads(text)
    nodes = np.asarray(doc["nodes"], dtype=float)
    tris = np.asarray(doc["triangles"], dtype=np.int64)
    edges = np.asarray([[e[0], e[1]] for e in doc["boundary_edges"]], dtype=np.int64)
    markers = [e[2] for e in doc["boundary_edges"]]
    return nodes, tris, edges, markers
