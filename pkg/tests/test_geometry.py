import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cavfield import geometry
from cavfield.errors import ConstraintViolationError, InconsistentRegionError


def test_too_coarse_grid_rejected():
    with pytest.raises(ValueError):
        geometry.build_structured_mesh(1, 1)
    with pytest.raises(ValueError):
        geometry.build_structured_mesh(4, 1)


def test_two_by_two_counts():
    mesh = geometry.build_structured_mesh(2, 2)
    assert mesh.num_nodes == 9
    assert mesh.num_cells == 8
    geometry.validate_mesh(mesh)  # includes the Euler relation


def test_structured_mesh_closed_form_geometry():
    mesh = geometry.build_structured_mesh(64, 64)
    assert mesh.h == pytest.approx(np.sqrt(2.0) / 64.0, rel=1e-15)
    assert np.allclose(mesh.cell_areas, 1.0 / 8192.0, rtol=1e-12)


@settings(max_examples=20, deadline=None)
@given(nx=st.integers(2, 12), ny=st.integers(2, 12),
       w=st.floats(0.3, 4.0), h=st.floats(0.3, 4.0))
def test_areas_tile_the_rectangle(nx, ny, w, h):
    mesh = geometry.build_structured_mesh(nx, ny, (0.0, 0.0, w, h))
    assert np.sum(mesh.cell_areas) == pytest.approx(w * h, rel=1e-12)


def test_validate_flags_flipped_triangle():
    mesh = geometry.build_structured_mesh(2, 2)
    tris = mesh.triangles.copy()
    tris[0] = tris[0][::-1]
    bad = geometry.Mesh(nodes=mesh.nodes, triangles=tris,
                        boundary_edges=mesh.boundary_edges, h=mesh.h,
                        rect=mesh.rect, nx=2, ny=2)
    with pytest.raises(ValueError):
        geometry.validate_mesh(bad)


def test_mark_regions_full_domain(unit_mesh_16):
    spec = geometry.RegionSpec(omega1=(0, 0, 1, 1), omega2=(0, 0, 1, 0.25),
                               sigma_side="bottom", sigma_span=(0, 1))
    labels = geometry.mark_regions(unit_mesh_16, spec)
    assert labels.omega1_cells.size == unit_mesh_16.num_cells
    assert np.isinf(labels.d0)


def test_mark_regions_nested_strips(unit_mesh_16, default_region_spec):
    labels = geometry.mark_regions(unit_mesh_16, default_region_spec)
    assert labels.sigma_edges.size > 0
    for e in labels.sigma_edges:
        a, b = unit_mesh_16.boundary_edges[e]
        assert unit_mesh_16.nodes[a, 1] == 0.0
        assert unit_mesh_16.nodes[b, 1] == 0.0
    assert np.isin(labels.omega2_cells, labels.omega1_cells).all()
    assert 0 < labels.d0 < 0.1


def test_mark_regions_rejects_unnested(unit_mesh_16):
    spec = geometry.RegionSpec(omega1=(0, 0, 1, 0.25), omega2=(0, 0.5, 1, 0.75),
                               sigma_side="bottom", sigma_span=(0, 1))
    with pytest.raises(InconsistentRegionError):
        geometry.mark_regions(unit_mesh_16, spec)


def test_mark_regions_rejects_sigma_off_omega2(unit_mesh_16):
    spec = geometry.RegionSpec(omega1=(0, 0, 1, 0.25), omega2=(0, 0, 1, 0.15),
                               sigma_side="top", sigma_span=(0, 1))
    with pytest.raises(InconsistentRegionError):
        geometry.mark_regions(unit_mesh_16, spec)


def test_mark_regions_idempotent(unit_mesh_16, default_region_spec):
    a = geometry.mark_regions(unit_mesh_16, default_region_spec)
    b = geometry.mark_regions(unit_mesh_16, default_region_spec)
    assert np.array_equal(a.omega1_cells, b.omega1_cells)
    assert np.array_equal(a.omega2_cells, b.omega2_cells)
    assert np.array_equal(a.sigma_edges, b.sigma_edges)
    assert a.d0 == b.d0


def test_sigma_arc_monotone(unit_mesh_16, default_region_spec):
    labels = geometry.mark_regions(unit_mesh_16, default_region_spec)
    assert np.all(np.diff(labels.sigma_arc) > 0)
    assert labels.sigma_arc[0] == 0.0
    assert labels.sigma_length == pytest.approx(1.0)


def test_rasterize_empty_is_all_ones(small_setup):
    v = geometry.rasterize_cavity(small_setup.mesh, small_setup.labels,
                                  geometry.CavityShape.empty())
    assert np.all(v == 1.0)


def test_rasterize_disk_area_against_monte_carlo():
    mesh = geometry.build_structured_mesh(64, 64)
    spec = geometry.RegionSpec(omega1=(0, 0, 1, 0.25), omega2=(0, 0, 1, 0.15))
    labels = geometry.mark_regions(mesh, spec)
    shape = geometry.CavityShape.disk((0.5, 0.65), 0.2)
    v = geometry.rasterize_cavity(mesh, labels, shape)

    rng = np.random.default_rng(42)
    pts = rng.uniform(0.0, 1.0, size=(200_000, 2))
    mc_area = shape.contains(pts).mean() * 1.0  # unit square
    vbar = v[mesh.triangles].mean(axis=1)
    raster_area = mesh.cell_areas[vbar < 0.5].sum()
    assert raster_area == pytest.approx(mc_area, rel=0.05)


def test_rasterize_values_binary_and_collar_kept(small_setup):
    shape = geometry.CavityShape.disk((0.5, 0.65), 0.2)
    v = geometry.rasterize_cavity(small_setup.mesh, small_setup.labels, shape)
    assert set(np.unique(v)) <= {0.0, 1.0}
    assert np.all(v[small_setup.labels.omega1_nodes] == 1.0)


def test_rasterize_rejects_collar_overlap(small_setup):
    shape = geometry.CavityShape.disk((0.5, 0.3), 0.2)  # dips into the collar
    with pytest.raises(ConstraintViolationError):
        geometry.rasterize_cavity(small_setup.mesh, small_setup.labels, shape)


def test_shape_leaving_domain_rejected(small_setup):
    shape = geometry.CavityShape.disk((0.95, 0.65), 0.2)
    with pytest.raises(ConstraintViolationError):
        geometry.validate_shape(shape, small_setup.mesh, small_setup.labels)


def test_polygon_self_intersection_rejected():
    with pytest.raises(ValueError):
        geometry.CavityShape.polygon([(0, 0), (1, 1), (1, 0), (0, 1)])


def test_polygon_contains_matches_disk_sampling():
    t = np.linspace(0, 2 * np.pi, 64, endpoint=False)
    poly = geometry.CavityShape.polygon(
        np.column_stack([0.5 + 0.2 * np.cos(t), 0.5 + 0.2 * np.sin(t)]))
    disk = geometry.CavityShape.disk((0.5, 0.5), 0.2)
    rng = np.random.default_rng(7)
    pts = rng.uniform(0.2, 0.8, size=(2000, 2))
    inside_poly = poly.contains(pts)
    inside_disk = disk.contains(pts)
    assert (inside_poly == inside_disk).mean() > 0.99


def test_half_disk_clips_to_domain(small_setup):
    shape = geometry.CavityShape.half_disk((0.5, 1.0), 0.2)
    v = geometry.rasterize_cavity(small_setup.mesh, small_setup.labels, shape)
    inside = np.flatnonzero(v == 0.0)
    assert inside.size > 0
    assert np.all(small_setup.mesh.nodes[inside, 1] > 0.75)


def test_mesh_json_roundtrip(unit_mesh_16, default_region_spec):
    labels = geometry.mark_regions(unit_mesh_16, default_region_spec)
    text = geometry.mesh_to_json(unit_mesh_16, labels)
    doc = json.loads(text)
    assert set(doc) == {"nodes", "triangles", "boundary_edges"}
    nodes, tris, edges, markers = geometry.mesh_from_json(text)
    assert np.allclose(nodes, unit_mesh_16.nodes)
    assert np.array_equal(tris, unit_mesh_16.triangles)
    assert markers.count("sigma") == labels.sigma_edges.size


def test_content_id_tracks_geometry():
    a = geometry.build_structured_mesh(8, 8)
    b = geometry.build_structured_mesh(8, 8)
    c = geometry.build_structured_mesh(8, 9)
    assert a.content_id() == b.content_id()
    assert a.content_id() != c.content_id()
