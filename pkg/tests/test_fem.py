import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings
from hypothesis import strategies as st

from cavfield import fem, geometry
from cavfield.errors import NoConvergenceError, NotSpdError


@pytest.fixture(scope="module")
def mesh():
    return geometry.build_structured_mesh(16, 16)


@pytest.fixture(scope="module")
def coeff(mesh):
    return fem.CoefficientField.identity(mesh)


def test_laplacian_rows_sum_to_zero(mesh, coeff):
    ones = np.ones(mesh.num_nodes)
    K = fem.assemble_weighted_stiffness(mesh, coeff, ones, 1.0)
    assert np.abs(np.asarray(K.sum(axis=1))).max() < 1e-12
    sym_gap = np.abs(K - K.T).max()
    assert sym_gap < 1e-12 * np.abs(K.data).max()


def test_delta_one_ignores_phase(mesh, coeff):
    rng = np.random.default_rng(0)
    v = rng.uniform(0, 1, mesh.num_nodes)
    K1 = fem.assemble_weighted_stiffness(mesh, coeff, v, 1.0)
    K2 = fem.assemble_weighted_stiffness(mesh, coeff, np.ones(mesh.num_nodes), 1.0)
    assert np.abs(K1 - K2).max() == 0.0


def test_zero_phase_scales_laplacian(mesh, coeff):
    zeros = np.zeros(mesh.num_nodes)
    ones = np.ones(mesh.num_nodes)
    K0 = fem.assemble_weighted_stiffness(mesh, coeff, zeros, 0.01)
    K1 = fem.assemble_weighted_stiffness(mesh, coeff, ones, 1.0)
    assert np.abs(K0 - 0.01 * K1).max() < 1e-15


def test_stiffness_rejects_bad_inputs(mesh, coeff):
    ones = np.ones(mesh.num_nodes)
    with pytest.raises(ValueError):
        fem.assemble_weighted_stiffness(mesh, coeff, ones, 0.0)
    with pytest.raises(ValueError):
        fem.assemble_weighted_stiffness(mesh, coeff, ones + 0.5, 0.5)


def test_assembly_linear_in_conductivity(mesh, coeff):
    # exact scaling with a power-of-two factor
    ones = np.ones(mesh.num_nodes)
    zeros = np.zeros(mesh.num_nodes)
    K_half = fem.assemble_weighted_stiffness(mesh, coeff, zeros, 0.5)
    K_full = fem.assemble_weighted_stiffness(mesh, coeff, ones, 1.0)
    assert np.abs(K_half - 0.5 * K_full).max() == 0.0


def test_load_linear_in_source(mesh):
    rng = np.random.default_rng(1)
    f = rng.uniform(0, 2, mesh.num_nodes)
    assert np.array_equal(fem.assemble_load(mesh, 2.0 * f),
                          2.0 * fem.assemble_load(mesh, f))


def test_reaction_residual_zero_states(mesh):
    ones = np.ones(mesh.num_nodes)
    assert np.all(fem.assemble_reaction_residual(mesh, ones, np.zeros(mesh.num_nodes)) == 0)
    u = np.random.default_rng(2).normal(size=mesh.num_nodes)
    assert np.all(fem.assemble_reaction_residual(mesh, np.zeros(mesh.num_nodes), u) == 0)


def test_reaction_residual_constant_state_is_lumped_area(mesh):
    c = 1.7
    ones = np.ones(mesh.num_nodes)
    r = fem.assemble_reaction_residual(mesh, ones, np.full(mesh.num_nodes, c))
    assert r.sum() == pytest.approx(c**3, rel=1e-13)          # unit square
    assert np.allclose(r, c**3 * fem.lumped_mass(mesh), rtol=1e-12)


def test_reaction_jacobian_zero_state(mesh):
    J = fem.assemble_reaction_jacobian(mesh, np.ones(mesh.num_nodes),
                                       np.zeros(mesh.num_nodes))
    assert J.nnz == 0 or np.abs(J.data).max() == 0.0


def test_reaction_jacobian_matches_mass_matrix(mesh):
    ones = np.ones(mesh.num_nodes)
    J = fem.assemble_reaction_jacobian(mesh, ones, ones)
    M = fem.assemble_mass(mesh)
    assert np.abs(J - 3.0 * M).max() < 1e-14


def test_reaction_jacobian_is_residual_derivative(mesh):
    rng = np.random.default_rng(3)
    v = rng.uniform(0, 1, mesh.num_nodes)
    u = rng.normal(size=mesh.num_nodes)
    w = rng.normal(size=mesh.num_nodes)
    w /= np.linalg.norm(w)
    h = 1e-5
    rp = fem.assemble_reaction_residual(mesh, v, u + h * w)
    rm = fem.assemble_reaction_residual(mesh, v, u - h * w)
    jw = fem.assemble_reaction_jacobian(mesh, v, u) @ w
    err = np.linalg.norm((rp - rm) / (2 * h) - jw) / np.linalg.norm(jw)
    assert err < 1e-6


def test_reaction_jacobian_fd_order(mesh):
    # central differences converge at second order until roundoff
    rng = np.random.default_rng(4)
    v = rng.uniform(0, 1, mesh.num_nodes)
    u = rng.normal(size=mesh.num_nodes)
    w = rng.normal(size=mesh.num_nodes)
    jw = fem.assemble_reaction_jacobian(mesh, v, u) @ w

    def err(h):
        rp = fem.assemble_reaction_residual(mesh, v, u + h * w)
        rm = fem.assemble_reaction_residual(mesh, v, u - h * w)
        return np.linalg.norm((rp - rm) / (2 * h) - jw)

    e1, e2 = err(1e-2), err(1e-3)
    assert e2 < e1 / 50.0


def test_sigma_mass_no_edges(mesh):
    labels = _labels_with_edges(mesh, [])
    M = fem.assemble_sigma_mass(mesh, labels)
    assert M.nnz == 0


def _labels_with_edges(mesh, edge_ids):
    from cavfield.geometry import RegionLabels

    edge_ids = np.asarray(edge_ids, dtype=np.int64)
    if edge_ids.size:
        nodes = np.unique(mesh.boundary_edges[edge_ids])
    else:
        nodes = np.empty(0, dtype=np.int64)
    arc = np.arange(nodes.size, dtype=float)
    return RegionLabels(omega1_cells=np.arange(1), omega2_cells=np.arange(1),
                        omega1_nodes=np.arange(1), sigma_edges=edge_ids,
                        sigma_nodes=nodes, sigma_arc=arc, d0=1.0)


def test_sigma_mass_single_edge_exact(mesh):
    labels = _labels_with_edges(mesh, [0])
    a, b = mesh.boundary_edges[0]
    L = np.linalg.norm(mesh.nodes[a] - mesh.nodes[b])
    M = fem.assemble_sigma_mass(mesh, labels)
    u = np.ones(mesh.num_nodes)
    assert u @ (M @ u) == pytest.approx(L, rel=1e-14)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_sigma_mass_positive_semidefinite(seed):
    mesh = geometry.build_structured_mesh(4, 4)
    labels = _labels_with_edges(mesh, [0, 1, 2, 3])
    M = fem.assemble_sigma_mass(mesh, labels)
    u = np.random.default_rng(seed).normal(size=mesh.num_nodes)
    assert u @ (M @ u) >= 0.0


def test_ellipticity_transfer(mesh):
    # lam * delta * |grad w|^2 <= w K w <= Lam * |grad w|^2
    coeff = fem.CoefficientField.constant(mesh, 2.0, 0.3, 1.5)
    rng = np.random.default_rng(5)
    delta = 0.05
    v = rng.uniform(0, 1, mesh.num_nodes)
    K = fem.assemble_weighted_stiffness(mesh, coeff, v, delta)
    K1 = fem.assemble_weighted_stiffness(mesh, fem.CoefficientField.identity(mesh),
                                         np.ones(mesh.num_nodes), 1.0)
    for _ in range(20):
        w = rng.normal(size=mesh.num_nodes)
        dirichlet = w @ (K1 @ w)
        quad = w @ (K @ w)
        assert quad >= coeff.lam * delta * dirichlet - 1e-10
        assert quad <= coeff.Lam * dirichlet + 1e-10


def test_coefficient_field_rejects_bad_bounds(mesh):
    mats = np.broadcast_to(np.diag([1.0, 3.0]), (mesh.num_cells, 2, 2)).copy()
    with pytest.raises(ValueError):
        fem.CoefficientField(mats, 1.0, 2.0)   # top eigenvalue 3 > Lam
    with pytest.raises(ValueError):
        fem.CoefficientField(mats, -1.0, 3.0)


def test_sinusoidal_coefficient_within_bounds(mesh):
    co = fem.CoefficientField.sinusoidal(mesh, amplitude=0.25)
    assert co.lam == 0.75 and co.Lam == 1.25


def test_solve_spd_identity_one_iteration():
    A = sp.identity(5, format="csr")
    b = np.arange(1.0, 6.0)
    x = fem.solve_spd(A, b)
    assert np.array_equal(x, b)


def test_solve_spd_two_by_two_exact():
    A = sp.csr_matrix(np.array([[4.0, 1.0], [1.0, 3.0]]))
    x = fem.solve_spd(A, np.array([1.0, 2.0]), tol=1e-14)
    assert np.allclose(x, [1.0 / 11.0, 7.0 / 11.0], atol=1e-12)


def test_solve_spd_rejects_indefinite():
    A = sp.csr_matrix(np.array([[1.0, 2.0], [2.0, 1.0]]))  # eigenvalues 3, -1
    with pytest.raises(NotSpdError):
        fem.solve_spd(A, np.array([1.0, 1.0]))


def test_solve_spd_rejects_nonpositive_diagonal():
    A = sp.csr_matrix(np.array([[0.0, 1.0], [1.0, 1.0]]))
    with pytest.raises(NotSpdError):
        fem.solve_spd(A, np.array([1.0, 1.0]))


def test_solve_spd_budget_exhaustion(mesh, coeff):
    ones = np.ones(mesh.num_nodes)
    K = fem.assemble_weighted_stiffness(mesh, coeff, ones, 1.0)
    A = K + 1e-8 * sp.identity(mesh.num_nodes, format="csr")
    b = np.random.default_rng(6).normal(size=mesh.num_nodes)
    with pytest.raises(NoConvergenceError) as err:
        fem.solve_spd(A, b, tol=1e-14, max_iter=2)
    assert "residual" in err.value.diagnostics


def test_solve_spd_zero_rhs():
    A = sp.identity(4, format="csr")
    assert np.all(fem.solve_spd(A, np.zeros(4)) == 0.0)


def test_quadrature_integral_polynomial_exactness(mesh):
    # edge-midpoint rule integrates quadratics exactly
    x = mesh.nodes[:, 0]
    val = fem.quadrature_integral(mesh, np.ones(mesh.num_cells), x, power=2)
    assert val == pytest.approx(1.0 / 3.0, rel=1e-12)


def test_build_source_respects_omega2(mesh):
    spec = geometry.RegionSpec(omega1=(0, 0, 1, 0.25), omega2=(0, 0, 1, 0.15))
    labels = geometry.mark_regions(mesh, spec)
    f = fem.build_source(mesh, labels, 8.0, (0.25, 0.0, 0.75, 0.0625), skirt=0.0625)
    assert f.min() == 0.0 and f.max() == 8.0
    fem.validate_source(mesh, labels, f)
    with pytest.raises(ValueError):
        fem.build_source(mesh, labels, 8.0, (0.25, 0.0, 0.75, 0.5))
    with pytest.raises(ValueError):
        fem.build_source(mesh, labels, -1.0, (0.25, 0.0, 0.75, 0.0625))


def test_source_mass_mesh_independent():
    # nested meshes must sample the same continuum profile
    masses = []
    for n in (16, 32, 64):
        mesh = geometry.build_structured_mesh(n, n)
        spec = geometry.RegionSpec(omega1=(0, 0, 1, 0.25), omega2=(0, 0, 1, 0.15))
        labels = geometry.mark_regions(mesh, spec)
        f = fem.build_source(mesh, labels, 8.0, (0.25, 0.0, 0.75, 0.0625),
                             skirt=0.0625)
        masses.append(fem.assemble_load(mesh, f).sum())
    assert masses[0] == pytest.approx(masses[2], rel=1e-3)
    assert masses[1] == pytest.approx(masses[2], rel=1e-3)
