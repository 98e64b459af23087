import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from porodec import femkit as fk
from porodec import meshkit as mk
from porodec import sparsekit as sk
from porodec.models import PoroParams


def reference_triangle():
    return mk.TriMesh(vertices=np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]]),
                      cells=np.array([[0, 1, 2]]), h=1.0)


def unit_params(alpha=0.8):
    return PoroParams(lam=2.0, mu=1.5, kappa_over_nu=(1.0,), inv_M=0.5, alpha=(alpha,))


def test_reference_triangle_stiffness():
    mesh = reference_triangle()
    K = fk.scalar_stiffness(mesh, fk.p1_dofmap(mesh, None), 1.0).toarray()
    assert np.allclose(K, 0.5 * np.array([[2, -1, -1], [-1, 1, 0], [-1, 0, 1]]), rtol=0, atol=1e-15)


def test_reference_triangle_mass():
    mesh = reference_triangle()
    M = fk.mass_matrix(mesh, fk.p1_dofmap(mesh, None)).toarray()
    # exact: |T| / 12 * (1 + delta_ij)
    assert np.allclose(M, (np.ones((3, 3)) + np.eye(3)) / 24)


def test_rigid_translation_in_kernel():
    mesh = mk.unit_square_mesh(4)
    u_map = fk.p1_vector_dofmap(mesh, None)
    K = fk.elasticity_stiffness(mesh, u_map, 2.0, 1.5)
    for comp in range(2):
        u = np.zeros((mesh.n_vertices, 2))
        u[:, comp] = 1.0
        assert np.abs(K @ u.ravel()).max() < 1e-13


def test_rotation_in_kernel():
    mesh = mk.unit_square_mesh(3)
    u_map = fk.p1_vector_dofmap(mesh, None)
    K = fk.elasticity_stiffness(mesh, u_map, 2.0, 1.5)
    x, y = mesh.vertices.T
    assert np.abs(K @ np.stack([-y, x], axis=1).ravel()).max() < 1e-13


@pytest.mark.parametrize("punched", [False, True])
def test_mass_partition_of_unity(punched):
    mesh = mk.unit_square_mesh(8)
    if punched:
        mesh = mk.punch_hole(mesh, (0.5, 0.5), 0.25)
    for dm in (fk.p1_dofmap(mesh, None), fk.p0_dofmap(mesh)):
        M = fk.mass_matrix(mesh, dm, 7.8)
        ones = np.ones(dm.size)
        assert ones @ (M @ ones) == pytest.approx(7.8 * mesh.areas.sum(), rel=1e-12)


def test_divergence_of_linear_field():
    # D (x, 0) = alpha * (1, phi_j) = alpha * M 1
    mesh = mk.unit_square_mesh(4)
    u_map, p_map = fk.p1_vector_dofmap(mesh, None), fk.p1_dofmap(mesh, None)
    D = fk.divergence_coupling(mesh, u_map, p_map, 0.79)
    u = fk.interpolate(mesh, u_map, lambda x, y: (x, 0 * x))
    M = fk.mass_matrix(mesh, p_map)
    assert np.allclose(D @ u, 0.79 * (M @ np.ones(p_map.size)), rtol=0, atol=1e-14)


def test_interior_hat_has_zero_total_divergence():
    mesh = mk.unit_square_mesh(4)
    u_map, p_map = fk.p1_vector_dofmap(mesh, None), fk.p1_dofmap(mesh, None)
    D = fk.divergence_coupling(mesh, u_map, p_map, 1.0)
    centre = int(np.flatnonzero(np.all(np.isclose(mesh.vertices, 0.5), axis=1))[0])
    for comp in range(2):
        col = D.toarray()[:, 2 * centre + comp]
        assert abs(col.sum()) < 1e-15
        assert np.abs(col).max() > 0


def test_zero_alpha_gives_zero_coupling():
    mesh = mk.unit_square_mesh(3)
    D = fk.divergence_coupling(mesh, fk.p1_vector_dofmap(mesh), fk.p1_dofmap(mesh), 0.0)
    assert np.abs(D.toarray()).max() == 0


def test_rt0_reference_divergence():
    mesh = reference_triangle()
    y_map = fk.DofMap(fk.RT0, mesh, np.arange(3), 3)
    q_map = fk.p0_dofmap(mesh)
    scale = np.sqrt(3.75e-4)
    Dh = fk.rt0_divergence(mesh, y_map, q_map, scale).toarray()
    assert np.allclose(np.abs(Dh), scale)
    # direct integration: z_e = s (x - v_k) / (2|T|) has divergence s / |T|
    for e in range(3):
        vec = np.zeros(3)
        vec[e] = 1.0
        div = fk.evaluate_at_points(mesh, y_map, vec, [[0.2, 0.2]], derivative=True)[0]
        assert scale * div * mesh.areas[0] == pytest.approx(Dh[0, e])


def test_rt0_basis_has_unit_flux():
    mesh = reference_triangle()
    y_map = fk.DofMap(fk.RT0, mesh, np.arange(3), 3)
    mids = 0.5 * (mesh.vertices[mesh.edges[:, 0]] + mesh.vertices[mesh.edges[:, 1]])
    normals = mesh.edge_normals() * mesh.edge_lengths()[:, None]
    for e in range(3):
        vec = np.zeros(3)
        vec[e] = 1.0
        # nudge towards the centroid so the point is inside
        pts = mids + 1e-9 * (mesh.centroids[0] - mids)
        z = fk.evaluate_at_points(mesh, y_map, vec, pts)
        flux = (z * normals).sum(axis=1)
        expected = np.zeros(3)
        expected[e] = 1.0
        assert np.allclose(flux, expected, atol=1e-7)


@pytest.mark.parametrize("punched", [False, True])
def test_rt0_columns_sum_to_zero(punched):
    mesh = mk.unit_square_mesh(8)
    if punched:
        mesh = mk.punch_hole(mesh, (0.5, 0.5), 0.25)
    y_map, q_map = fk.rt0_dofmap(mesh), fk.p0_dofmap(mesh)
    forms = fk.assemble_rt0_forms(mesh, y_map, q_map, unit_params())
    assert np.abs(np.ones(q_map.size) @ forms["D_hat"].toarray()).max() < 1e-14


def _assert_spd(A):
    arr = A.toarray()
    assert np.abs(arr - arr.T).max() <= 1e-12 * np.abs(arr).max()
    sk.factorize(A)


@settings(max_examples=10, deadline=None)
@given(st.integers(2, 10), st.booleans(), st.floats(0.0, 10.0), st.floats(0.1, 10.0))
def test_assembled_forms_are_spd(n, punched, lam, mu):
    mesh = mk.unit_square_mesh(2 * n)
    if punched:
        mesh = mk.punch_hole(mesh, (0.5, 0.5), 0.25)
    params = PoroParams(lam=lam, mu=mu, kappa_over_nu=(0.3,), inv_M=2.0, alpha=(0.5,))
    u_map, p_map = fk.p1_vector_dofmap(mesh, "outer"), fk.p1_dofmap(mesh, "outer")
    forms = fk.assemble_p1_forms(mesh, u_map, p_map, params)
    for key in ("K_a", "K_b", "M_c"):
        _assert_spd(forms[key])
    assert forms["D"].shape == (p_map.size, u_map.size)
    _assert_spd(fk.rt0_mass(mesh, fk.rt0_dofmap(mesh)))


def test_dofmap_counts():
    mesh = mk.unit_square_mesh(4)
    dm = fk.p1_dofmap(mesh)
    assert dm.n_free + dm.n_eliminated == dm.n_entities
    assert dm.n_free == 9
    assert fk.p1_vector_dofmap(mesh).size == 18


def test_loads():
    mesh = mk.unit_square_mesh(4)
    dm = fk.p1_dofmap(mesh, None)
    assert np.all(fk.assemble_load(mesh, dm, lambda x, y: 0 * x) == 0)
    ones = fk.assemble_load(mesh, dm, lambda x, y: 1 + 0 * x)
    assert ones.sum() == pytest.approx(1.0, abs=1e-14)
    g = fk.SeparableLoad(ones, lambda t: 10 * np.exp(t), lambda t: 10 * np.exp(t))
    assert np.allclose(g(0.0), 10 * ones)
    f_h, g_h = fk.assemble_loads(mesh, (fk.p1_vector_dofmap(mesh), dm), None, lambda x, y, t: 1 + 0 * x, 0.0)
    assert np.all(f_h == 0) and np.allclose(g_h, ones)


def test_midpoint_rule_exact_for_quadratics():
    mesh = mk.unit_square_mesh(3)
    dm = fk.p0_dofmap(mesh)
    total = fk.assemble_load(mesh, dm, lambda x, y: x * x + x * y).sum()
    assert total == pytest.approx(1 / 3 + 1 / 4, abs=1e-14)


def test_finite_difference_derivative():
    load = fk.VectorLoad(lambda t: np.array([np.sin(t)]))
    assert load.derivative(0.3)[0] == pytest.approx(np.cos(0.3), abs=1e-8)


def test_interpolation():
    mesh = mk.unit_square_mesh(2)
    p1 = fk.p1_dofmap(mesh, None)
    assert np.all(fk.interpolate(mesh, p1, lambda x, y: 0 * x) == 0)
    vals = fk.interpolate(mesh, p1, lambda x, y: x)
    mid = np.flatnonzero(np.isclose(mesh.vertices[:, 0], 0.5))
    assert np.allclose(vals[mid], 0.5)
    tri = reference_triangle()
    assert fk.interpolate(tri, fk.p0_dofmap(tri), lambda x, y: x + y)[0] == pytest.approx(2 / 3)


def test_evaluation():
    mesh = mk.unit_square_mesh(4)
    dm = fk.p1_dofmap(mesh, None)
    vec = np.random.default_rng(0).normal(size=dm.size)
    assert np.allclose(fk.evaluate_at_points(mesh, dm, vec, mesh.vertices), vec)
    p0 = fk.p0_dofmap(mesh)
    cvec = np.arange(p0.size, dtype=float)
    pts = np.array([[0.6, 0.2, 0.2], [0.1, 0.1, 0.8]]) @ mesh.vertices[mesh.cells[5]]
    assert np.allclose(fk.evaluate_at_points(mesh, p0, cvec, pts), 5.0)
    with pytest.raises(mk.MeshError):
        fk.evaluate_at_points(mesh, dm, vec, [[2.0, 0.0]])


def test_evaluation_of_interpolated_bubble():
    mesh = mk.unit_square_mesh(64)
    dm = fk.p1_dofmap(mesh)
    vec = fk.interpolate(mesh, dm, lambda x, y: x * (1 - x) * y * (1 - y))
    assert abs(fk.evaluate_at_points(mesh, dm, vec, [[0.5, 0.5]])[0] - 0.0625) <= 1e-3


def test_projection_reproduces_discrete_function():
    mesh = mk.unit_square_mesh(6)
    dm = fk.p1_dofmap(mesh)
    vec = np.random.default_rng(1).normal(size=dm.size)
    G = fk.evaluate_at_points(mesh, dm, vec, mesh.centroids, derivative=True)

    # quadrature points arrive as (cells, points) arrays, so per-cell gradients broadcast
    def grad(x, y):
        return G[:, 0][:, None] + 0 * x, G[:, 1][:, None] + 0 * x

    proj = fk.elliptic_projection("b", mesh, dm, grad, unit_params())
    assert np.allclose(proj, vec, atol=1e-9)


def test_projection_of_zero():
    mesh = mk.unit_square_mesh(4)
    dm = fk.p1_vector_dofmap(mesh)
    zero = lambda x, y: [[0 * x, 0 * x], [0 * x, 0 * x]]  # noqa: E731
    assert np.all(fk.elliptic_projection("a", mesh, dm, zero, unit_params()) == 0)
