import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, strategies as st

from mesh_fem import (Field, SensorGrid, StructuredGrid, adjoint_of_observe, assemble,
                      boundary_source, build_box_mesh, field_coordinates, observe, regular_sensor_grid,
                      solve_state)


def test_node_count_and_numbering(tiny_mesh):
    assert tiny_mesh.n_nodes == 4 * 4 * 2
    assert tiny_mesh.n_bottom == 16
    coords = tiny_mesh.node_coordinates
    # x fastest, then y, then z
    np.testing.assert_allclose(coords[1], [1.0 / 3.0, 0.0, 0.0])
    np.testing.assert_allclose(coords[4], [0.0, 1.0 / 3.0, 0.0])
    np.testing.assert_allclose(coords[16], [0.0, 0.0, 0.01])


def test_face_tag_counts(mesh):
    counts = mesh.face_tag_counts()
    assert counts['R'] == 16
    assert counts['N'] == 16
    assert counts['D'] == 2 * 4 * 2 + 2 * 4 * 2


def test_bottom_face_nodes_lie_at_z0(mesh):
    coords = mesh.node_coordinates
    np.testing.assert_array_equal(coords[mesh.faces['bottom'].nodes, 2], 0.0)
    np.testing.assert_allclose(coords[mesh.faces['top'].nodes, 2], mesh.Lz)


def test_mass_integrates_volume(mesh):
    ones = np.ones(mesh.n_nodes)
    assert ones @ (mesh.M_vol @ ones) == pytest.approx(0.01, rel=1e-12)
    b = np.ones(mesh.n_bottom)
    assert b @ (mesh.M_bdry @ b) == pytest.approx(1.0, rel=1e-12)


def test_stiffness_annihilates_constants(mesh):
    K = mesh.volume.stiffness()
    np.testing.assert_allclose(K @ np.ones(mesh.n_nodes), 0.0, atol=1e-10)


def test_stiffness_reproduces_gradient_energy(mesh):
    # u = x has energy int |grad u|^2 = volume
    x = mesh.node_coordinates[:, 0]
    K = mesh.volume.stiffness()
    assert x @ (K @ x) == pytest.approx(0.01, rel=1e-10)


@given(st.integers(1, 4), st.integers(1, 4))
def test_sqrt_mass_factors_mass(nx, ny):
    grid = StructuredGrid((nx, ny), (1.0, 2.0))
    G = grid.sqrt_mass()
    np.testing.assert_allclose((G @ G.T).toarray(), grid.mass().toarray(), atol=1e-14)


def test_boundary_mass_integrates_surface():
    grid = StructuredGrid((2, 3, 1), (1.0, 1.0, 0.5))
    ones = np.ones(grid.n_nodes)
    area = 2 * (1.0 * 1.0) + 2 * (1.0 * 0.5) + 2 * (1.0 * 0.5)
    assert ones @ (grid.boundary_mass() @ ones) == pytest.approx(area, rel=1e-12)


def test_boundary_facets_need_two_dimensions():
    with pytest.raises(ValueError):
        list(StructuredGrid((3,), (1.0,)).boundary_facets())


@pytest.mark.parametrize('shape', [(1, 4, 2), (4, 1, 2), (4, 4, 0)])
def test_build_box_mesh_rejects_degenerate_shapes(shape):
    with pytest.raises(ValueError):
        build_box_mesh(*shape)


def test_state_vanishes_on_dirichlet_faces(mesh):
    system = assemble(mesh, np.zeros(mesh.n_nodes), np.zeros(mesh.n_bottom))
    u = solve_state(system)
    assert u.support == 'volume'
    np.testing.assert_array_equal(u.values[mesh.dirichlet_dofs], 0.0)
    load = mesh.neumann_load(lambda x, y: np.ones_like(x)) * mesh.free_mask
    assert load @ system.solve(load) > 0.0


def test_assembled_operator_is_symmetric(mesh):
    system = assemble(mesh, np.full(mesh.n_nodes, 0.3), np.full(mesh.n_bottom, -0.2))
    assert system.operator.symmetry_error() < 1e-12
    assert system.K.symmetry_error() < 1e-12


def test_larger_robin_coefficient_lowers_compliance(mesh):
    xi = np.zeros(mesh.n_nodes)
    f = mesh.neumann_load(lambda x, y: np.ones_like(x)) * mesh.free_mask
    warm = assemble(mesh, xi, np.full(mesh.n_bottom, -1.0)).solve(f)
    cool = assemble(mesh, xi, np.full(mesh.n_bottom, 1.0)).solve(f)
    assert f @ cool < f @ warm


def test_robin_derivative_matches_finite_difference(mesh):
    rng = np.random.default_rng(0)
    m = 0.3 * rng.standard_normal(mesh.n_bottom)
    dm = rng.standard_normal(mesh.n_bottom)
    u = rng.standard_normal(mesh.n_nodes)
    h = 1e-6
    R = lambda mm: assemble(mesh, np.zeros(mesh.n_nodes), mm).R.matrix
    fd = ((R(m + h * dm) - R(m - h * dm)) @ u) / (2 * h)
    exact = assemble(mesh, np.zeros(mesh.n_nodes), m).robin_derivative_action(dm, u)
    np.testing.assert_allclose(exact, fd, rtol=1e-6, atol=1e-10)


def test_robin_gradient_is_adjoint_of_derivative(mesh):
    rng = np.random.default_rng(1)
    system = assemble(mesh, np.zeros(mesh.n_nodes), 0.2 * rng.standard_normal(mesh.n_bottom))
    u, p = rng.standard_normal(mesh.n_nodes), rng.standard_normal(mesh.n_nodes)
    dm = rng.standard_normal(mesh.n_bottom)
    lhs = p @ system.robin_derivative_action(dm, u)
    rhs = dm @ system.robin_gradient(u, p)
    assert lhs == pytest.approx(rhs, rel=1e-12)


def test_regular_sensor_grid_layout(mesh):
    sensors = regular_sensor_grid(mesh, per_side=3, margin=0.2)
    assert sensors.n_s == 9
    np.testing.assert_allclose(sensors.points[:3, 0], [0.2, 0.5, 0.8])
    np.testing.assert_allclose(sensors.points[[0, 3, 6], 1], [0.2, 0.5, 0.8])
    np.testing.assert_allclose(sensors.points[:, 2], mesh.Lz)


def test_observe_is_exact_for_trilinear_fields(mesh, sensors):
    coords = mesh.node_coordinates
    u = 1.0 + coords[:, 0] - 2.0 * coords[:, 1] + 3.0 * coords[:, 0] * coords[:, 1]
    pts = sensors.points
    expected = 1.0 + pts[:, 0] - 2.0 * pts[:, 1] + 3.0 * pts[:, 0] * pts[:, 1]
    np.testing.assert_allclose(observe(Field('volume', u), sensors), expected, atol=1e-12)


def test_adjoint_of_observe_is_transpose(mesh, sensors):
    rng = np.random.default_rng(2)
    u = rng.standard_normal(mesh.n_nodes)
    r = rng.standard_normal(sensors.n_s)
    assert observe(u, sensors) @ r == pytest.approx(u @ adjoint_of_observe(r, sensors).values, rel=1e-12)


def test_adjoint_of_observe_checks_length(sensors):
    with pytest.raises(ValueError):
        adjoint_of_observe(np.ones(sensors.n_s + 1), sensors)


@pytest.mark.parametrize('point', [[0.5, 0.5, 0.0], [1.2, 0.5, 0.01], [0.5, 0.5]])
def test_sensor_grid_rejects_bad_points(mesh, point):
    with pytest.raises(ValueError):
        SensorGrid(mesh, np.array([point]))


def test_field_arithmetic_and_support_checks(mesh):
    a = Field.constant(mesh, 'bottom', 1.0)
    b = Field.constant(mesh, 'bottom', 2.0)
    np.testing.assert_array_equal((a + b).values, 3.0)
    np.testing.assert_array_equal((2 * b - a).values, 3.0)
    with pytest.raises(ValueError):
        a + Field.constant(mesh, 'volume', 1.0)
    with pytest.raises(ValueError):
        Field('surface', np.zeros(3))


def test_field_coordinates(mesh):
    assert field_coordinates(mesh, 'volume').shape == (mesh.n_nodes, 3)
    bottom = field_coordinates(mesh, 'bottom')
    assert bottom.shape == (mesh.n_bottom, 3)
    np.testing.assert_array_equal(bottom[:, 2], 0.0)
    with pytest.raises(ValueError):
        field_coordinates(mesh, 'edges')


def test_neumann_load_integrates_flux(mesh):
    load = mesh.neumann_load(lambda x, y: np.ones_like(x))
    assert load.sum() == pytest.approx(1.0, rel=1e-12)
    assert sp.issparse(mesh.M_vol)


def test_constant_log2_conductivity_doubles_stiffness(mesh):
    m = np.zeros(mesh.n_bottom)
    base = assemble(mesh, np.zeros(mesh.n_nodes), m).K.matrix
    doubled = assemble(mesh, np.full(mesh.n_nodes, np.log(2.0)), m).K.matrix
    assert abs(doubled - 2.0 * base).max() <= 1e-12 * abs(base).max()


@pytest.mark.parametrize('m_value', [-30.0, 0.0, 2.0])
@pytest.mark.parametrize('shape', [(3, 3, 1), (4, 4, 2)])
def test_eliminated_operator_is_coercive(shape, m_value):
    mesh = build_box_mesh(*shape)
    rng = np.random.default_rng(6)
    system = assemble(mesh, rng.standard_normal(mesh.n_nodes), m_value + rng.standard_normal(mesh.n_bottom))
    free = mesh.free_mask.astype(bool)
    A = system.operator.matrix.toarray()[np.ix_(free, free)]
    assert np.min(np.linalg.eigvalsh(0.5 * (A + A.T))) > 0.0


def test_state_scales_inversely_with_conductivity_when_robin_vanishes(mesh):
    m = np.full(mesh.n_bottom, -30.0)
    xi = 0.3 * np.random.default_rng(7).standard_normal(mesh.n_nodes)
    u = solve_state(assemble(mesh, xi, m)).values
    assert np.all(np.isfinite(u)) and np.max(np.abs(u)) > 0.0
    for s in (0.5, 4.0):
        scaled = solve_state(assemble(mesh, xi + np.log(s), m)).values
        np.testing.assert_allclose(s * scaled, u, rtol=1e-6, atol=1e-6 * np.max(np.abs(u)))


def test_state_is_linear_in_flux_and_matches_dense_solve(mesh):
    system = assemble(mesh, np.full(mesh.n_nodes, 0.2), np.full(mesh.n_bottom, -0.5))
    u = solve_state(system).values
    u2 = solve_state(system, lambda x, y: 2.0 * boundary_source(x, y)).values
    np.testing.assert_allclose(u2, 2.0 * u, rtol=1e-9, atol=1e-12 * np.max(np.abs(u)))

    free = mesh.free_mask.astype(bool)
    A = system.operator.matrix.toarray()
    rhs = mesh.neumann_load(boundary_source)
    dense = np.zeros(mesh.n_nodes)
    dense[free] = np.linalg.solve(A[np.ix_(free, free)], rhs[free])
    np.testing.assert_allclose(u, dense, rtol=1e-9, atol=1e-12 * np.max(np.abs(dense)))
