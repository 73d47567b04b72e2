import numpy as np
import pytest

from lib.errors import ConfigurationError, FormatError, MeshError
from lib.fem import (TriMesh, assemble, assemble_full, fe_function_at, fe_space, holes_mesh, laplace_basis,
                     locate, project_derivative, read_mesh, solve_eigs, square_mesh, write_mesh)

LAMBDA_1 = 2 * np.pi ** 2


def first_eigenvalue(n, order=1):
    K, M = assemble(square_mesh(n), order)
    return solve_eigs(K, M, 1).eigenvalues[0]


def test_first_dirichlet_eigenvalue_of_unit_square():
    assert abs(first_eigenvalue(64) - LAMBDA_1) / LAMBDA_1 < 0.01


def test_p1_eigenvalues_converge_at_second_order():
    errors = [abs(first_eigenvalue(n) - LAMBDA_1) for n in (8, 16, 32)]
    rates = np.log2(np.array(errors[:-1]) / np.array(errors[1:]))
    assert np.all((rates > 1.7) & (rates < 2.3))


def test_p2_is_more_accurate_than_p1():
    assert abs(first_eigenvalue(8, 2) - LAMBDA_1) < 0.1 * abs(first_eigenvalue(8, 1) - LAMBDA_1)


def test_eigenvectors_are_mass_orthonormal():
    basis, space, sol = laplace_basis(square_mesh(16), 1, 6)
    _, M = assemble_full(space)
    gram = sol.coeffs.T @ (M @ sol.coeffs)
    np.testing.assert_allclose(gram, np.eye(6), atol=1e-8)
    assert np.all(np.diff(sol.eigenvalues) >= 0)
    assert basis.n_phi == 6 and basis.n_points == space.mesh.n_nodes


def test_neumann_square_drops_constant_mode():
    _, _, sol = laplace_basis(square_mesh(24, 'neumann'), 1, 3)
    np.testing.assert_allclose(sol.eigenvalues, [np.pi ** 2, np.pi ** 2, 2 * np.pi ** 2], rtol=0.02)


def test_tabulated_first_mode_matches_analytic():
    basis, _, _ = laplace_basis(square_mesh(32), 1, 1)
    x, y = basis.points[:, 0], basis.points[:, 1]
    exact = 2 * np.sin(np.pi * x) * np.sin(np.pi * y)
    np.testing.assert_allclose(basis.values[:, 0], exact, atol=2e-2)
    interior = np.all((basis.points > 0.25) & (basis.points < 0.75), axis=1)
    grad_x = 2 * np.pi * np.cos(np.pi * x) * np.sin(np.pi * y)
    np.testing.assert_allclose(basis.grads[interior, 0, 0], grad_x[interior], atol=0.15)
    hess = basis.hessians[interior, 0]
    np.testing.assert_allclose(hess, hess.transpose(0, 2, 1))
    np.testing.assert_allclose(hess[:, 0, 0] + hess[:, 1, 1], -LAMBDA_1 * exact[interior], atol=4.0)


def test_too_many_modes():
    K, M = assemble(square_mesh(4))
    with pytest.raises(ConfigurationError):
        solve_eigs(K, M, 5)


@pytest.mark.parametrize('order', [1, 2])
def test_fe_function_reproduces_polynomials(order, rng):
    space = fe_space(square_mesh(6), order)
    f = lambda p: p[:, 0] + 2 * p[:, 1] + (order - 1) * p[:, 0] * p[:, 1]
    points = rng.random((30, 2))
    np.testing.assert_allclose(fe_function_at(space, f(space.dof_coords), points), f(points), atol=1e-12)


def test_projected_gradient_of_linear_function_is_exact():
    space = fe_space(square_mesh(8), 1)
    coeffs = 3 * space.dof_coords[:, 0] - space.dof_coords[:, 1]
    np.testing.assert_allclose(project_derivative(space, coeffs, 0), 3.0, atol=1e-10)
    np.testing.assert_allclose(project_derivative(space, coeffs, 1), -1.0, atol=1e-10)


@pytest.mark.parametrize('order', [1, 2])
def test_stiffness_is_symmetric_positive_semidefinite(order):
    K, M = assemble_full(fe_space(holes_mesh(0.05), order))
    K = K.toarray()
    scale = np.abs(K).max()
    assert np.abs(K - K.T).max() < 1e-12 * scale
    assert np.linalg.eigvalsh(0.5 * (K + K.T)).min() > -1e-10 * scale
    # constants are in the kernel
    np.testing.assert_allclose(K @ np.ones(len(K)), 0.0, atol=1e-10 * scale)
    assert np.linalg.eigvalsh(M.toarray()).min() > 0


def test_projected_derivative_is_linear(rng):
    space = fe_space(square_mesh(6), 2)
    a, b = rng.standard_normal((2, space.n_dofs))
    np.testing.assert_allclose(project_derivative(space, 2 * a - 3 * b, 1),
                               2 * project_derivative(space, a, 1) - 3 * project_derivative(space, b, 1),
                               atol=1e-9)


def test_projected_derivative_converges_at_second_order():
    errors = []
    for n in (16, 32, 64):
        space = fe_space(square_mesh(n), 1)
        x = space.dof_coords
        g = project_derivative(space, np.sin(np.pi * x[:, 0]), 0)
        inner = np.all((x > 0.25) & (x < 0.75), axis=1)
        errors.append(np.abs(g - np.pi * np.cos(np.pi * x[:, 0]))[inner].max())
    rates = np.log2(np.array(errors[:-1]) / np.array(errors[1:]))
    assert np.all(rates > 1.7)
    assert errors[-1] < 1e-3


def test_p2_dirichlet_dofs_cover_edge_midpoints():
    space = fe_space(square_mesh(4), 2)
    assert space.n_dofs == 9 ** 2
    coords = space.dof_coords[space.dirichlet_dofs]
    on_boundary = np.min(np.column_stack([coords, 1 - coords]), axis=1) < 1e-12
    assert np.all(on_boundary) and len(coords) == 32


def test_mesh_file_roundtrip(tmp_path):
    mesh = square_mesh(3, {'left': 'dirichlet', 'right': 'neumann', 'bottom': 'neumann', 'top': 'dirichlet'})
    path = str(tmp_path / 'square.mesh')
    write_mesh(mesh, path)
    with open(path, encoding='utf-8') as f:
        assert 'np.' not in f.read()
    loaded = read_mesh(path)
    np.testing.assert_array_equal(loaded.nodes, mesh.nodes)
    np.testing.assert_array_equal(loaded.triangles, mesh.triangles)
    assert loaded.edge_tags == mesh.edge_tags and loaded.tags == mesh.tags
    assert len(loaded.nodes_with('dirichlet')) == 7


def test_malformed_mesh_files(tmp_path):
    path = tmp_path / 'broken.mesh'
    path.write_text('$Nodes\n0 0 0\n1 1 0\n2 0 1\n$Triangles\n0 1 2\n')
    with pytest.raises(FormatError) as info:
        read_mesh(str(path))
    assert info.value.field == 'BoundaryEdges'
    with pytest.raises(ConfigurationError):
        read_mesh(str(tmp_path / 'missing.mesh'))


def test_degenerate_triangle_is_reported():
    nodes = np.array([[0.0, 0.0], [1.0, 0.0], [2.0, 0.0], [0.0, 1.0]])
    mesh = TriMesh(nodes, [[0, 1, 3], [0, 1, 2]], np.zeros((0, 2)), (), {})
    with pytest.raises(MeshError) as info:
        mesh.validate()
    assert info.value.triangle == 1


def test_point_outside_mesh():
    space = fe_space(square_mesh(4))
    cells, bary = locate(space, np.array([[0.3, 0.3], [1.0, 1.0]]))
    np.testing.assert_allclose(bary.sum(axis=1), 1.0)
    with pytest.raises(MeshError):
        locate(space, np.array([[1.5, 0.5]]))


def test_holes_mesh():
    mesh = holes_mesh(0.05)
    assert set(mesh.edge_tags) == {'top', 'wall', 'hole'}
    for cx, cy, r in ((0.35, 0.45, 0.1), (0.65, 0.3, 0.1)):
        assert np.all(np.hypot(mesh.nodes[:, 0] - cx, mesh.nodes[:, 1] - cy) > r - 1e-9)
    top = mesh.nodes[mesh.nodes_with('dirichlet')]
    np.testing.assert_allclose(top[:, 1], 1.0)
