import numpy as np
import pandas as pd
import pytest
from scipy.integrate import trapezoid

from lib.embedding import UNIT_SQUARE, DiscreteBasis
from lib.errors import ConfigurationError, FormatError, MetricError
from lib.fem import holes_mesh, laplace_basis
from lib.pde import (KDV_A, KDV_K1, KDV_K2, PARAM_BOX, VelocityField, advdiff_problem, advdiff_rhs, advdiff_u0_jets,
                     cylinder_flow_velocity, embedding_projection_error, frame_to_array, heat_problem, heat_rhs,
                     heat_u0_jets, holes_problem, holes_u0_jets, kdv_exact, kdv_exact_dt, kdv_exact_jets, kdv_mass,
                     kdv_problem, kdv_rhs, mean_solution_deviation, metrics, param_grid, relative_l2_error,
                     solution_frame, static_problem)
from lib.reference import (fd_grid, grid_jets, reference_solver_1d, reference_solver_2d, reference_solver_fem,
                           reference_static_2d, static_residual_norm)


def fd_check(jets_fn, x, key_from, key_to, axis=0, h=1e-5):
    e = np.zeros_like(x)
    e[:, axis] = h
    fd = (jets_fn(x + e)[key_from] - jets_fn(x - e)[key_from]) / (2 * h)
    np.testing.assert_allclose(jets_fn(x)[key_to], fd, rtol=1e-5, atol=1e-6)


# --------------------------------------------------------------------------
# KdV
# --------------------------------------------------------------------------

def test_kdv_interaction_constant():
    assert KDV_A == pytest.approx(0.145898, abs=1e-6)


@pytest.mark.parametrize('t', [0.0, 1.5, 3.0])
def test_kdv_mass(t):
    assert kdv_mass(t) == pytest.approx(2 * (KDV_K1 + KDV_K2), rel=5e-3)
    x = np.linspace(-20.0, 20.0, 40001)
    assert trapezoid(kdv_exact(x, t), x) == pytest.approx(kdv_mass(t), rel=1e-6)


def test_kdv_exact_solution_satisfies_equation():
    x = np.linspace(-20.0, 20.0, 401)
    for t in (0.0, 0.7, 2.5):
        jets = kdv_exact_jets(x, t, 3)
        lhs = kdv_exact_dt(x, t)
        rhs = kdv_rhs(jets, x[:, None], np.zeros((len(x), 0)), t)
        np.testing.assert_allclose(rhs, lhs, atol=1e-8 * np.max(np.abs(lhs)))


def test_kdv_exact_jets_are_derivatives():
    x = np.linspace(-10.0, 10.0, 41)[:, None]
    jets = lambda y: kdv_exact_jets(y[:, 0], 0.4, 3)
    fd_check(jets, x, (), (0,))
    fd_check(jets, x, (0,), (0, 0))
    fd_check(jets, x, (0, 0), (0, 0, 0))
    h = 1e-5
    np.testing.assert_allclose(kdv_exact_dt(x[:, 0], 0.4),
                               (kdv_exact(x[:, 0], 0.4 + h) - kdv_exact(x[:, 0], 0.4 - h)) / (2 * h), atol=1e-6)


def test_kdv_exact_is_finite_far_out():
    u = kdv_exact(np.array([-1e3, 1e3]), 3.0)
    assert np.all(np.isfinite(u)) and np.max(np.abs(u)) < 1e-12


def test_kdv_problem_setup():
    problem = kdv_problem()
    assert problem.T == 3.0 and problem.order == 3 and problem.param_dim == 0
    np.testing.assert_allclose(problem.u0(np.array([0.5])), kdv_exact(np.array([0.5]), 0.0))


# --------------------------------------------------------------------------
# Heat / advection-diffusion / holes
# --------------------------------------------------------------------------

def test_heat_initial_condition_meets_boundary_data(rng):
    alpha = rng.uniform(-0.5, 0.5, (2, 2))
    for a in alpha:
        P = np.broadcast_to(a, (2, 2))
        np.testing.assert_allclose(heat_u0_jets(np.array([[0.0], [1.0]]), P, 0)[()], 1.0, atol=1e-14)


def test_heat_rhs_of_constant_state():
    x = np.linspace(0, 1, 5)[:, None]
    jets = heat_u0_jets(x, np.zeros((5, 2)), 2)
    np.testing.assert_allclose(heat_rhs(jets, x, np.zeros((5, 2)), 0.0), -16.0)


def test_heat_initial_jets(rng):
    x = rng.random((10, 1))
    P = rng.uniform(-0.5, 0.5, (10, 2))
    jets = lambda y: heat_u0_jets(y, P, 2)
    fd_check(jets, x, (), (0,))
    fd_check(jets, x, (0,), (0, 0))


def test_advdiff_rhs_closed_form(rng):
    x = rng.random((8, 2))
    P = np.column_stack([np.full(8, 0.3), np.full(8, -0.2)])
    jets = advdiff_u0_jets(x, P, 2)
    u, ux, uy = jets[()], jets[(0,)], jets[(1,)]
    kappa = 1 + 0.3 * np.sin(2 * np.pi * x[:, 0])
    diffusion = 0.1 * (kappa * (jets[(0, 0)] + jets[(1, 1)]) + 0.6 * np.pi * np.cos(2 * np.pi * x[:, 0]) * ux)
    advection = 4 * u * (np.cos(-0.2 * np.pi) * ux + np.sin(-0.2 * np.pi) * uy)
    np.testing.assert_allclose(advdiff_rhs(jets, x, P, 0.0), diffusion + advection, rtol=1e-12, atol=1e-12)


def test_advdiff_initial_condition_is_neumann(rng):
    s = rng.random(6)
    edges = [np.column_stack([np.zeros(6), s]), np.column_stack([s, np.ones(6)])]
    for axis, pts in enumerate(edges):
        jets = advdiff_u0_jets(pts, np.zeros((6, 2)), 1)
        np.testing.assert_allclose(jets[(axis,)], 0.0, atol=1e-12)
    jets = lambda y: advdiff_u0_jets(y, np.zeros((len(y), 2)), 2)
    x = rng.random((6, 2))
    fd_check(jets, x, (), (1,), axis=1)
    fd_check(jets, x, (0,), (0, 1), axis=1)


def test_holes_blob_peaks_at_its_centre(rng):
    a = rng.uniform(-0.5, 0.5, (5, 2))
    centre = np.column_stack([0.35 + 0.1 * a[:, 0], 0.7 + 0.1 * a[:, 1]])
    np.testing.assert_allclose(holes_u0_jets(centre, a, 0)[()], 1.0)
    assert holes_u0_jets(np.array([[0.35, 0.7]]), np.zeros((1, 0)), 0)[()][0] == 1.0
    jets = lambda y: holes_u0_jets(y, a, 2)
    x = centre + rng.uniform(-0.05, 0.05, centre.shape)
    fd_check(jets, x, (), (0,), h=1e-6)
    fd_check(jets, x, (0,), (0, 0), h=1e-6)
    fd_check(jets, x, (1,), (0, 1), h=1e-6)


def test_cylinder_flow():
    far = cylinder_flow_velocity(np.array([[100.0, 100.0]]))
    np.testing.assert_allclose(far, [[0.0, -1.0]], atol=1e-4)
    ang = np.linspace(0, 2 * np.pi, 17)
    normal = np.column_stack([np.cos(ang), np.sin(ang)])
    w = cylinder_flow_velocity(0.5 + 0.1 * normal, cylinders=((0.5, 0.5, 0.1),))
    np.testing.assert_allclose(np.sum(w * normal, axis=1), 0.0, atol=1e-12)


def small_basis(points):
    n = len(points)
    return DiscreteBasis(points, np.ones((n, 2)), np.zeros((n, 2, 2)), np.zeros((n, 2, 2, 2)), np.array([1.0, 2.0]))


def test_velocity_table(tmp_path, rng):
    points = rng.random((6, 2))
    field = VelocityField.tabulate(points, cylinder_flow_velocity)
    path = str(tmp_path / 'velocity.csv')
    field.to_csv(path)
    loaded = VelocityField.from_csv(path)
    np.testing.assert_array_equal(loaded.at(points[[3, 1]]), field.values[[3, 1]])
    with pytest.raises(ConfigurationError):
        loaded.at(np.array([[2.0, 2.0]]))


def test_velocity_points_must_match_embedding(tmp_path, rng):
    points = rng.random((6, 2))
    path = str(tmp_path / 'velocity.csv')
    VelocityField.tabulate(points[::-1], cylinder_flow_velocity).to_csv(path)
    problem = holes_problem(basis=small_basis(points), velocity_file=path)
    assert problem.name == 'holes-param' and problem.normalization == 'initial'
    VelocityField.tabulate(points + 0.01, cylinder_flow_velocity).to_csv(path)
    with pytest.raises(ConfigurationError):
        holes_problem(basis=small_basis(points), velocity_file=path)
    pd.DataFrame({'x': [0.0], 'y': [0.0]}).to_csv(path, index=False)
    with pytest.raises(FormatError):
        holes_problem(basis=small_basis(points), velocity_file=path)


def test_holes_problem_truncates_basis(rng):
    problem = holes_problem(basis=small_basis(rng.random((4, 2))), alpha_box=None)
    assert problem.name == 'holes' and problem.param_dim == 0
    assert problem.make_basis(1).n_phi == 1 and problem.make_basis(5).n_phi == 2
    with pytest.raises(ConfigurationError):
        holes_problem()


def test_embedding_projection_error(rng):
    phi = rng.normal(size=(20, 3))
    assert embedding_projection_error(phi, phi @ np.array([1.0, -2.0, 0.5])) < 1e-10
    assert embedding_projection_error(phi, rng.normal(size=20)) > 0.1


# --------------------------------------------------------------------------
# Metrics and solution tables
# --------------------------------------------------------------------------

def test_relative_error_example():
    assert relative_l2_error([1, 1, 2], [1, 1, 1]) == pytest.approx(1 / np.sqrt(3))
    assert relative_l2_error([1, 1, 1], [1, 1, 2]) == pytest.approx(1 / np.sqrt(6))
    with pytest.raises(MetricError):
        relative_l2_error([1, 2], [0, 0])


def test_mean_solution_deviation():
    assert mean_solution_deviation([[1.0, 0.0], [3.0, 0.0]]) == pytest.approx(0.5)
    assert mean_solution_deviation([[1.0, 2.0], [1.0, 2.0]]) == 0.0
    with pytest.raises(MetricError):
        mean_solution_deviation([[1.0, 0.0], [-1.0, 0.0]])


def test_metrics_report(rng):
    ref = rng.normal(size=(3, 4, 10))
    report = metrics(ref, ref, times=[0.0, 0.5, 1.0])
    np.testing.assert_array_equal(report.mean_error, 0.0)
    assert report.errors.shape == (3, 4)
    frame = report.to_frame()
    assert list(frame.columns) == ['t', 'eps', 'delta']

    single = metrics(ref[:, 0] + 0.1, ref[:, 0])
    np.testing.assert_array_equal(single.deviation, 0.0)

    # 'initial' divides every time by the t = 0 norm of the same parameter
    scaled = ref.copy()
    scaled[1:] *= 0.01
    report = metrics(scaled + 0.01, scaled, normalization='initial')
    expected = np.linalg.norm(np.full(10, 0.01)) / np.linalg.norm(scaled[0], axis=1)
    np.testing.assert_allclose(report.errors[2], expected)
    with pytest.raises(MetricError):
        metrics(ref[:2], ref)


def test_param_grid():
    grid = param_grid(PARAM_BOX)
    assert grid.shape == (121, 2)
    np.testing.assert_allclose(grid[0], [-0.5, -0.5])
    np.testing.assert_allclose(grid[-1], [0.5, 0.5])
    assert param_grid(()).shape == (1, 0)


def test_solution_table(rng):
    times = np.array([0.0, 0.25])
    x = rng.random((5, 2))
    alphas = param_grid(PARAM_BOX, 2)
    values = rng.normal(size=(2, 4, 5))
    df = solution_frame(times, x, alphas, values)
    assert list(df.columns) == ['t', 'x', 'y', 'alpha1', 'alpha2', 'u'] and len(df) == 40
    np.testing.assert_array_equal(frame_to_array(df.sample(frac=1.0, random_state=0), times, alphas, x), values)
    with pytest.raises(FormatError):
        frame_to_array(df, [0.5], alphas, x)
    with pytest.raises(FormatError):
        frame_to_array(df.drop(columns=['alpha2']), times, alphas, x)


# --------------------------------------------------------------------------
# Reference solvers
# --------------------------------------------------------------------------

def test_kdv_reference_tracks_exact_solution():
    ref = reference_solver_1d(kdv_problem(), 800, 1e-3, [0.0, 0.05])
    x = ref.x[:, 0]
    np.testing.assert_allclose(ref.values[0, 0], kdv_exact(x, 0.0))
    assert relative_l2_error(ref.values[1, 0], kdv_exact(x, 0.05)) < 0.05


def test_heat_reference_keeps_boundary_values():
    ref = reference_solver_1d(heat_problem(), 50, 1e-3, [0.0, 0.01], params=[[0.0, 0.0], [0.3, -0.2]])
    assert ref.values.shape == (2, 2, 51)
    np.testing.assert_allclose(ref.values[:, :, [0, -1]], 1.0)
    # the cubic sink pulls the interior below the boundary value
    assert np.all(ref.values[1, 0, 1:-1] < 1.0)
    with pytest.raises(ConfigurationError):
        reference_solver_1d(heat_problem(), 50, 1e-3, [0.0105])


def test_heat_reference_settles_on_the_steady_bvp():
    problem = heat_problem()
    ref = reference_solver_1d(problem, 100, 0.01, [2.0])
    grid = fd_grid(problem.domain, 100, 'dirichlet', 2)
    u = ref.values[0, 0]
    residual = heat_rhs(grid_jets(grid, u), grid.x, np.zeros((len(u), 2)), 2.0)
    assert np.max(np.abs(residual[1:-1])) < 1e-6
    np.testing.assert_allclose(u, u[::-1], atol=1e-8)
    assert u.min() < 1.0


def test_heat_reference_is_grid_independent():
    problem = heat_problem()
    params = [[0.3, -0.2]]
    coarse = reference_solver_1d(problem, 200, 1e-3, [0.1], params).values[0, 0]
    fine = reference_solver_1d(problem, 400, 1e-3, [0.1], params).values[0, 0][::2]
    assert relative_l2_error(coarse, fine) < 1e-3


def test_advdiff_mass_changes_only_through_the_advective_boundary_flux():
    # Neumann walls: diffusion conserves mass, 4 u u_x moves it across x = 0 and x = 1
    n, dt = 24, 1e-3
    ref = reference_solver_2d(advdiff_problem(), n, dt, [0.02, 0.021])
    u0, u1 = (ref.values[k, 0].reshape(n + 1, n + 1) for k in (0, 1))
    w = np.full(n + 1, 1.0 / n)
    w[[0, -1]] *= 0.5
    mass = lambda u: w @ u @ w
    flux = 2.0 * w @ (u1[-2] * u1[-1] - u1[1] * u1[0])
    assert (mass(u1) - mass(u0)) / dt == pytest.approx(flux, abs=1e-6)

    jets = grid_jets(fd_grid(UNIT_SQUARE, n, 'neumann', 2), u1.ravel())
    lap = (jets[(0, 0)] + jets[(1, 1)]).reshape(n + 1, n + 1)
    assert abs(w @ lap @ w) < 1e-9


def test_static_reference_solves_fd_system():
    problem = static_problem()
    x, u = reference_static_2d(problem, 20)
    grid = fd_grid(UNIT_SQUARE, 20, 'dirichlet', 2)
    np.testing.assert_array_equal(x, grid.x)
    assert static_residual_norm(problem, grid, u) < 1e-8
    np.testing.assert_array_equal(u[grid.fixed], 0.0)
    # div(a grad u) = 1 with zero boundary values: u is negative inside
    assert u.max() <= 1e-12 and u.min() < 0


def test_fem_reference_transports_the_blob_along_minus_w():
    # u_t = D lap(u) + w . grad(u) with w pointing down moves the blob up
    mesh = holes_mesh(0.05)
    basis, _, _ = laplace_basis(mesh, 1, 3)
    problem = holes_problem(basis=basis, alpha_box=None)
    ref = reference_solver_fem(problem, mesh, 0.01, [0.0, 0.1])
    np.testing.assert_array_equal(ref.x, basis.points)
    assert ref.values.shape == (2, 1, mesh.n_nodes)
    u0, u1 = ref.values[0, 0], ref.values[1, 0]
    assert np.all(np.isfinite(u1))
    top = mesh.nodes_with('dirichlet')
    np.testing.assert_array_equal(u1[top], 0.0)
    centroid = lambda u: np.sum(u ** 2 * ref.x[:, 1]) / np.sum(u ** 2)
    assert centroid(u1) > centroid(u0) + 0.03
