import numpy as np
import pytest

from lib.embedding import UNIT_SQUARE, analytic_eigenpairs, boundary_points
from lib.errors import ConfigurationError
from lib.network import MlpConfig, NetQuery, forward, init_params
from lib.pde import heat_problem, static_problem
from lib.sampling import build_candidates
from lib.train import (AdamConfig, _batches, adam_step, bc_loss, fit_initial, fit_loss, fit_static_residual,
                       static_loss)


def test_adam_zero_gradient_keeps_parameters():
    theta = np.array([1.0, -2.0])
    new, (m, v) = adam_step(theta, np.zeros(2), None, AdamConfig(), 1)
    np.testing.assert_array_equal(new, theta)
    np.testing.assert_array_equal(m, 0.0)


def test_adam_constant_gradient_moves_by_learning_rate():
    cfg = AdamConfig(lr=0.01)
    theta, moments = np.zeros(3), None
    g = np.array([2.0, -0.5, 1e-3])
    for it in range(1, 6):
        theta, moments = adam_step(theta, g, moments, cfg, it)
    np.testing.assert_allclose(theta, -5 * 0.01 * g / (np.abs(g) + cfg.eps), rtol=1e-9)


def test_adam_minimizes_quadratic_bowl():
    cfg = AdamConfig(lr=0.01)
    target = np.array([0.3, -1.2, 2.0])
    theta, moments = np.zeros(3), None
    for it in range(1, 5001):
        theta, moments = adam_step(theta, 2 * (theta - target), moments, cfg, it)
    np.testing.assert_allclose(theta, target, atol=1e-2)


def test_invalid_adam_settings():
    for kwargs in ({'lr': 0.0}, {'beta1': 1.0}, {'iterations': -1}, {'batch_size': 0}):
        with pytest.raises(ConfigurationError):
            AdamConfig(**kwargs)


def test_batches():
    assert next(_batches(50, AdamConfig())) is None
    stream = _batches(10, AdamConfig(batch_size=3, seed=4))
    first = [next(stream) for _ in range(6)]
    assert all(len(b) == 3 for b in first)
    assert len(set(np.concatenate(first[:3]).tolist())) == 9
    again = _batches(10, AdamConfig(batch_size=3, seed=4))
    for b in first:
        np.testing.assert_array_equal(next(again), b)


@pytest.fixture
def heat_fit():
    problem = heat_problem()
    basis = problem.make_basis(2)
    config = MlpConfig.parse('2x8', n_in=4)
    points = build_candidates(problem.domain, problem.param_box, 200, 1, basis, 0)
    return problem, config, points.query


def test_fit_loss_gradient(heat_fit, rng):
    problem, config, query = heat_fit
    theta = init_params(config, 2)
    target = problem.u0(query.x, query.params)
    _, grad = fit_loss(config, theta, query, target, problem.wrapper())
    h = 1e-6
    for i in rng.choice(config.n_params, 5, replace=False):
        e = np.zeros(config.n_params)
        e[i] = h
        fd = (fit_loss(config, theta + e, query, target, problem.wrapper())[0] -
              fit_loss(config, theta - e, query, target, problem.wrapper())[0]) / (2 * h)
        assert grad[i] == pytest.approx(fd, rel=1e-5, abs=1e-8)


def test_initial_fit_reduces_misfit_and_is_deterministic(heat_fit):
    problem, config, query = heat_fit
    cfg = AdamConfig(lr=1e-2, iterations=150, seed=3)
    theta_a, report = fit_initial(config, problem.u0, query, cfg, problem.wrapper())
    theta_b, _ = fit_initial(config, problem.u0, query, cfg, problem.wrapper())
    np.testing.assert_array_equal(theta_a, theta_b)
    assert report.iterations == 150 and not report.aborted
    assert report.final_loss < 0.9 * report.losses[0]
    misfit = forward(config, theta_a, query, problem.wrapper()) - problem.u0(query.x, query.params)
    assert report.rms_misfit == pytest.approx(np.sqrt(np.mean(misfit ** 2)))


def test_train_free_wrapper_cannot_be_fitted(heat_fit):
    problem, config, query = heat_fit
    wrapper = problem.train_free_wrapper(init_params(config, 0))
    with pytest.raises(ConfigurationError):
        fit_initial(config, problem.u0, query, AdamConfig(iterations=1), wrapper)


def test_target_length_must_match(heat_fit):
    problem, config, query = heat_fit
    with pytest.raises(ConfigurationError):
        fit_initial(config, np.zeros(query.n + 1), query, AdamConfig(iterations=1))


def test_non_finite_loss_keeps_last_finite_parameters(heat_fit):
    problem, config, query = heat_fit
    target = problem.u0(query.x, query.params)
    target[7] = np.nan
    theta0 = init_params(config, 0)
    theta, report = fit_initial(config, target, query, AdamConfig(iterations=20), problem.wrapper(), theta0)
    assert report.aborted and report.iterations == 0
    np.testing.assert_array_equal(theta, theta0)


def test_static_residual_fit():
    problem = static_problem()
    basis = analytic_eigenpairs(UNIT_SQUARE, 'dirichlet', 4)
    config = MlpConfig.parse('2x10', n_in=4)
    query = build_candidates(UNIT_SQUARE, (), 300, 2, basis).query
    pts, _, _ = boundary_points(UNIT_SQUARE, 10, seed=0)
    bc_query = NetQuery.build(basis, pts, None, 0)
    theta0 = init_params(config, 1)
    loss0, grad = static_loss(config, theta0, problem, query, bc_query)
    assert loss0 > 0 and grad.shape == (config.n_params,)
    assert bc_loss(config, theta0, bc_query) >= 0
    theta, report = fit_static_residual(config, problem, query, AdamConfig(lr=1e-2, iterations=200), bc_query,
                                         theta=theta0)
    assert report.losses[0] == pytest.approx(loss0)
    assert report.final_loss < loss0
