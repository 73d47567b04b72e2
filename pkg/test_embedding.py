import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from lib.embedding import (UNIT_SQUARE, BoundaryKind, DiscreteBasis, IdentityBasis, Interval,
                           analytic_eigenpairs, boundary_points, eval_embedding, fourier_features,
                           load_discrete, save_discrete)
from lib.errors import CapabilityError, ConfigurationError, FormatError, LookupFailure


def central_diff(f, x, h=1e-5):
    return (f(x + h) - f(x - h)) / (2 * h)


def test_dirichlet_interval_eigenvalues_and_zeros():
    basis = analytic_eigenpairs(Interval(0.0, 2.0), BoundaryKind.DIRICHLET, 4)
    np.testing.assert_allclose(basis.eigenvalues, [(m * np.pi / 2.0) ** 2 for m in range(1, 5)])
    ends = eval_embedding(basis, np.array([0.0, 2.0]), 0).phi
    assert np.max(np.abs(ends)) < 1e-12


def test_neumann_square_ordering():
    basis = analytic_eigenpairs(UNIT_SQUARE, 'neumann', 3)
    np.testing.assert_allclose(basis.eigenvalues, [np.pi ** 2, np.pi ** 2, 2 * np.pi ** 2])
    x = np.array([[0.3, 0.6]])
    phi = eval_embedding(basis, x, 0).phi[0]
    c1, c2 = np.cos(np.pi * 0.3), np.cos(np.pi * 0.6)
    np.testing.assert_allclose(phi, [c1, c2, c1 * c2], atol=1e-14)


def test_periodic_pair_at_origin():
    basis = analytic_eigenpairs(Interval(-20.0, 20.0), 'periodic', 2)
    phi = eval_embedding(basis, np.array([0.0]), 0).phi[0]
    np.testing.assert_allclose(phi, [1.0, 0.0], atol=1e-14)
    np.testing.assert_allclose(basis.eigenvalues, [(2 * np.pi / 40) ** 2] * 2)


def test_periodic_values_match_across_ends():
    basis = analytic_eigenpairs(Interval(-20.0, 20.0), 'periodic', 6)
    emb = eval_embedding(basis, np.array([-20.0, 20.0]), 3)
    np.testing.assert_allclose(emb.phi[0], emb.phi[1], atol=1e-12)
    np.testing.assert_allclose(emb.grad[0], emb.grad[1], atol=1e-12)
    np.testing.assert_allclose(emb.third[0], emb.third[1], atol=1e-12)


def test_constant_mode_never_included():
    for bc in ('neumann', 'periodic'):
        basis = analytic_eigenpairs(UNIT_SQUARE if bc == 'neumann' else Interval(0, 1), bc, 5)
        assert np.all(basis.eigenvalues > 0)


def test_mixed_interval_modes_satisfy_both_ends():
    basis = analytic_eigenpairs(Interval(0.0, 1.0), ('dirichlet', 'neumann'), 3)
    emb = eval_embedding(basis, np.array([0.0, 1.0]), 1)
    assert np.max(np.abs(emb.phi[0])) < 1e-12
    assert np.max(np.abs(emb.grad[1])) < 1e-12
    np.testing.assert_allclose(basis.eigenvalues, [((m - 0.5) * np.pi) ** 2 for m in (1, 2, 3)])


def test_periodic_with_other_kind_is_rejected():
    with pytest.raises(ConfigurationError):
        analytic_eigenpairs(Interval(0.0, 1.0), ('periodic', 'dirichlet'), 2)


@given(st.integers(min_value=0, max_value=1000))
def test_neumann_normal_derivative_vanishes(seed):
    basis = analytic_eigenpairs(UNIT_SQUARE, 'neumann', 8)
    pts, normals, _ = boundary_points(UNIT_SQUARE, 50, seed)
    grad = eval_embedding(basis, pts, 1).grad
    dn = np.einsum('nfd,nd->nf', grad, normals)
    assert np.max(np.abs(dn)) < 1e-12


def test_dirichlet_square_vanishes_on_boundary():
    basis = analytic_eigenpairs(UNIT_SQUARE, 'dirichlet', 10)
    pts, _, _ = boundary_points(UNIT_SQUARE, 50, 0)
    assert np.max(np.abs(eval_embedding(basis, pts, 0).phi)) < 1e-12


@pytest.mark.parametrize('make', [
    lambda: analytic_eigenpairs(Interval(-1.0, 2.0), 'dirichlet', 5),
    lambda: analytic_eigenpairs(Interval(-20.0, 20.0), 'periodic', 4),
    lambda: fourier_features(2.0, 4, 1, seed=3),
])
def test_1d_derivatives_match_finite_differences(make):
    basis = make()
    x = np.linspace(-0.7, 1.3, 9)
    emb = eval_embedding(basis, x, 3)
    phi = lambda y: eval_embedding(basis, y, 0).phi
    d1 = lambda y: eval_embedding(basis, y, 1).grad[:, :, 0]
    d2 = lambda y: eval_embedding(basis, y, 2).hess[:, :, 0, 0]
    np.testing.assert_allclose(emb.grad[:, :, 0], central_diff(phi, x), rtol=1e-6, atol=1e-8)
    np.testing.assert_allclose(emb.hess[:, :, 0, 0], central_diff(d1, x), rtol=1e-6, atol=1e-8)
    np.testing.assert_allclose(emb.third, central_diff(d2, x), rtol=1e-6, atol=1e-7)


@pytest.mark.parametrize('make', [
    lambda: analytic_eigenpairs(UNIT_SQUARE, 'neumann', 6),
    lambda: analytic_eigenpairs(UNIT_SQUARE, ('dirichlet', 'dirichlet', 'neumann', 'dirichlet'), 6),
    lambda: fourier_features(1.5, 5, 2, seed=1),
])
def test_2d_derivatives_match_finite_differences(make, rng):
    basis = make()
    x = rng.uniform(0.1, 0.9, size=(7, 2))
    emb = eval_embedding(basis, x, 2)
    h = 1e-5
    for l in range(2):
        e = np.zeros(2)
        e[l] = h
        fd_grad = (eval_embedding(basis, x + e, 0).phi - eval_embedding(basis, x - e, 0).phi) / (2 * h)
        np.testing.assert_allclose(emb.grad[:, :, l], fd_grad, rtol=1e-6, atol=1e-8)
        fd_hess = (eval_embedding(basis, x + e, 1).grad - eval_embedding(basis, x - e, 1).grad) / (2 * h)
        np.testing.assert_allclose(emb.hess[:, :, l, :], fd_hess, rtol=1e-6, atol=1e-7)
    np.testing.assert_allclose(emb.hess, emb.hess.transpose(0, 1, 3, 2))


def test_third_derivative_not_available_in_2d():
    basis = analytic_eigenpairs(UNIT_SQUARE, 'dirichlet', 3)
    with pytest.raises(CapabilityError):
        eval_embedding(basis, np.array([[0.5, 0.5]]), 3)


def test_fourier_features_are_seeded_and_doubled():
    a = fourier_features(1.0, 6, 2, seed=5)
    b = fourier_features(1.0, 6, 2, seed=5)
    np.testing.assert_array_equal(a.freq_matrix, b.freq_matrix)
    assert a.n_features == 12
    phi = eval_embedding(a, np.array([[0.2, 0.4]]), 0).phi
    np.testing.assert_allclose(phi[0, :6] ** 2 + phi[0, 6:] ** 2, 1.0)


def test_identity_basis():
    emb = eval_embedding(IdentityBasis(2), np.array([[0.1, 0.2], [0.3, 0.4]]), 2)
    np.testing.assert_array_equal(emb.phi, [[0.1, 0.2], [0.3, 0.4]])
    np.testing.assert_array_equal(emb.grad[0], np.eye(2))
    assert not np.any(emb.hess)


def small_discrete_basis(rng, n_s=6, n_phi=3):
    points = rng.random((n_s, 2))
    hess = rng.normal(size=(n_s, n_phi, 2, 2))
    return DiscreteBasis(points, rng.normal(size=(n_s, n_phi)), rng.normal(size=(n_s, n_phi, 2)),
                         0.5 * (hess + hess.transpose(0, 1, 3, 2)), np.arange(1.0, n_phi + 1),
                         {'mesh': 'unit'})


def test_discrete_basis_file_roundtrip(tmp_path, rng):
    basis = small_discrete_basis(rng)
    path = str(tmp_path / 'basis.ednb')
    save_discrete(basis, path, {'solver_tol': 1e-9})
    loaded = load_discrete(path)
    for name in ('points', 'values', 'grads', 'hessians', 'eigenvalues'):
        np.testing.assert_array_equal(getattr(loaded, name), getattr(basis, name))
    assert loaded.manifest['solver_tol'] == 1e-9
    assert loaded.manifest['n_phi'] == 3


def test_discrete_basis_lookup(rng):
    basis = small_discrete_basis(rng)
    emb = basis.evaluate(basis.points[[4, 1]], 2)
    np.testing.assert_array_equal(emb.phi, basis.values[[4, 1]])
    with pytest.raises(LookupFailure):
        basis.evaluate(np.array([[2.0, 2.0]]), 0)
    with pytest.raises(CapabilityError):
        basis.evaluate(basis.points[:1], 3)


def test_discrete_lookup_ignores_sign_of_zero(rng):
    basis = small_discrete_basis(rng)
    points = basis.points.copy()
    points[2] = [0.0, 0.5]
    basis = DiscreteBasis(points, basis.values, basis.grads, basis.hessians, basis.eigenvalues, {})
    assert basis.index_of(np.array([[-0.0, 0.5]]))[0] == 2
    np.testing.assert_array_equal(basis.evaluate(np.array([[-0.0, 0.5]]), 0).phi, basis.values[[2]])


def test_truncated_file_names_the_field(tmp_path, rng):
    path = str(tmp_path / 'basis.ednb')
    save_discrete(small_discrete_basis(rng), path)
    with open(path, 'rb') as f:
        blob = f.read()
    with open(path, 'wb') as f:
        f.write(blob[:-40])
    with pytest.raises(FormatError) as info:
        load_discrete(path)
    assert info.value.field == 'hessians'


def test_bad_magic_and_missing_file(tmp_path):
    path = str(tmp_path / 'junk.ednb')
    with open(path, 'wb') as f:
        f.write(b'NOPE' + bytes(40))
    with pytest.raises(FormatError) as info:
        load_discrete(path)
    assert info.value.field == 'magic'
    with pytest.raises(ConfigurationError):
        load_discrete(str(tmp_path / 'missing.ednb'))


def test_discrete_basis_shape_mismatch(rng):
    with pytest.raises(FormatError) as info:
        DiscreteBasis(rng.random((4, 2)), rng.random((4, 3)), rng.random((4, 2, 2)),
                      rng.random((4, 3, 2, 2)), np.ones(3))
    assert info.value.field == 'grads'
