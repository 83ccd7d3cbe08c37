import numpy as np
import pytest
from scipy.stats import multivariate_normal

from cdghmm import decompose, log_density, reconstruct_sigma, reconstruct_sigma_inverse
from cdghmm.cholesky import ModCholPair, log_determinant
from cdghmm.errors import DecompositionError

from conftest import random_spd


def test_identity_decomposes_to_identity():
    pair = decompose(np.eye(3))
    assert np.array_equal(pair.t_mat, np.eye(3))
    assert np.array_equal(pair.d_diag, np.ones(3))


def test_diagonal_input_has_no_cross_terms():
    pair = decompose(np.diag([4.0, 9.0]))
    assert np.array_equal(pair.t_mat, np.eye(2))
    assert np.allclose(pair.d_diag, [4.0, 9.0])


def test_two_by_two_regression_reading():
    # Regressing X2 on X1 under [[1, .5], [.5, 1]] gives slope 0.5 and
    # innovation variance 1 - 0.25 = 0.75; the factor negates the slope.
    sigma = np.array([[1.0, 0.5], [0.5, 1.0]])
    pair = decompose(sigma)
    assert np.allclose(pair.t_mat, [[1.0, 0.0], [-0.5, 1.0]], atol=1e-12)
    assert np.allclose(pair.d_diag, [1.0, 0.75], atol=1e-12)
    residual = pair.t_mat @ sigma @ pair.t_mat.T - pair.d_matrix()
    assert np.max(np.abs(residual)) < 1e-12


def test_reconstruct_inverse_examples():
    assert np.array_equal(
        reconstruct_sigma_inverse(ModCholPair(np.eye(2), np.ones(2))), np.eye(2)
    )
    pair = ModCholPair(np.array([[1.0, 0.0], [-0.5, 1.0]]), np.array([1.0, 0.75]))
    target = np.linalg.inv(np.array([[1.0, 0.5], [0.5, 1.0]]))
    assert np.max(np.abs(reconstruct_sigma_inverse(pair) - target)) < 1e-10
    pair = ModCholPair(np.eye(2), np.array([4.0, 9.0]))
    assert np.allclose(reconstruct_sigma_inverse(pair), np.diag([0.25, 1.0 / 9.0]))


def test_round_trip_random_spd():
    rng = np.random.default_rng(42)
    for _ in range(50):
        p = int(rng.integers(1, 9))
        sigma = random_spd(rng, p)
        pair = decompose(sigma)
        inv = np.linalg.inv(sigma)
        rel = np.max(np.abs(reconstruct_sigma_inverse(pair) - inv)) / np.max(np.abs(inv))
        assert rel < 1e-8
        assert np.max(np.abs(reconstruct_sigma(pair) - sigma)) < 1e-8
        residual = pair.t_mat @ sigma @ pair.t_mat.T - pair.d_matrix()
        assert np.max(np.abs(residual)) < 1e-10
        _, logdet = np.linalg.slogdet(sigma)
        assert abs(log_determinant(pair) - logdet) < 1e-10


def test_rows_match_least_squares_regressions():
    # Sub-diagonal of row r must equal the negated coefficients of the
    # least-squares regression of X_r on X_1..X_{r-1}.
    rho = 0.6
    p = 5
    sigma = rho ** np.abs(np.subtract.outer(np.arange(p), np.arange(p)))
    pair = decompose(sigma)
    for r in range(1, p):
        coef = np.linalg.solve(sigma[:r, :r], sigma[r, :r])
        assert np.allclose(pair.t_mat[r, :r], -coef, atol=1e-12)
    # AR(1) structure: only the lag-1 coefficient is nonzero.
    assert np.allclose(np.diag(pair.t_mat, k=-1), -rho, atol=1e-12)
    lower_rest = np.tril(pair.t_mat, k=-2)
    assert np.max(np.abs(lower_rest)) < 1e-12


def test_non_spd_rejected_with_minor_index():
    with pytest.raises(DecompositionError) as info:
        decompose(np.array([[1.0, 2.0], [2.0, 1.0]]))
    assert info.value.minor == 2
    assert "order 2" in str(info.value)
    with pytest.raises(DecompositionError) as info:
        decompose(np.array([[-1.0, 0.0], [0.0, 1.0]]))
    assert info.value.minor == 1


def test_asymmetric_rejected():
    with pytest.raises(DecompositionError):
        decompose(np.array([[1.0, 0.5], [0.2, 1.0]]))


def test_log_density_standard_normal_at_mode():
    pair = ModCholPair(np.eye(1), np.ones(1))
    value = log_density(np.zeros(1), np.zeros(1), pair)
    assert abs(value - (-0.5 * np.log(2 * np.pi))) < 1e-12


def test_log_density_unit_offset():
    pair = ModCholPair(np.eye(2), np.ones(2))
    value = log_density(np.array([1.0, 0.0]), np.zeros(2), pair)
    assert abs(value - (-np.log(2 * np.pi) - 0.5)) < 1e-12


def test_log_density_matches_dense_reference():
    sigma = np.array([[1.0, 0.5], [0.5, 1.0]])
    pair = decompose(sigma)
    x = np.array([1.0, 1.0])
    ref = multivariate_normal(mean=np.zeros(2), cov=sigma).logpdf(x)
    assert abs(log_density(x, np.zeros(2), pair) - ref) < 1e-10


def test_log_density_broadcasts():
    rng = np.random.default_rng(0)
    sigma = random_spd(rng, 3)
    pair = decompose(sigma)
    xs = rng.standard_normal((7, 3))
    mu = rng.standard_normal(3)
    ref = multivariate_normal(mean=mu, cov=sigma).logpdf(xs)
    assert np.allclose(log_density(xs, mu, pair), ref, atol=1e-10)
