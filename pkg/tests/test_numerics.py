"""Unit tests for the linear-algebra and sampling primitives.

Covers the jitter policy of the Cholesky factorization, Gaussian, Wishart and
gamma draws, the direct solver and the matrix-free conjugate gradient solver.
"""

import numpy as np
import pytest
import scipy.sparse
from numpy.testing import assert_allclose

from src.errors import NumericalError
from src.numerics import (
    RngStream,
    cholesky_psd,
    ridge_operator,
    sample_gamma_mu_nu,
    sample_mvnormal,
    sample_normal_wishart,
    sample_rows_with_precision,
    sample_wishart,
    solve_cg,
    solve_direct,
)


@pytest.fixture
def spd_matrix():
    """Create a well-conditioned 3x3 symmetric positive-definite matrix.

    Returns:
        np.ndarray: SPD matrix.
    """
    return np.array([[4.0, 1.0, 0.5], [1.0, 3.0, 0.2], [0.5, 0.2, 2.0]])


def test_rng_stream_is_deterministic():
    """Identical seed, stream and keys give identical draws."""
    a = RngStream(7).generator(1, 2).standard_normal(5)
    b = RngStream(7).generator(1, 2).standard_normal(5)
    assert_allclose(a, b, rtol=0, atol=0)


@pytest.mark.parametrize(
    "left,right",
    [
        ((7, 0, (1,)), (7, 0, (2,))),
        ((7, 0, (1,)), (8, 0, (1,))),
        ((7, 0, (1,)), (7, 1, (1,))),
    ],
)
def test_rng_stream_substreams_differ(left, right):
    """Changing seed, stream or key changes the draws."""
    a = RngStream(left[0], left[1]).generator(*left[2]).standard_normal(5)
    b = RngStream(right[0], right[1]).generator(*right[2]).standard_normal(5)
    assert not np.allclose(a, b)


def test_rng_stream_rejects_negative_seed():
    with pytest.raises(ValueError):
        RngStream(-1)


def test_rng_stream_derive_is_deterministic():
    assert RngStream(3).derive(1, 4) == RngStream(3).derive(1, 4)
    assert RngStream(3).derive(1, 4) != RngStream(3).derive(1, 5)


def test_cholesky_identity():
    factor = cholesky_psd(np.eye(3))
    assert_allclose(factor.lower, np.eye(3))
    assert factor.jitter == 0.0


def test_cholesky_two_by_two():
    """[[4,2],[2,3]] factors exactly as [[2,0],[1,sqrt(2)]]."""
    factor = cholesky_psd(np.array([[4.0, 2.0], [2.0, 3.0]]))
    assert_allclose(factor.lower, [[2.0, 0.0], [1.0, np.sqrt(2.0)]], atol=1e-15)


def test_cholesky_reconstructs(spd_matrix):
    lower = cholesky_psd(spd_matrix).lower
    assert_allclose(lower @ lower.T, spd_matrix, atol=1e-12)


def test_cholesky_zero_matrix_uses_smallest_jitter():
    """A zero matrix has trace 0, so jitter starts from a unit base."""
    jitters = []
    factor = cholesky_psd(np.zeros((2, 2)), on_jitter=jitters.append)
    assert factor.jitter == pytest.approx(1e-10)
    assert_allclose(np.diag(factor.lower), np.sqrt(1e-10) * np.ones(2))
    assert jitters == [pytest.approx(1e-10)]


def test_cholesky_jitter_logs_warning(mocker):
    mock_logger = mocker.patch("src.numerics.logger")
    cholesky_psd(np.zeros((2, 2)))
    mock_logger.warning.assert_called_once()


def test_cholesky_rank_deficient_gets_small_jitter():
    a = np.array([[1.0, 1.0], [1.0, 1.0]])
    factor = cholesky_psd(a)
    assert 0 < factor.jitter <= 1e-6
    assert_allclose(factor.lower @ factor.lower.T, a + factor.jitter * np.eye(2), atol=1e-12)


def test_cholesky_indefinite_raises():
    with pytest.raises(NumericalError):
        cholesky_psd(np.array([[1.0, 2.0], [2.0, 0.0]]))


def test_cholesky_asymmetric_raises():
    with pytest.raises(NumericalError, match="symmetric"):
        cholesky_psd(np.array([[1.0, 0.5], [0.0, 1.0]]))


def test_mvnormal_moments(spd_matrix):
    """Empirical mean and covariance of N(m, P^-1) over many draws."""
    rng = np.random.default_rng(0)
    mean = np.array([1.0, -2.0, 0.5])
    draws = np.array([sample_mvnormal(mean, spd_matrix, rng) for _ in range(20000)])
    assert_allclose(draws.mean(axis=0), mean, atol=0.03)
    assert_allclose(np.cov(draws.T), np.linalg.inv(spd_matrix), atol=0.01)


def test_mvnormal_dimension_mismatch():
    with pytest.raises(NumericalError):
        sample_mvnormal(np.zeros(2), np.eye(3), np.random.default_rng(0))


def test_mvnormal_indefinite_precision_raises():
    with pytest.raises(NumericalError):
        sample_mvnormal(np.zeros(2), np.array([[1.0, 2.0], [2.0, 1.0]]), np.random.default_rng(0))


@pytest.mark.parametrize(
    "precision",
    [np.array([[1.0, 0.0], [0.0, 0.0]]), np.zeros((2, 2))],
)
def test_mvnormal_zero_row_precision_raises(precision, mocker):
    mocker.patch("src.numerics.logger")
    with pytest.raises(NumericalError, match="nonpositive diagonal"):
        sample_mvnormal(np.zeros(2), precision, np.random.default_rng(0))


def test_rows_with_precision_covariance(spd_matrix):
    rows = sample_rows_with_precision(spd_matrix, 40000, np.random.default_rng(1))
    assert rows.shape == (40000, 3)
    assert_allclose(np.cov(rows.T), np.linalg.inv(spd_matrix), atol=0.01)


def test_rows_with_zero_row_precision_raises():
    with pytest.raises(NumericalError):
        sample_rows_with_precision(np.diag([2.0, 0.0, 1.0]), 5, np.random.default_rng(0))


def test_wishart_mean(spd_matrix):
    """E[W(S, nu)] = nu * S."""
    rng = np.random.default_rng(2)
    scale = np.linalg.inv(spd_matrix)
    draws = np.array([sample_wishart(scale, 6.0, rng) for _ in range(20000)])
    assert_allclose(draws.mean(axis=0), 6.0 * scale, rtol=0.03, atol=0.01)


def test_wishart_draw_is_symmetric_pd(spd_matrix):
    draw = sample_wishart(spd_matrix, 3.0, np.random.default_rng(3))
    assert_allclose(draw, draw.T)
    assert np.all(np.linalg.eigvalsh(draw) > 0)


def test_wishart_rejects_small_nu():
    with pytest.raises(NumericalError):
        sample_wishart(np.eye(3), 2.0, np.random.default_rng(0))


def test_normal_wishart_mean_of_mu():
    rng = np.random.default_rng(4)
    mu0 = np.array([0.5, -1.0])
    draws = [sample_normal_wishart(mu0, 2.0, np.eye(2), 4.0, rng)[0] for _ in range(10000)]
    assert_allclose(np.mean(draws, axis=0), mu0, atol=0.03)


def test_normal_wishart_large_beta0_concentrates_mu():
    """With beta0 = 1e6 the mean draws sit on mu0."""
    rng = np.random.default_rng(12)
    mu0 = np.array([0.3, -0.7])
    draws = np.array([sample_normal_wishart(mu0, 1e6, np.eye(2), 10.0, rng)[0] for _ in range(1000)])
    assert np.max(np.abs(draws - mu0)) < 0.01


def test_normal_wishart_rejects_nonpositive_beta0():
    with pytest.raises(NumericalError):
        sample_normal_wishart(np.zeros(2), 0.0, np.eye(2), 2.0, np.random.default_rng(0))


@pytest.mark.parametrize("mu,nu", [(1.0, 1.0), (7.0, 13.0), (0.2, 50.0)])
def test_gamma_mean_equals_mu(mu, nu):
    draws = sample_gamma_mu_nu(mu, nu, np.random.default_rng(5), size=1000000)
    assert np.mean(draws) == pytest.approx(mu, rel=0.01)


def test_gamma_variance():
    """Shape nu/2 and scale 2 mu / nu give variance 2 mu^2 / nu."""
    draws = sample_gamma_mu_nu(3.0, 8.0, np.random.default_rng(6), size=200000)
    assert np.var(draws) == pytest.approx(2 * 9.0 / 8.0, rel=0.03)


@pytest.mark.parametrize("mu,nu", [(0.0, 1.0), (1.0, 0.0), (-1.0, 1.0)])
def test_gamma_rejects_invalid_parameters(mu, nu):
    with pytest.raises(NumericalError):
        sample_gamma_mu_nu(mu, nu, np.random.default_rng(0))


def test_gamma_scalar_draw_is_float():
    assert isinstance(sample_gamma_mu_nu(1.0, 1.0, np.random.default_rng(0)), float)


def test_solve_direct_multiple_columns(spd_matrix):
    b = np.arange(6.0).reshape(3, 2)
    assert_allclose(spd_matrix @ solve_direct(spd_matrix, b), b, atol=1e-12)


def test_solve_direct_diagonal_system():
    x = solve_direct(np.array([[2.0, 0.0], [0.0, 4.0]]), np.array([[2.0], [8.0]]))
    assert_allclose(x, [[1.0], [2.0]], atol=1e-14)


def test_solve_direct_large_system_residual():
    rng = np.random.default_rng(11)
    g = rng.standard_normal((50, 50))
    a = g @ g.T + 50 * np.eye(50)
    b = rng.standard_normal((50, 5))
    x = solve_direct(a, b)
    residual = np.linalg.norm(a @ x - b, axis=0) / np.linalg.norm(b, axis=0)
    assert np.all(residual <= 1e-10)


def test_solve_direct_shape_mismatch(spd_matrix):
    with pytest.raises(NumericalError):
        solve_direct(spd_matrix, np.ones(4))


def test_ridge_operator_matches_dense():
    rng = np.random.default_rng(7)
    x = rng.standard_normal((8, 4))
    v = rng.standard_normal(4)
    expected = (x.T @ x + 0.3 * np.eye(4)) @ v
    assert_allclose(ridge_operator(x, 0.3)(v), expected, atol=1e-12)
    assert_allclose(ridge_operator(scipy.sparse.csr_matrix(x), 0.3)(v), expected, atol=1e-12)


def test_cg_converges_to_direct_solution():
    rng = np.random.default_rng(8)
    x = rng.standard_normal((60, 20))
    b = rng.standard_normal(20)
    result = solve_cg(ridge_operator(x, 0.5), b, tol=1e-12)
    expected = np.linalg.solve(x.T @ x + 0.5 * np.eye(20), b)
    assert result.converged
    assert 0 < result.iterations <= 20
    assert result.residual <= 1e-12
    assert_allclose(result.x, expected, rtol=1e-9)


def test_cg_converging_on_last_allowed_iteration_is_converged():
    """The default cap is F, and CG on an F-dimensional system finishes in F steps."""
    rng = np.random.default_rng(10)
    x = rng.standard_normal((10, 3))
    b = rng.standard_normal(3)
    result = solve_cg(ridge_operator(x, 1.0), b)
    assert result.iterations <= 3
    assert result.residual <= 1e-6
    assert result.converged
    assert_allclose(result.x, np.linalg.solve(x.T @ x + np.eye(3), b), rtol=1e-6)


def test_cg_identity_operator_one_iteration():
    b = np.array([3.0, -1.0, 2.5, 0.5])
    result = solve_cg(lambda v: v, b)
    assert result.iterations == 1
    assert result.converged
    assert_allclose(result.x, b, atol=1e-12)


def test_cg_zero_rhs():
    result = solve_cg(ridge_operator(np.eye(3), 1.0), np.zeros(3))
    assert_allclose(result.x, np.zeros(3))
    assert result.residual == 0.0
    assert result.iterations == 0
    assert result.converged


def test_cg_reports_nonconvergence():
    rng = np.random.default_rng(9)
    x = rng.standard_normal((100, 50))
    result = solve_cg(ridge_operator(x, 1e-3), rng.standard_normal(50), tol=1e-14, maxiter=2)
    assert not result.converged
    assert result.iterations == 2
    assert result.residual > 1e-14


def test_cg_rejects_nonpositive_tol():
    with pytest.raises(NumericalError):
        solve_cg(ridge_operator(np.eye(2), 1.0), np.ones(2), tol=0.0)
