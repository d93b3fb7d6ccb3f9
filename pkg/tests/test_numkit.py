import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ssmkit import numkit as nk


def kron_sylvester_oracle(A_TT, A_NN, A_TN):
    """Brute-force dense solve of A_TT V - V A_NN = -A_TN via vectorization."""
    n, m = A_TN.shape
    K = np.kron(np.eye(m), A_TT) - np.kron(A_NN.T, np.eye(n))
    v = np.linalg.solve(K, -A_TN.reshape(-1, order="F"))
    return v.reshape(n, m, order="F")


def random_stable(rng, size, lo, hi):
    """Random matrix with eigenvalue real parts shifted into [-hi, -lo]."""
    A = rng.normal(size=(size, size))
    shift = np.max(np.linalg.eigvals(A).real)
    return A - (shift + lo + (hi - lo) * rng.uniform()) * np.eye(size)


class TestPolynomialBasis:
    def test_graded_lex_ordering_2d(self):
        b = nk.polynomial_basis(2, 1, 2)
        assert b.exponents.tolist() == [[1, 0], [0, 1], [2, 0], [1, 1], [0, 2]]

    def test_monomials_example(self):
        b = nk.polynomial_basis(2, 1, 2)
        np.testing.assert_allclose(nk.monomials(np.array([2.0, 3.0]), b), [2, 3, 4, 6, 9])

    def test_linear_identity_case(self):
        b = nk.polynomial_basis(2, 1, 1)
        np.testing.assert_allclose(nk.monomials(np.array([2.0, 3.0]), b), [2, 3])

    def test_degree_block_count(self):
        # C(dim + d - 1, d) entries per degree; C(6, 2) = 15
        assert nk.polynomial_basis(5, 2, 2).size == 15
        from math import comb

        b = nk.polynomial_basis(4, 1, 3)
        degrees = b.exponents.sum(axis=1)
        for d in (1, 2, 3):
            assert int(np.sum(degrees == d)) == comb(4 + d - 1, d)

    def test_degrees_within_range(self):
        b = nk.polynomial_basis(3, 2, 4)
        degs = b.exponents.sum(axis=1)
        assert degs.min() == 2 and degs.max() == 4

    def test_dimension_mismatch(self):
        b = nk.polynomial_basis(3, 1, 2)
        with pytest.raises(ValueError):
            nk.monomials(np.array([1.0, 2.0]), b)

    @given(st.integers(1, 4), st.integers(1, 3), st.floats(0.1, 3.0))
    @settings(max_examples=30, deadline=None)
    def test_scaling_property(self, dim, hi, s):
        # scaling x by s scales the degree-d block by s**d
        rng = np.random.default_rng(dim * 10 + hi)
        b = nk.polynomial_basis(dim, 1, hi)
        x = rng.normal(size=dim)
        base = nk.monomials(x, b)
        scaled = nk.monomials(s * x, b)
        degs = b.exponents.sum(axis=1)
        np.testing.assert_allclose(scaled, base * s**degs, rtol=1e-10, atol=1e-12)

    def test_matrix_evaluation_matches_columns(self):
        rng = np.random.default_rng(3)
        b = nk.polynomial_basis(3, 1, 3)
        X = rng.normal(size=(3, 7))
        F = nk.monomials(X, b)
        for j in range(7):
            np.testing.assert_allclose(F[:, j], nk.monomials(X[:, j], b))

    def test_jacobian_matches_finite_differences(self):
        rng = np.random.default_rng(4)
        b = nk.polynomial_basis(3, 1, 3)
        x = rng.normal(size=3)
        J = nk.monomial_jacobian(x, b)
        h = 1e-7
        for i in range(3):
            e = np.zeros(3)
            e[i] = h
            fd = (nk.monomials(x + e, b) - nk.monomials(x - e, b)) / (2 * h)
            np.testing.assert_allclose(J[:, i], fd, rtol=1e-6, atol=1e-8)


class TestLeastSquares:
    def test_exact_interpolation(self):
        A = np.eye(2)
        B = np.array([[2.0, 0.0], [0.0, 3.0]])
        np.testing.assert_allclose(nk.least_squares(A, B), np.diag([2.0, 3.0]))

    def test_zero_targets(self):
        rng = np.random.default_rng(0)
        A = rng.normal(size=(3, 20))
        np.testing.assert_allclose(nk.least_squares(A, np.zeros((2, 20))), 0.0)

    def test_synthetic_recovery(self):
        rng = np.random.default_rng(1)
        A = rng.normal(size=(3, 50))
        X_true = rng.normal(size=(2, 3))
        X = nk.least_squares(A, X_true @ A)
        assert np.linalg.norm(X - X_true) / np.linalg.norm(X_true) < 1e-10

    def test_rank_deficiency_raises(self):
        A = np.vstack([np.ones((1, 10)), np.ones((1, 10))])
        with pytest.raises(nk.RankDeficiencyError):
            nk.least_squares(A, np.ones((1, 10)))

    def test_ridge_fallback(self):
        A = np.vstack([np.ones((1, 10)), np.ones((1, 10))])
        X = nk.least_squares(A, np.ones((1, 10)), ridge=1e-8)
        assert np.all(np.isfinite(X))

    def test_underdetermined_rejected(self):
        with pytest.raises(ValueError):
            nk.least_squares(np.ones((5, 3)), np.ones((1, 3)))

    def test_nan_rejected(self):
        A = np.ones((1, 3))
        A[0, 0] = np.nan
        with pytest.raises(ValueError):
            nk.least_squares(A, np.ones((1, 3)))


class TestTruncatedSvd:
    def test_diagonal_sign_fix(self):
        V = nk.truncated_svd(np.diag([3.0, 1.0]), 1)
        np.testing.assert_allclose(V, [[1.0], [0.0]])

    def test_constructed_factorization(self):
        rng = np.random.default_rng(2)
        Q, _ = np.linalg.qr(rng.normal(size=(6, 3)))
        W, _ = np.linalg.qr(rng.normal(size=(40, 3)))
        Y = Q @ np.diag([5.0, 2.0, 0.1]) @ W.T
        V = nk.truncated_svd(Y, 2)
        # sine of the largest principal angle against the leading directions
        sin_angle = np.linalg.norm(Q[:, :2] - V @ (V.T @ Q[:, :2]), ord=2)
        assert sin_angle < 1e-12

    def test_orthonormality(self):
        rng = np.random.default_rng(3)
        Y = rng.normal(size=(8, 30))
        V = nk.truncated_svd(Y, 4)
        np.testing.assert_allclose(V.T @ V, np.eye(4), atol=1e-12)

    def test_best_rank_n_approximation(self):
        rng = np.random.default_rng(4)
        Y = rng.normal(size=(6, 12))
        n = 3
        V = nk.truncated_svd(Y, n)
        U, s, Vt = np.linalg.svd(Y, full_matrices=False)
        best = U[:, :n] @ np.diag(s[:n]) @ Vt[:n, :]
        np.testing.assert_allclose(
            np.linalg.norm(Y - V @ V.T @ Y), np.linalg.norm(Y - best), rtol=1e-12
        )

    def test_rank_exceeded_raises(self):
        Y = np.outer(np.arange(4.0), np.ones(5))
        with pytest.raises(nk.RankDeficiencyError):
            nk.truncated_svd(Y, 2)


class TestSylvester:
    def test_scalar_closed_form(self):
        v = nk.sylvester_solve(
            np.array([[-0.2]]), np.array([[-10.0]]), np.array([[1.0]])
        )
        np.testing.assert_allclose(v, -1.0 / 9.8, rtol=1e-12)
        np.testing.assert_allclose(
            v, kron_sylvester_oracle(np.array([[-0.2]]), np.array([[-10.0]]), np.array([[1.0]]))
        )

    def test_zero_forcing(self):
        rng = np.random.default_rng(5)
        A_TT = random_stable(rng, 3, 0.1, 1.0)
        A_NN = random_stable(rng, 4, 10.0, 20.0)
        np.testing.assert_allclose(
            nk.sylvester_solve(A_TT, A_NN, np.zeros((3, 4))), np.zeros((3, 4)), atol=1e-14
        )

    def test_matches_kronecker_oracle(self):
        rng = np.random.default_rng(6)
        A_TT = random_stable(rng, 3, 0.1, 1.0)
        A_NN = random_stable(rng, 5, 10.0, 20.0)
        A_TN = rng.normal(size=(3, 5))
        V = nk.sylvester_solve(A_TT, A_NN, A_TN)
        V_ref = kron_sylvester_oracle(A_TT, A_NN, A_TN)
        assert np.linalg.norm(V - V_ref) / np.linalg.norm(V_ref) < 1e-10

    def test_residual_bound(self):
        rng = np.random.default_rng(7)
        A_TT = random_stable(rng, 4, 0.1, 1.0)
        A_NN = random_stable(rng, 6, 5.0, 9.0)
        A_TN = rng.normal(size=(4, 6))
        V = nk.sylvester_solve(A_TT, A_NN, A_TN)
        res = np.linalg.norm(A_TT @ V - V @ A_NN + A_TN)
        bound = 1e-10 * (np.linalg.norm(A_TT) + np.linalg.norm(A_NN)) * np.linalg.norm(V)
        assert res < bound

    def test_spectral_gap_violation(self):
        A = np.diag([-1.0, -2.0])
        with pytest.raises(nk.SpectralGapViolation):
            nk.sylvester_solve(A, A.copy(), np.ones((2, 2)))


class TestFiniteDifference:
    def test_exact_for_quadratic_interior(self):
        t = np.linspace(0, 1, 101)
        D = nk.finite_difference((t**2)[None, :], t[1] - t[0])
        np.testing.assert_allclose(D[0, 1:-1], 2 * t[1:-1], atol=1e-12)

    def test_exact_for_linear_everywhere(self):
        t = np.linspace(0, 2, 51)
        D = nk.finite_difference((3 * t)[None, :], t[1] - t[0])
        np.testing.assert_allclose(D[0], 3.0, atol=1e-12)

    def test_second_order_on_sine(self):
        dt = 1e-3
        t = np.arange(0, 1 + dt / 2, dt)
        D = nk.finite_difference(np.sin(t)[None, :], dt)
        assert np.abs(D[0] - np.cos(t)).max() < 1e-6

    def test_too_short(self):
        with pytest.raises(ValueError):
            nk.finite_difference(np.ones((1, 2)), 0.1)


class TestDelayEmbed:
    def test_dimensions(self):
        Y = np.arange(30.0).reshape(3, 10)
        E = nk.delay_embed(Y, 3, 0.1)
        assert E.shape == (12, 7)

    def test_identity_for_zero_delays(self):
        Y = np.arange(12.0).reshape(3, 4)
        np.testing.assert_array_equal(nk.delay_embed(Y, 0, 0.1), Y)

    def test_newest_sample_on_top(self):
        Y = np.arange(10.0)[None, :]
        E = nk.delay_embed(Y, 2, 0.1)
        np.testing.assert_allclose(E[:, 0], [2.0, 1.0, 0.0])
        np.testing.assert_allclose(E[:, -1], [9.0, 8.0, 7.0])

    def test_too_short_raises(self):
        with pytest.raises(ValueError):
            nk.delay_embed(np.ones((2, 3)), 3, 0.1)

    @given(st.integers(0, 4), st.integers(1, 3))
    @settings(max_examples=25, deadline=None)
    def test_roundtrip_recovers_trailing_window(self, d, q):
        rng = np.random.default_rng(d * 7 + q)
        N = d + 5
        Y = rng.normal(size=(q, N))
        E = nk.delay_embed(Y, d, 0.01)
        # dropping the delayed blocks recovers the original trailing window
        np.testing.assert_array_equal(E[:q, :], Y[:, d:])


class TestOrthonormalComplement:
    def test_coordinate_axis(self):
        N = nk.orthonormal_complement(np.array([[1.0], [0.0]]))
        np.testing.assert_allclose(np.abs(N), [[0.0], [1.0]], atol=1e-14)
        assert N[1, 0] > 0

    def test_completion_is_orthogonal(self):
        rng = np.random.default_rng(8)
        V, _ = np.linalg.qr(rng.normal(size=(7, 3)))
        N = nk.orthonormal_complement(V)
        W = np.hstack([V, N])
        assert np.linalg.norm(W.T @ W - np.eye(7)) < 1e-12

    def test_random_tall_case(self):
        rng = np.random.default_rng(9)
        V, _ = np.linalg.qr(rng.normal(size=(10, 4)))
        N = nk.orthonormal_complement(V)
        assert N.shape == (10, 6)
        assert np.linalg.norm(N.T @ V) < 1e-12
        assert np.linalg.norm(N.T @ N - np.eye(6)) < 1e-12

    def test_non_orthonormal_rejected(self):
        with pytest.raises(ValueError):
            nk.orthonormal_complement(np.array([[2.0], [0.0]]))
