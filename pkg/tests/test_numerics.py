import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from implicitda.numerics import (
    NotPositiveDefiniteError,
    RngStream,
    cholesky,
    derive_stream,
    finite_difference_jacobian_det,
    invert_lower,
    log_sum_exp,
    solve_lower,
    solve_upper,
    spd_solve,
)


class TestCholesky:
    def test_hand_example_2x2(self):
        # [[4,2],[2,3]] factors as [[2,0],[1,sqrt(2)]]
        c = cholesky(np.array([[4.0, 2.0], [2.0, 3.0]]))
        assert np.allclose(c, [[2.0, 0.0], [1.0, np.sqrt(2.0)]])

    def test_identity(self):
        assert np.array_equal(cholesky(np.eye(4)), np.eye(4))

    def test_reconstruction_random_spd(self):
        rng = np.random.default_rng(3)
        for n in (1, 2, 5, 12):
            b = rng.standard_normal((n, n))
            a = b @ b.T + n * np.eye(n)
            c = cholesky(a)
            assert np.allclose(c @ c.T, a, atol=1e-10 * np.abs(a).max())
            assert np.allclose(c, np.tril(c))

    def test_indefinite_raises_with_pivot(self):
        with pytest.raises(NotPositiveDefiniteError) as err:
            cholesky(np.array([[1.0, 2.0], [2.0, 1.0]]))
        assert err.value.pivot_index == 1
        assert err.value.pivot_value < 0

    def test_asymmetric_raises(self):
        with pytest.raises(ValueError, match="symmetric"):
            cholesky(np.array([[1.0, 0.5], [0.0, 1.0]]))

    def test_non_square_raises(self):
        with pytest.raises(ValueError, match="square"):
            cholesky(np.zeros((2, 3)))


class TestTriangularSolves:
    def setup_method(self):
        rng = np.random.default_rng(11)
        b = rng.standard_normal((6, 6))
        self.a = b @ b.T + 6 * np.eye(6)
        self.c = cholesky(self.a)
        self.rhs = rng.standard_normal(6)

    def test_solve_lower(self):
        x = solve_lower(self.c, self.rhs)
        assert np.allclose(self.c @ x, self.rhs)

    def test_solve_upper(self):
        x = solve_upper(self.c.T, self.rhs)
        assert np.allclose(self.c.T @ x, self.rhs)

    def test_invert_lower(self):
        inv = invert_lower(self.c)
        assert np.allclose(inv @ self.c, np.eye(6), atol=1e-12)
        assert np.allclose(inv, np.tril(inv))

    def test_spd_solve(self):
        x = spd_solve(self.c, self.rhs)
        assert np.allclose(self.a @ x, self.rhs)


class TestLogSumExp:
    def test_matches_direct_sum(self):
        logs = np.array([-1.0, -2.0, -3.0])
        assert np.isclose(log_sum_exp(logs), np.log(np.exp(logs).sum()))

    def test_handles_large_magnitudes(self):
        assert np.isclose(log_sum_exp(np.array([-1000.0, -1000.0])), -1000.0 + np.log(2.0))

    def test_minus_inf_entries_ignored(self):
        assert np.isclose(log_sum_exp(np.array([-np.inf, 0.0])), 0.0)

    def test_all_minus_inf_raises(self):
        with pytest.raises(ValueError, match="-inf"):
            log_sum_exp(np.array([-np.inf, -np.inf]))

    def test_empty_raises(self):
        with pytest.raises(ValueError, match="empty"):
            log_sum_exp(np.array([]))

    @given(
        st.lists(st.floats(min_value=-50, max_value=50), min_size=1, max_size=20),
        st.floats(min_value=-100, max_value=100),
    )
    @settings(max_examples=60, deadline=None)
    def test_shift_invariance(self, logs, shift):
        logs = np.array(logs)
        assert np.isclose(log_sum_exp(logs + shift), log_sum_exp(logs) + shift, atol=1e-9)


class TestRngStreams:
    def test_same_key_same_sequence(self):
        a = RngStream(7, 42).standard_normal(100)
        b = RngStream(7, 42).standard_normal(100)
        assert np.array_equal(a, b)

    def test_different_streams_differ(self):
        a = RngStream(7, 1).standard_normal(100)
        b = RngStream(7, 2).standard_normal(100)
        assert not np.allclose(a, b)

    def test_derive_stream_label_sensitivity(self):
        a = derive_stream(7, 0, "reference").standard_normal(10)
        b = derive_stream(7, 0, "observations").standard_normal(10)
        c = derive_stream(7, 0, "reference").standard_normal(10)
        assert np.array_equal(a, c)
        assert not np.allclose(a, b)

    def test_derive_stream_int_vs_string_labels_distinct(self):
        a = derive_stream(7, 1).standard_normal(10)
        b = derive_stream(7, "1").standard_normal(10)
        assert not np.allclose(a, b)

    def test_moments(self):
        z = derive_stream(123, "moments").standard_normal(200000)
        assert abs(z.mean()) < 0.01
        assert abs(z.var() - 1.0) < 0.01

    def test_cross_stream_correlation_small(self):
        a = derive_stream(5, "a").standard_normal(100000)
        b = derive_stream(5, "b").standard_normal(100000)
        corr = np.corrcoef(a, b)[0, 1]
        assert abs(corr) < 0.01

    def test_uniform_range(self):
        rng = derive_stream(9, "u")
        u = np.array([rng.uniform() for _ in range(1000)])
        assert np.all((u >= 0.0) & (u < 1.0))
        assert abs(u.mean() - 0.5) < 0.05

    def test_empty_normal_request_raises(self):
        with pytest.raises(ValueError):
            RngStream(1).standard_normal(0)


class TestFiniteDifferenceJacobianDet:
    def test_linear_map(self):
        a = np.array([[2.0, 1.0], [0.5, 3.0]])
        det = finite_difference_jacobian_det(lambda x: a @ x, np.zeros(2), 1e-6)
        assert np.isclose(det, abs(np.linalg.det(a)), rtol=1e-8)

    def test_nonlinear_map(self):
        # map (x, y) -> (x + y^2, y); Jacobian determinant is 1 everywhere
        def f(p):
            return np.array([p[0] + p[1] ** 2, p[1]])

        det = finite_difference_jacobian_det(f, np.array([0.3, -0.7]), 1e-6)
        assert np.isclose(det, 1.0, rtol=1e-7)

    def test_singular_map_gives_zero(self):
        det = finite_difference_jacobian_det(lambda x: np.zeros_like(x), np.ones(3), 1e-6)
        assert det == 0.0
