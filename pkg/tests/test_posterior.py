import numpy as np
import pytest

from implicitda.lorenz import Lorenz63Params, lorenz_drift_spec
from implicitda.numerics import NotPositiveDefiniteError, cholesky
from implicitda.posterior import (
    KpPosteriorBuilder,
    MarkovBlockPosterior,
    PosteriorBuilder,
    Precision,
    build_posterior,
)
from implicitda.sde import (
    DiscreteModel,
    cubic_observation,
    identity_observation,
    linear_observation,
    selection_observation,
)


def scalar_linear_model(a=0.9, g=0.5):
    return DiscreteModel(
        dim=1,
        mapping=lambda x: a * x,
        map_jacobian=lambda x: np.array([[a]]),
        map_hessian_vp=lambda x, v: np.zeros((1, 1)),
        noise_diag=np.array([g]),
    )


def fd_gradient(posterior, x, eps=1e-6):
    n = x.size
    grad = np.empty(n)
    for j in range(n):
        dx = np.zeros(n)
        dx[j] = eps
        grad[j] = (posterior.value(x + dx) - posterior.value(x - dx)) / (2 * eps)
    return grad


def fd_hessian(posterior, x, eps=1e-5):
    n = x.size
    h = np.empty((n, n))
    for j in range(n):
        dx = np.zeros(n)
        dx[j] = eps
        h[:, j] = (posterior.gradient(x + dx) - posterior.gradient(x - dx)) / (2 * eps)
    return h


class TestPrecision:
    def test_diagonal_fast_path(self):
        p = Precision(diag=np.array([2.0, 0.5]))
        v = np.array([1.0, 4.0])
        # precision of diag noise factor g is 1/g^2
        assert np.allclose(p.apply(v), v / np.array([4.0, 0.25]))
        assert np.isclose(p.quad(v), v @ (v / np.array([4.0, 0.25])))

    def test_dense_factor(self):
        g = np.array([[2.0, 0.0], [1.0, 1.5]])
        p = Precision(factor=g)
        cov = g @ g.T
        v = np.array([0.3, -1.1])
        assert np.allclose(p.apply(v), np.linalg.solve(cov, v))
        assert np.allclose(p.matrix(), np.linalg.inv(cov))

    def test_singular_factor_rejected(self):
        with pytest.raises((ValueError, NotPositiveDefiniteError)):
            Precision(factor=np.zeros((2, 2))).apply(np.zeros(2))


class TestScalarLinearGaussianClosedForm:
    """One-step scalar case has a hand-computable quadratic F.

    With x' = a x0 + g w and b = x + q v,
    F(x) = (x - a x0)^2 / (2 g^2) + (b - x)^2 / (2 q^2),
    minimized at mu = (q^2 a x0 + g^2 b) / (g^2 + q^2) with curvature
    1/g^2 + 1/q^2 and phi = (b - a x0)^2 / (2 (g^2 + q^2)).
    """

    def setup_method(self):
        self.a, self.g, self.q = 0.9, 0.5, 0.3
        self.model = scalar_linear_model(self.a, self.g)
        self.obs = identity_observation(1, self.q)
        self.builder = PosteriorBuilder(self.model, self.obs)

    def test_value_and_minimum(self):
        x0, b = np.array([1.2]), np.array([0.4])
        posterior = self.builder.build(x0, b)
        g2, q2 = self.g**2, self.q**2
        mu = (q2 * self.a * x0[0] + g2 * b[0]) / (g2 + q2)
        phi = (b[0] - self.a * x0[0]) ** 2 / (2.0 * (g2 + q2))
        assert np.isclose(posterior.value(np.array([mu])), phi)
        assert np.isclose(posterior.gradient(np.array([mu]))[0], 0.0, atol=1e-12)
        assert np.isclose(posterior.hessian(np.array([mu]))[0, 0], 1.0 / g2 + 1.0 / q2)

    def test_quadratic_flag_and_cached_hessian(self):
        assert self.builder.quadratic
        assert np.isclose(
            self.builder.quadratic_hessian[0, 0], 1.0 / self.g**2 + 1.0 / self.q**2
        )
        posterior = self.builder.build(np.array([0.0]), np.array([1.0]))
        assert posterior.is_quadratic


class TestMarkovBlockDerivatives:
    def _sks_like_builder(self, r, nonlinear_obs):
        # small nonlinear one-step map with dense curvature
        dim = 4
        rng = np.random.default_rng(17)
        a = rng.standard_normal((dim, dim)) * 0.4

        def mapping(x):
            return a @ x + 0.1 * x**2

        def jac(x):
            return a + np.diag(0.2 * x)

        def hvp(x, v):
            return np.diag(0.2 * v)

        model = DiscreteModel(dim, mapping, jac, hvp, noise_diag=np.full(dim, 0.7))
        p = np.eye(dim) + 0.05 * rng.standard_normal((dim, dim))
        q = 0.6 * np.eye(dim)
        obs = (
            cubic_observation(p, q, gap=r)
            if nonlinear_obs
            else linear_observation(p, q, gap=r)
        )
        return PosteriorBuilder(model, obs)

    @pytest.mark.parametrize("r,nonlinear_obs", [(1, False), (1, True), (3, False), (3, True)])
    def test_gradient_and_hessian_match_finite_differences(self, r, nonlinear_obs):
        builder = self._sks_like_builder(r, nonlinear_obs)
        rng = np.random.default_rng(31)
        posterior = builder.build(0.3 * rng.standard_normal(4), rng.standard_normal(4))
        x = posterior.initial_guess() + 0.1 * rng.standard_normal(posterior.n_block)
        grad = posterior.gradient(x)
        assert np.allclose(grad, fd_gradient(posterior, x), atol=1e-5)
        assert np.allclose(posterior.hessian(x), fd_hessian(posterior, x), atol=1e-5)

    def test_initial_guess_is_noise_free_run(self):
        builder = self._sks_like_builder(3, False)
        x0 = np.full(4, 0.2)
        posterior = builder.build(x0, np.zeros(4))
        states = []
        cur = builder.model.mapping(x0)
        for _ in range(3):
            states.append(cur)
            cur = builder.model.mapping(cur)
        assert np.allclose(posterior.initial_guess(), np.concatenate(states))

    def test_final_state_slices_last_block(self):
        builder = self._sks_like_builder(3, False)
        posterior = builder.build(np.zeros(4), np.zeros(4))
        x = np.arange(12.0)
        assert np.array_equal(posterior.final_state(x), np.arange(8.0, 12.0))


class TestKpPairPosterior:
    def setup_method(self):
        params = Lorenz63Params()
        self.drift = lorenz_drift_spec(params)
        self.g = params.g
        self.delta = 0.01
        self.x0 = np.array(params.initial_state)

    @pytest.mark.parametrize("gap", [1, 2])
    def test_derivatives_match_finite_differences(self, gap):
        obs = identity_observation(3, np.sqrt(0.1), gap=gap)
        builder = KpPosteriorBuilder(self.drift, self.g, self.delta, obs)
        rng = np.random.default_rng(3)
        posterior = builder.build(self.x0, self.x0 + 0.1 * rng.standard_normal(3))
        assert posterior.n_block == 2 * gap * 3
        x = posterior.initial_guess() + 0.05 * rng.standard_normal(posterior.n_block)
        assert np.allclose(posterior.gradient(x), fd_gradient(posterior, x), rtol=1e-5, atol=1e-5)
        assert np.allclose(posterior.hessian(x), fd_hessian(posterior, x), rtol=1e-4, atol=1e-4)

    def test_value_at_noise_free_pair_is_observation_misfit_only(self):
        obs = identity_observation(3, np.sqrt(0.1), gap=1)
        builder = KpPosteriorBuilder(self.drift, self.g, self.delta, obs)
        f0 = self.drift.f(self.x0)
        x_star = self.x0 + self.delta * f0
        x_next = self.x0 + 0.5 * self.delta * (f0 + self.drift.f(x_star))
        b = x_next.copy()
        posterior = builder.build(self.x0, b)
        assert np.isclose(posterior.value(np.concatenate([x_star, x_next])), 0.0, atol=1e-12)

    def test_rejects_zero_noise(self):
        obs = identity_observation(3, 1.0)
        with pytest.raises(ValueError):
            KpPosteriorBuilder(self.drift, 0.0, self.delta, obs)


class TestSelectionObservation:
    def test_partial_observation_gradient(self):
        model = scalar_linear_model()
        obs3 = selection_observation(3, [0], np.sqrt(0.1))
        assert obs3.obs_dim == 1
        assert np.array_equal(obs3.h(np.array([1.0, 2.0, 3.0])), np.array([1.0]))

    def test_build_posterior_convenience(self):
        model = scalar_linear_model()
        obs = identity_observation(1, 0.3)
        posterior = build_posterior(np.array([0.5]), np.array([0.2]), model, obs)
        assert isinstance(posterior, MarkovBlockPosterior)
