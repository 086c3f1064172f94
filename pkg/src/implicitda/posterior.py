"""Per-particle posterior functions over trajectory blocks.

For a particle at x_prev with the next observation b after r model steps, the
negative log posterior over the stacked trajectory block X = (X^1, ..., X^r) is

    F(X) = sum_i 1/2 (X^i - R(X^{i-1}))^T (G G^T)^{-1} (X^i - R(X^{i-1}))
         + 1/2 (h(X^r) - b)^T (Q Q^T)^{-1} (h(X^r) - b),

up to an additive constant that cancels against min F everywhere it is used.
The Klauder-Petersen variant doubles the block to hold the stage pairs
(X^{i,*}, X^i).  Gradients and Hessians are assembled analytically from the
model's drift/map Jacobians and Hessian-vector products.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .numerics import NotPositiveDefiniteError, cholesky, invert_lower, spd_solve
from .sde import DiscreteModel, DriftSpec, ObservationModel


class Precision:
    """(B B^T)^{-1} for a noise factor B, with a diagonal fast path."""

    def __init__(self, factor: Optional[np.ndarray] = None, diag: Optional[np.ndarray] = None):
        if diag is not None:
            diag = np.asarray(diag, dtype=float)
            if np.any(diag <= 0):
                raise ValueError("noise factor has a zero diagonal entry; covariance is singular")
            self.diag = 1.0 / diag**2
            self.dense = None
        else:
            factor = np.atleast_2d(np.asarray(factor, dtype=float))
            cov = factor @ factor.T
            try:
                c = cholesky(cov)
            except NotPositiveDefiniteError as exc:
                raise ValueError("noise covariance B B^T is singular") from exc
            c_inv = invert_lower(c)
            self.diag = None
            self.dense = c_inv.T @ c_inv

    def apply(self, v: np.ndarray) -> np.ndarray:
        if self.diag is not None:
            return self.diag * v
        return self.dense @ v

    def quad(self, v: np.ndarray) -> float:
        return float(v @ self.apply(v))

    def matrix(self) -> np.ndarray:
        if self.diag is not None:
            return np.diag(self.diag)
        return self.dense

    def left_multiply(self, a: np.ndarray) -> np.ndarray:
        """W @ a for a matrix a."""
        if self.diag is not None:
            return self.diag[:, None] * a
        return self.dense @ a


def observation_precision(obs: ObservationModel) -> Precision:
    return Precision(factor=obs.noise_factor)


def model_precision(model: DiscreteModel) -> Precision:
    if model.noise_diag is not None:
        return Precision(diag=model.noise_diag)
    return Precision(factor=model.noise_factor)


class MarkovBlockPosterior:
    """F over X = (X^1..X^r) for a one-step model x' = R(x) + G z."""

    def __init__(self, builder: "PosteriorBuilder", x_prev: np.ndarray, b: np.ndarray):
        self.builder = builder
        self.x_prev = np.asarray(x_prev, dtype=float)
        self.b = np.asarray(b, dtype=float)
        self.m = builder.model.dim
        self.r = builder.r
        self.n_block = self.r * self.m
        self.is_quadratic = builder.quadratic
        self._r_prev = builder.model.mapping(self.x_prev)

    def _states(self, x: np.ndarray) -> list[np.ndarray]:
        m = self.m
        return [x[i * m : (i + 1) * m] for i in range(self.r)]

    def final_state(self, x: np.ndarray) -> np.ndarray:
        return x[-self.m :]

    def initial_guess(self) -> np.ndarray:
        """Noise-free model run from x_prev."""
        states = []
        cur = self._r_prev
        for _ in range(self.r):
            states.append(cur)
            cur = self.builder.model.mapping(cur)
        return np.concatenate(states)

    def value(self, x: np.ndarray) -> float:
        bld = self.builder
        states = self._states(x)
        total = 0.0
        prev_map = self._r_prev
        for xi in states:
            total += 0.5 * bld.w_model.quad(xi - prev_map)
            prev_map = bld.model.mapping(xi)
        e = bld.obs.h(states[-1]) - self.b
        total += 0.5 * bld.w_obs.quad(e)
        return total

    def gradient(self, x: np.ndarray) -> np.ndarray:
        bld = self.builder
        states = self._states(x)
        m, r = self.m, self.r
        grad = np.zeros(self.n_block)
        resid = []  # W (X^i - R(X^{i-1}))
        prev_map = self._r_prev
        for xi in states:
            resid.append(bld.w_model.apply(xi - prev_map))
            prev_map = bld.model.mapping(xi)
        for i in range(r):
            g = resid[i].copy()
            if i + 1 < r:
                g -= bld.model.map_jacobian(states[i]).T @ resid[i + 1]
            grad[i * m : (i + 1) * m] = g
        e = bld.obs.h(states[-1]) - self.b
        grad[(r - 1) * m :] += bld.obs.h_jacobian(states[-1]).T @ bld.w_obs.apply(e)
        return grad

    def hessian(self, x: np.ndarray) -> np.ndarray:
        bld = self.builder
        if bld.quadratic:
            return bld.quadratic_hessian.copy()
        states = self._states(x)
        m, r = self.m, self.r
        h = np.zeros((self.n_block, self.n_block))
        w_mat = bld.w_model.matrix()
        resid = []
        prev_map = self._r_prev
        for xi in states:
            resid.append(bld.w_model.apply(xi - prev_map))
            prev_map = bld.model.mapping(xi)
        for i in range(r):
            sl = slice(i * m, (i + 1) * m)
            h[sl, sl] += w_mat
            if i + 1 < r:
                jac = bld.model.map_jacobian(states[i])
                nxt = slice((i + 1) * m, (i + 2) * m)
                wj = bld.w_model.left_multiply(jac)
                h[sl, sl] += jac.T @ wj - bld.model.map_hessian_vp(states[i], resid[i + 1])
                h[sl, nxt] += -wj.T
                h[nxt, sl] += -wj
        last = slice((r - 1) * m, r * m)
        xe = states[-1]
        e = bld.obs.h(xe) - self.b
        hj = bld.obs.h_jacobian(xe)
        h[last, last] += hj.T @ bld.w_obs.left_multiply(hj)
        h[last, last] += bld.obs.h_hessian_vp(xe, bld.w_obs.apply(e))
        return h


class KpPairPosterior:
    """F over the stage pairs (X^{1,*}, X^1, ..., X^{r,*}, X^r) of the KP scheme."""

    def __init__(self, builder: "KpPosteriorBuilder", x_prev: np.ndarray, b: np.ndarray):
        self.builder = builder
        self.x_prev = np.asarray(x_prev, dtype=float)
        self.b = np.asarray(b, dtype=float)
        self.m = builder.drift.dim
        self.r = builder.r
        self.n_block = 2 * self.r * self.m
        self.is_quadratic = False
        self._f_prev = builder.drift.f(self.x_prev)

    def final_state(self, x: np.ndarray) -> np.ndarray:
        return x[-self.m :]

    def _pairs(self, x: np.ndarray):
        m = self.m
        for i in range(self.r):
            yield x[2 * i * m : (2 * i + 1) * m], x[(2 * i + 1) * m : (2 * i + 2) * m]

    def initial_guess(self) -> np.ndarray:
        drift, delta = self.builder.drift, self.builder.delta
        out = np.empty(self.n_block)
        cur, f_cur = self.x_prev, self._f_prev
        m = self.m
        for i in range(self.r):
            star = cur + delta * f_cur
            nxt = cur + 0.5 * delta * (f_cur + drift.f(star))
            out[2 * i * m : (2 * i + 1) * m] = star
            out[(2 * i + 1) * m : (2 * i + 2) * m] = nxt
            cur, f_cur = nxt, drift.f(nxt)
        return out

    def value(self, x: np.ndarray) -> float:
        bld = self.builder
        drift, delta, w = bld.drift, bld.delta, bld.w_scale
        total = 0.0
        prev, f_prev = self.x_prev, self._f_prev
        x_last = None
        for star, nxt in self._pairs(x):
            a = star - prev - delta * f_prev
            c = nxt - prev - 0.5 * delta * (f_prev + drift.f(star))
            total += 0.5 * w * (a @ a + c @ c)
            prev, f_prev = nxt, drift.f(nxt)
            x_last = nxt
        e = bld.obs.h(x_last) - self.b
        total += 0.5 * bld.w_obs.quad(e)
        return total

    def gradient(self, x: np.ndarray) -> np.ndarray:
        bld = self.builder
        drift, delta, w = bld.drift, bld.delta, bld.w_scale
        m, r = self.m, self.r
        grad = np.zeros(self.n_block)
        prev, f_prev, j_prev = self.x_prev, self._f_prev, None
        pairs = list(self._pairs(x))
        # residuals a_i, c_i (scaled by w)
        a_res, c_res = [], []
        for star, nxt in pairs:
            a_res.append(w * (star - prev - delta * f_prev))
            c_res.append(w * (nxt - prev - 0.5 * delta * (f_prev + drift.f(star))))
            prev, f_prev = nxt, drift.f(nxt)
        for i in range(r):
            star, nxt = pairs[i]
            j_star = drift.jacobian(star)
            grad[2 * i * m : (2 * i + 1) * m] = a_res[i] - 0.5 * delta * (j_star.T @ c_res[i])
            g = c_res[i].copy()
            if i + 1 < r:
                j_next = drift.jacobian(nxt)
                g -= a_res[i + 1] + delta * (j_next.T @ a_res[i + 1])
                g -= c_res[i + 1] + 0.5 * delta * (j_next.T @ c_res[i + 1])
            grad[(2 * i + 1) * m : (2 * i + 2) * m] = g
        e = bld.obs.h(pairs[-1][1]) - self.b
        grad[-m:] += bld.obs.h_jacobian(pairs[-1][1]).T @ bld.w_obs.apply(e)
        return grad

    def hessian(self, x: np.ndarray) -> np.ndarray:
        bld = self.builder
        drift, delta, w = bld.drift, bld.delta, bld.w_scale
        m, r = self.m, self.r
        n = self.n_block
        h = np.zeros((n, n))
        eye = np.eye(m)
        pairs = list(self._pairs(x))
        prev, f_prev = self.x_prev, self._f_prev
        a_res, c_res = [], []
        for star, nxt in pairs:
            a_res.append(w * (star - prev - delta * f_prev))
            c_res.append(w * (nxt - prev - 0.5 * delta * (f_prev + drift.f(star))))
            prev, f_prev = nxt, drift.f(nxt)
        for i in range(r):
            star, nxt = pairs[i]
            s_star = slice(2 * i * m, (2 * i + 1) * m)
            s_nxt = slice((2 * i + 1) * m, (2 * i + 2) * m)
            j_star = drift.jacobian(star)
            # residual a_i: J wrt star = I (wrt X_{i-1} handled at i-1 below)
            h[s_star, s_star] += w * eye
            # residual c_i: J wrt nxt = I, wrt star = -(delta/2) J_f(star)
            h[s_nxt, s_nxt] += w * eye
            cross = -0.5 * delta * w * j_star
            h[s_nxt, s_star] += cross
            h[s_star, s_nxt] += cross.T
            h[s_star, s_star] += (0.25 * delta**2 * w) * (j_star.T @ j_star)
            h[s_star, s_star] += -0.5 * delta * drift.hessian_vp(star, c_res[i])
            if i + 1 < r:
                # residuals a_{i+1}, c_{i+1} depend on nxt = X_i
                star2_sl = slice(2 * (i + 1) * m, (2 * (i + 1) + 1) * m)
                nxt2_sl = slice((2 * (i + 1) + 1) * m, (2 * (i + 1) + 2) * m)
                j_next = drift.jacobian(nxt)
                ja = -(eye + delta * j_next)  # d a_{i+1} / d X_i
                jc = -(eye + 0.5 * delta * j_next)  # d c_{i+1} / d X_i
                h[s_nxt, s_nxt] += w * (ja.T @ ja) + w * (jc.T @ jc)
                h[s_nxt, s_nxt] += -delta * drift.hessian_vp(nxt, a_res[i + 1])
                h[s_nxt, s_nxt] += -0.5 * delta * drift.hessian_vp(nxt, c_res[i + 1])
                h[s_nxt, star2_sl] += w * ja.T
                h[star2_sl, s_nxt] += w * ja
                h[s_nxt, nxt2_sl] += w * jc.T
                h[nxt2_sl, s_nxt] += w * jc
                # cross between star2 and X_i through residual c_{i+1}
                j_star2 = drift.jacobian(pairs[i + 1][0])
                block = -0.5 * delta * w * (jc.T @ j_star2).T  # d c/d star2 ^T W  d c/d X_i
                h[star2_sl, s_nxt] += block
                h[s_nxt, star2_sl] += block.T
        last = slice(n - m, n)
        xe = pairs[-1][1]
        e = bld.obs.h(xe) - self.b
        hj = bld.obs.h_jacobian(xe)
        h[last, last] += hj.T @ bld.w_obs.left_multiply(hj)
        h[last, last] += bld.obs.h_hessian_vp(xe, bld.w_obs.apply(e))
        return h


class PosteriorBuilder:
    """Shared, per-scenario assembly for Markov-block posteriors.

    Precision matrices are computed once; when the posterior is exactly
    quadratic (single step to the observation with a linear observation map)
    the constant Hessian and its Cholesky factor are cached here and shared by
    every particle, so the factorization is done off-line.
    """

    def __init__(self, model: DiscreteModel, obs: ObservationModel):
        self.model = model
        self.obs = obs
        self.r = obs.gap
        self.w_model = model_precision(model)
        self.w_obs = observation_precision(obs)
        self.quadratic = self.r == 1 and obs.linear_map is not None
        self.quadratic_hessian = None
        self.quadratic_chol = None
        if self.quadratic:
            a = obs.linear_map
            self.quadratic_hessian = self.w_model.matrix() + a.T @ self.w_obs.left_multiply(a)
            self.quadratic_chol = cholesky(self.quadratic_hessian)

    def build(self, x_prev: np.ndarray, b: np.ndarray) -> MarkovBlockPosterior:
        return MarkovBlockPosterior(self, x_prev, b)


class KpPosteriorBuilder:
    """Builder for Klauder-Petersen pair posteriors (additive scalar noise g)."""

    def __init__(self, drift: DriftSpec, g: float, delta: float, obs: ObservationModel):
        if g <= 0:
            raise ValueError("KP posterior requires positive additive noise g")
        self.drift = drift
        self.g = g
        self.delta = delta
        self.obs = obs
        self.r = obs.gap
        self.w_scale = 1.0 / (delta * g**2)
        self.w_obs = observation_precision(obs)
        self.quadratic = False
        self.quadratic_chol = None

    def build(self, x_prev: np.ndarray, b: np.ndarray) -> KpPairPosterior:
        return KpPairPosterior(self, x_prev, b)


def build_posterior(x_prev, b, model: DiscreteModel, obs: ObservationModel):
    """One-off construction; filtering loops hold a builder to share caches."""
    return PosteriorBuilder(model, obs).build(x_prev, b)
