"""Discrete-time stochastic models, integrators, and observation operators.

Every filtered model is reduced to the one-step form

    x' = R(x) + G z,    z ~ N(0, I),

where ``G`` already absorbs the time step (per-step noise factor).  The
Klauder-Petersen scheme is the exception: its sampled object is the stage pair
(x*, x'), handled by a dedicated posterior builder.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .numerics import RngStream


@dataclass(frozen=True)
class DriftSpec:
    """Continuous drift f(x) with analytic derivatives.

    ``hessian_vp(x, v)`` returns sum_l v_l * d^2 f_l / dx dx (an m x m matrix);
    it feeds the exact Hessian of the per-particle posterior.
    """

    dim: int
    f: Callable[[np.ndarray], np.ndarray]
    jacobian: Callable[[np.ndarray], np.ndarray]
    hessian_vp: Callable[[np.ndarray, np.ndarray], np.ndarray]


@dataclass(frozen=True)
class DiscreteModel:
    """One-step map x' = R(x) + G z with z ~ N(0, I).

    ``noise_diag`` holds the diagonal of G when G is diagonal (None for a full
    matrix in ``noise_factor``).  ``map_hessian_vp(x, v)`` is
    sum_l v_l * d^2 R_l / dx dx.
    """

    dim: int
    mapping: Callable[[np.ndarray], np.ndarray]
    map_jacobian: Callable[[np.ndarray], np.ndarray]
    map_hessian_vp: Callable[[np.ndarray, np.ndarray], np.ndarray]
    noise_diag: Optional[np.ndarray] = None
    noise_factor: Optional[np.ndarray] = None

    def noise_matrix(self) -> np.ndarray:
        if self.noise_diag is not None:
            return np.diag(self.noise_diag)
        return self.noise_factor

    def step(self, x: np.ndarray, rng: RngStream) -> np.ndarray:
        z = rng.standard_normal(self.dim)
        if self.noise_diag is not None:
            return self.mapping(x) + self.noise_diag * z
        return self.mapping(x) + self.noise_factor @ z


def euler_maruyama_step(
    x: np.ndarray, drift: Callable, g: np.ndarray | float, delta: float, rng: RngStream
) -> np.ndarray:
    """Forward Euler: x' = x + delta f(x) + G sqrt(delta) dW."""
    x = np.asarray(x, dtype=float)
    dw = rng.standard_normal(x.size)
    noise = np.sqrt(delta) * (g * dw if np.isscalar(g) or np.ndim(g) <= 1 else g @ dw)
    return x + delta * drift(x) + noise


def kp_step(
    x: np.ndarray, drift: Callable, g: float, delta: float, rng: RngStream
) -> tuple[np.ndarray, np.ndarray]:
    """One Klauder-Petersen step; returns the stage pair (x*, x').

    Two independent noise draws are consumed, one per stage; the pair is the
    object the implicit sampler treats jointly.  Requires additive noise
    (scalar g).
    """
    x = np.asarray(x, dtype=float)
    m = x.size
    sq = g * np.sqrt(delta)
    fx = drift(x)
    x_star = x + delta * fx + sq * rng.standard_normal(m)
    x_next = x + 0.5 * delta * (fx + drift(x_star)) + sq * rng.standard_normal(m)
    return x_star, x_next


def rk4_additive_step(
    x: np.ndarray, drift: Callable, g: float, delta: float, rng: RngStream
) -> np.ndarray:
    """Classical RK4 deterministic step plus additive noise g sqrt(delta) dW."""
    x = np.asarray(x, dtype=float)
    k1 = drift(x)
    k2 = drift(x + 0.5 * delta * k1)
    k3 = drift(x + 0.5 * delta * k2)
    k4 = drift(x + delta * k3)
    x_det = x + (delta / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    return x_det + g * np.sqrt(delta) * rng.standard_normal(x.size)


def rk4_deterministic_map(drift: Callable, delta: float) -> Callable:
    def mapping(x):
        k1 = drift(x)
        k2 = drift(x + 0.5 * delta * k1)
        k3 = drift(x + 0.5 * delta * k2)
        k4 = drift(x + delta * k3)
        return x + (delta / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)

    return mapping


def euler_discrete_model(drift: DriftSpec, g: np.ndarray | float, delta: float) -> DiscreteModel:
    """Forward-Euler model in x' = R(x) + G z form (G = g sqrt(delta))."""
    m = drift.dim
    sq = np.sqrt(delta)
    gd = np.full(m, g * sq) if np.isscalar(g) else np.asarray(g, dtype=float) * sq
    eye = np.eye(m)

    def mapping(x):
        return x + delta * drift.f(x)

    def jac(x):
        return eye + delta * drift.jacobian(x)

    def hvp(x, v):
        return delta * drift.hessian_vp(x, v)

    return DiscreteModel(m, mapping, jac, hvp, noise_diag=gd)


@dataclass(frozen=True)
class ObservationModel:
    """Observation b = h(x) + Q V with V ~ N(0, I), every ``gap`` model steps.

    ``linear_map`` is set when h is linear (h(x) = A x); posterior builders use
    it to recognize quadratic posteriors and cache factorizations.
    """

    obs_dim: int
    h: Callable[[np.ndarray], np.ndarray]
    h_jacobian: Callable[[np.ndarray], np.ndarray]
    h_hessian_vp: Callable[[np.ndarray, np.ndarray], np.ndarray]
    noise_factor: np.ndarray  # Q, k x k (may be diagonal stored dense)
    gap: int = 1
    linear_map: Optional[np.ndarray] = None

    def observe(self, x: np.ndarray, rng: RngStream) -> np.ndarray:
        return self.h(x) + self.noise_factor @ rng.standard_normal(self.obs_dim)


def _zero_hvp_factory(dim: int):
    def hvp(x, v):
        return np.zeros((dim, dim))

    return hvp


def linear_observation(a: np.ndarray, q: np.ndarray, gap: int = 1) -> ObservationModel:
    """h(x) = A x with noise factor Q (identity/selection are special cases)."""
    a = np.atleast_2d(np.asarray(a, dtype=float))
    q = np.atleast_2d(np.asarray(q, dtype=float))
    k, m = a.shape

    return ObservationModel(
        obs_dim=k,
        h=lambda x: a @ x,
        h_jacobian=lambda x: a,
        h_hessian_vp=_zero_hvp_factory(m),
        noise_factor=q,
        gap=gap,
        linear_map=a,
    )


def identity_observation(dim: int, q_scale: float, gap: int = 1) -> ObservationModel:
    return linear_observation(np.eye(dim), q_scale * np.eye(dim), gap=gap)


def selection_observation(dim: int, indices, q_scale: float, gap: int = 1) -> ObservationModel:
    """Observe the listed coordinates only (e.g. the x-variable of Lorenz)."""
    indices = list(indices)
    a = np.zeros((len(indices), dim))
    for row, idx in enumerate(indices):
        a[row, idx] = 1.0
    return linear_observation(a, q_scale * np.eye(len(indices)), gap=gap)


def cubic_observation(
    projection: np.ndarray, q: np.ndarray, gap: int = 1
) -> ObservationModel:
    """h(x) = y + y^3 applied pointwise to y = P x (P may be the identity)."""
    p = np.atleast_2d(np.asarray(projection, dtype=float))
    q = np.atleast_2d(np.asarray(q, dtype=float))
    k, m = p.shape

    def h(x):
        y = p @ x
        return y + y**3

    def h_jac(x):
        y = p @ x
        return (1.0 + 3.0 * y**2)[:, None] * p

    def h_hvp(x, v):
        y = p @ x
        return p.T @ ((6.0 * y * v)[:, None] * p)

    return ObservationModel(k, h, h_jac, h_hvp, noise_factor=q, gap=gap)
