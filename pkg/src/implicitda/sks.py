"""Stochastic Kuramoto-Sivashinsky equation, spectral Galerkin form.

The state is the real vector of (rescaled imaginary-part) Fourier coefficients
U_1..U_m of an odd solution with U_0 = 0.  The linear part is diagonal with
eigenvalues lambda_k = omega_k^2 - nu * omega_k^4; the quadratic nonlinearity
is a truncated convolution under the odd extension U_{-k} = -U_k.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import RngStream
from .sde import DiscreteModel


@dataclass(frozen=True)
class SksParams:
    n_modes: int
    period: float = 16.0 * np.pi
    nu: float = 0.251
    g: float = 4.0
    noise: str = "smooth"  # "smooth": q_k = exp(-|omega_k|); "white": q_k = 1

    def wavenumbers(self) -> np.ndarray:
        return 2.0 * np.pi * np.arange(1, self.n_modes + 1) / self.period

    def eigenvalues(self) -> np.ndarray:
        w = self.wavenumbers()
        return w**2 - self.nu * w**4

    def noise_spectrum(self) -> np.ndarray:
        if self.noise == "white":
            return np.ones(self.n_modes)
        if self.noise == "smooth":
            return np.exp(-np.abs(self.wavenumbers()))
        raise ValueError(f"unknown noise spectrum {self.noise!r}")


def _odd_extension(u: np.ndarray) -> np.ndarray:
    """Coefficients on indices -m..m: [-u_m..-u_1, 0, u_1..u_m]."""
    return np.concatenate([-u[::-1], [0.0], u])


def sks_nonlinear(u: np.ndarray, params: SksParams) -> np.ndarray:
    """N(U)_k = -(omega_k / 2) sum_{k'} U_{k'} U_{k-k'}, truncated to |k'|<=m."""
    m = params.n_modes
    full = _odd_extension(np.asarray(u, dtype=float))
    conv = np.convolve(full, full)  # index i holds sum s = i - 2m
    return -0.5 * params.wavenumbers() * conv[2 * m + 1 : 3 * m + 1]


def sks_nonlinear_jacobian(u: np.ndarray, params: SksParams) -> np.ndarray:
    """dN_k/dU_j = -omega_k (u_{k-j} - u_{k+j}) under the odd extension."""
    m = params.n_modes
    full = _odd_extension(np.asarray(u, dtype=float))
    # Pad so any index k +- j (range -m+1 .. 2m) can be looked up; out of
    # range means truncated away, i.e. zero.
    padded = np.concatenate([full, np.zeros(m)])  # index p at padded[p + m]
    k = np.arange(1, m + 1)[:, None]
    j = np.arange(1, m + 1)[None, :]
    return -params.wavenumbers()[:, None] * (padded[k - j + m] - padded[k + j + m])


def sks_nonlinear_hessian_vp(v: np.ndarray, params: SksParams) -> np.ndarray:
    """sum_k v_k d^2 N_k / dU dU; constant in U since N is quadratic."""
    m = params.n_modes
    w = np.zeros(2 * m + 2)
    w[1 : m + 1] = np.asarray(v, dtype=float) * params.wavenumbers()
    j = np.arange(1, m + 1)[:, None]
    l = np.arange(1, m + 1)[None, :]
    term1 = w[np.clip(l + j, 0, 2 * m + 1)]  # k = l + j
    diff = j - l
    term2 = np.where(diff > 0, w[np.clip(diff, 0, 2 * m + 1)], 0.0)  # k = j - l
    term3 = np.where(diff < 0, w[np.clip(-diff, 0, 2 * m + 1)], 0.0)  # k = l - j
    return -term1 + term2 + term3


# Below this threshold on |lambda * delta| the exponential-Euler coefficients
# switch to their analytic limits to avoid catastrophic cancellation.
_SMALL_EXPONENT = 1e-8


def _phi_coefficients(params: SksParams, delta: float) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(e^{B delta}, B^{-1}(e^{B delta}-I), per-mode noise std / g) for the scheme."""
    lam = params.eigenvalues()
    exp_ld = np.exp(lam * delta)
    small = np.abs(lam * delta) < _SMALL_EXPONENT
    lam_safe = np.where(small, 1.0, lam)
    phi1 = np.where(small, delta, np.expm1(lam * delta) / lam_safe)
    noise_var = np.where(small, delta, 0.5 * np.expm1(2.0 * lam * delta) / lam_safe)
    noise_std = np.sqrt(params.noise_spectrum() * noise_var)
    return exp_ld, phi1, noise_std


def exponential_euler_step(
    u: np.ndarray, params: SksParams, delta: float, rng: RngStream
) -> np.ndarray:
    """U' = e^{Bd} U + B^{-1}(e^{Bd}-I) N(U) + g sqrt(0.5 D B^{-1}(e^{2Bd}-I)) dW."""
    exp_ld, phi1, noise_std = _phi_coefficients(params, delta)
    dw = rng.standard_normal(params.n_modes)
    return exp_ld * u + phi1 * sks_nonlinear(u, params) + params.g * noise_std * dw


def sks_discrete_model(params: SksParams, delta: float) -> DiscreteModel:
    """Exponential-Euler one-step map in x' = R(x) + G z form."""
    exp_ld, phi1, noise_std = _phi_coefficients(params, delta)
    m = params.n_modes

    def mapping(u):
        return exp_ld * u + phi1 * sks_nonlinear(u, params)

    def jac(u):
        return np.diag(exp_ld) + phi1[:, None] * sks_nonlinear_jacobian(u, params)

    def hvp(u, v):
        return sks_nonlinear_hessian_vp(phi1 * v, params)

    return DiscreteModel(m, mapping, jac, hvp, noise_diag=params.g * noise_std)


def sks_projection_matrix(params: SksParams, locations: np.ndarray) -> np.ndarray:
    """Rows map U to physical values u(x_j) = -2 sum_k U_k sin(omega_k x_j)."""
    locations = np.asarray(locations, dtype=float)
    return -2.0 * np.sin(np.outer(locations, params.wavenumbers()))


def default_observation_locations(params: SksParams) -> np.ndarray:
    """m/2 equidistant points x_j = j * period / (m/2)."""
    half = params.n_modes // 2
    return np.arange(half) * params.period / half


def sks_physical_values(u: np.ndarray, params: SksParams, locations: np.ndarray) -> np.ndarray:
    return sks_projection_matrix(params, locations) @ np.asarray(u, dtype=float)
