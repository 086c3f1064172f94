"""Stochastically driven Lorenz-63 model with additive noise."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .sde import DriftSpec


@dataclass(frozen=True)
class Lorenz63Params:
    sigma: float = 10.0
    rho: float = 28.0
    beta: float = 8.0 / 3.0
    g: float = np.sqrt(2.0)
    initial_state: tuple[float, float, float] = (-5.91652, -5.52332, 24.5723)


def lorenz_drift(state: np.ndarray, params: Lorenz63Params) -> np.ndarray:
    x, y, z = state
    return np.array(
        [
            params.sigma * (y - x),
            x * (params.rho - z) - y,
            x * y - params.beta * z,
        ]
    )


def lorenz_jacobian(state: np.ndarray, params: Lorenz63Params) -> np.ndarray:
    x, y, z = state
    return np.array(
        [
            [-params.sigma, params.sigma, 0.0],
            [params.rho - z, -1.0, -x],
            [y, x, -params.beta],
        ]
    )


def lorenz_hessian_vp(state: np.ndarray, v: np.ndarray, params: Lorenz63Params) -> np.ndarray:
    # Only the bilinear terms xz (in f_2) and xy (in f_3) have curvature.
    v2, v3 = v[1], v[2]
    return np.array(
        [
            [0.0, v3, -v2],
            [v3, 0.0, 0.0],
            [-v2, 0.0, 0.0],
        ]
    )


def lorenz_drift_spec(params: Lorenz63Params) -> DriftSpec:
    return DriftSpec(
        dim=3,
        f=lambda x: lorenz_drift(x, params),
        jacobian=lambda x: lorenz_jacobian(x, params),
        hessian_vp=lambda x, v: lorenz_hessian_vp(x, v, params),
    )
