"""Random-map implicit sampling: solve F(X) - phi = rho/2 along a random direction.

The sample is X = mu + lambda L^T eta with eta = xi / sqrt(rho), rho = xi^T xi,
and lambda the scalar root of F(mu + lambda L^T eta) - phi - rho/2 = 0.  The
weight correction uses the map Jacobian

    log J = log 2 + log|det L| + (1 - n/2) log rho
          + (n - 1) log lambda + log|d lambda / d rho|.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .minimize import MinimizationResult
from .numerics import RngStream

LAMBDA_RTOL = 1e-8
NEWTON_MAX = 50
BISECT_MAX = 200


class SampleError(RuntimeError):
    """The lambda solve or Jacobian failed; the particle gets -inf log-weight."""


@dataclass
class RandomMapSample:
    xi: np.ndarray
    rho: float
    lam: float
    x: np.ndarray
    dlam_drho: float
    log_jacobian: float
    log_weight_increment: float
    lambda_iterations: int


def solve_lambda(posterior, minres: MinimizationResult, xi: np.ndarray):
    """Return (lambda, X, direction L^T eta, iterations).

    Scalar Newton from lambda_0 = sqrt(rho); falls back to bisection on a
    doubling bracket if Newton fails to settle.
    """
    rho = float(xi @ xi)
    if rho <= 0.0:
        raise SampleError("reference draw has zero norm")
    eta = xi / np.sqrt(rho)
    direction = minres.lt_matvec(eta)
    target = minres.phi + 0.5 * rho
    tol = LAMBDA_RTOL * max(1.0, 0.5 * rho)

    def miss(lam: float) -> float:
        return posterior.value(minres.mu + lam * direction) - target

    lam = np.sqrt(rho)
    iterations = 0
    for _ in range(NEWTON_MAX):
        val = miss(lam)
        if abs(val) < tol:
            return lam, minres.mu + lam * direction, direction, iterations
        deriv = float(posterior.gradient(minres.mu + lam * direction) @ direction)
        if deriv <= 0.0:
            break
        new_lam = lam - val / deriv
        if new_lam <= 0.0:
            new_lam = 0.5 * lam
        lam = new_lam
        iterations += 1

    # Bisection fallback: phi(0) = -rho/2 < 0, double until the miss is positive.
    hi = max(lam, np.sqrt(rho))
    for _ in range(BISECT_MAX):
        if miss(hi) > 0.0:
            break
        hi *= 2.0
        iterations += 1
    else:
        raise SampleError("no bracketing interval for lambda")
    lo = 0.0
    for _ in range(BISECT_MAX):
        mid = 0.5 * (lo + hi)
        val = miss(mid)
        iterations += 1
        if abs(val) < tol:
            return mid, minres.mu + mid * direction, direction, iterations
        if val > 0.0:
            hi = mid
        else:
            lo = mid
    raise SampleError("bisection for lambda did not converge")


def jacobian_log(
    posterior,
    minres: MinimizationResult,
    lam: float,
    rho: float,
    x: np.ndarray,
    direction: np.ndarray,
) -> tuple[float, float]:
    """(log J, d lambda / d rho) with the analytic derivative 1 / (2 grad F . L^T eta)."""
    slope = float(posterior.gradient(x) @ direction)
    if slope == 0.0:
        raise SampleError("degenerate direction: grad F orthogonal to L^T eta")
    dlam_drho = 1.0 / (2.0 * slope)
    n = posterior.n_block
    log_j = (
        np.log(2.0)
        + minres.log_det_l
        + (1.0 - 0.5 * n) * np.log(rho)
        + (n - 1.0) * np.log(lam)
        + np.log(abs(dlam_drho))
    )
    return float(log_j), dlam_drho


def dlam_drho_numeric(posterior, minres: MinimizationResult, lam, rho, direction) -> float:
    """Finite-difference alternative with perturbation 1e-5 sqrt(rho)."""
    dlam = 1e-5 * np.sqrt(rho)
    f_hi = posterior.value(minres.mu + (lam + dlam) * direction)
    f_lo = posterior.value(minres.mu + lam * direction)
    drho = 2.0 * (f_hi - f_lo)
    return dlam / drho


def implicit_sample(posterior, minres: MinimizationResult, rng: RngStream) -> RandomMapSample:
    """Draw xi, solve for lambda, and weight by exp(-phi) J (in log form)."""
    xi = rng.standard_normal(posterior.n_block)
    try:
        lam, x, direction, iterations = solve_lambda(posterior, minres, xi)
        log_j, dlam = jacobian_log(posterior, minres, lam, float(xi @ xi), x, direction)
    except SampleError:
        return RandomMapSample(
            xi=xi,
            rho=float(xi @ xi),
            lam=np.nan,
            x=minres.mu,
            dlam_drho=np.nan,
            log_jacobian=-np.inf,
            log_weight_increment=-np.inf,
            lambda_iterations=NEWTON_MAX,
        )
    return RandomMapSample(
        xi=xi,
        rho=float(xi @ xi),
        lam=lam,
        x=x,
        dlam_drho=dlam,
        log_jacobian=log_j,
        log_weight_increment=-minres.phi + log_j,
        lambda_iterations=iterations,
    )


def quadratic_approx_sample(posterior, minres: MinimizationResult, rng: RngStream) -> RandomMapSample:
    """Sample the quadratic approximation F0 exactly and reweight by the mismatch.

    X = mu + L^T xi solves F0(X) - phi = xi^T xi / 2; the weight increment is
    -phi - (F(X) - F0(X)) + log|det L|.
    """
    xi = rng.standard_normal(posterior.n_block)
    rho = float(xi @ xi)
    x = minres.mu + minres.lt_matvec(xi)
    f0 = minres.phi + 0.5 * rho
    mismatch = posterior.value(x) - f0
    log_j = minres.log_det_l
    return RandomMapSample(
        xi=xi,
        rho=rho,
        lam=np.sqrt(rho),
        x=x,
        dlam_drho=np.nan,
        log_jacobian=log_j,
        log_weight_increment=-minres.phi - mismatch + log_j,
        lambda_iterations=0,
    )
