"""Particle ensembles, the implicit and SIR filtering steps, and resampling."""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np

from .minimize import MinimizationError, minimize_posterior
from .numerics import RngStream, log_sum_exp, solve_upper, spd_solve
from .posterior import observation_precision
from .sampling import implicit_sample, quadratic_approx_sample
from .sde import ObservationModel

RESAMPLING_SCHEMES = ("systematic", "multinomial", "residual")
FILTER_KINDS = ("implicit", "implicit_quadratic_approx", "sir")

# "All weights zero up to machine precision except possibly one" marks collapse.
_COLLAPSE_EPS = np.finfo(float).eps


class FilterCollapse(RuntimeError):
    """The ensemble degenerated; carries diagnostics for the harness."""

    def __init__(self, message: str, step: int, ess: float):
        super().__init__(f"{message} (step {step}, ESS {ess:.3g})")
        self.step = step
        self.ess = ess


@dataclass
class ParticleEnsemble:
    positions: np.ndarray  # (M, m)
    log_weights: np.ndarray  # (M,)
    step: int = 0

    @property
    def size(self) -> int:
        return self.positions.shape[0]

    def normalized(self) -> "ParticleEnsemble":
        lse = log_sum_exp(self.log_weights)
        return replace(self, log_weights=self.log_weights - lse)

    def weights(self) -> np.ndarray:
        return np.exp(self.log_weights)


@dataclass(frozen=True)
class FilterConfig:
    kind: str
    particles: int
    resampling: str = "systematic"
    resample_policy: str = "every_observation"  # or "ess_threshold"
    ess_threshold: float = 0.5

    def __post_init__(self):
        if self.kind not in FILTER_KINDS:
            raise ValueError(f"unknown filter kind {self.kind!r}")
        if self.resampling not in RESAMPLING_SCHEMES:
            raise ValueError(f"unknown resampling scheme {self.resampling!r}")
        if self.resample_policy == "ess_threshold" and not 0 < self.ess_threshold <= 1:
            raise ValueError("ESS threshold must be in (0, 1]")


def initial_ensemble(x0: np.ndarray, m_particles: int) -> ParticleEnsemble:
    positions = np.tile(np.asarray(x0, dtype=float), (m_particles, 1))
    return ParticleEnsemble(positions, np.full(m_particles, -np.log(m_particles)))


def effective_sample_size(ensemble: ParticleEnsemble) -> float:
    """1 / sum w^2 for normalized weights; lies in [1, M]."""
    w = ensemble.weights()
    return float(1.0 / np.sum(w**2))


def estimate_state(ensemble: ParticleEnsemble) -> np.ndarray:
    """Weighted mean, computed before resampling resets the weights."""
    return ensemble.weights() @ ensemble.positions


def systematic_counts(weights: np.ndarray, m: int, u: float) -> np.ndarray:
    """Offspring counts for systematic resampling with offset u in [0, 1/m)."""
    points = u + np.arange(m) / m
    edges = np.concatenate([[0.0], np.cumsum(weights)])
    edges[-1] = max(edges[-1], 1.0)
    return np.diff(np.searchsorted(points, edges, side="left"))


def resample(ensemble: ParticleEnsemble, rng: RngStream, scheme: str = "systematic") -> ParticleEnsemble:
    w = ensemble.weights()
    if np.any(np.isnan(w)):
        raise ValueError("NaN weight in resampling")
    m = ensemble.size
    if scheme == "systematic":
        counts = systematic_counts(w, m, rng.uniform() / m)
        indices = np.repeat(np.arange(m), counts)
    elif scheme == "multinomial":
        indices = np.sort(rng.multinomial_index(w / w.sum(), m))
    elif scheme == "residual":
        base = np.floor(m * w).astype(int)
        leftover = m - base.sum()
        indices = np.repeat(np.arange(m), base)
        if leftover > 0:
            residual = m * w - base
            extra = rng.multinomial_index(residual / residual.sum(), leftover)
            indices = np.concatenate([indices, np.sort(extra)])
    else:
        raise ValueError(f"unknown resampling scheme {scheme!r}")
    return ParticleEnsemble(
        positions=ensemble.positions[indices].copy(),
        log_weights=np.full(m, -np.log(m)),
        step=ensemble.step,
    )


def _maybe_resample(ensemble: ParticleEnsemble, config: FilterConfig, rng: RngStream) -> ParticleEnsemble:
    if config.resample_policy == "every_observation":
        return resample(ensemble, rng, config.resampling)
    if effective_sample_size(ensemble) < config.ess_threshold * ensemble.size:
        return resample(ensemble, rng, config.resampling)
    return ensemble


@dataclass
class SamplerStats:
    """Lambda-solver iteration counts accumulated over a run."""

    samples: int = 0
    within_20: int = 0
    max_iterations: int = 0
    failures: int = 0

    def record(self, iterations: int, failed: bool = False):
        self.samples += 1
        if failed:
            self.failures += 1
            return
        if iterations <= 20:
            self.within_20 += 1
        self.max_iterations = max(self.max_iterations, iterations)

    def merge(self, other: "SamplerStats"):
        self.samples += other.samples
        self.within_20 += other.within_20
        self.max_iterations = max(self.max_iterations, other.max_iterations)
        self.failures += other.failures


def _implicit_step_quadratic_batch(
    ensemble: ParticleEnsemble,
    observation: np.ndarray,
    builder,
    stream_factory,
    stats: Optional[SamplerStats],
) -> tuple[np.ndarray, np.ndarray]:
    """All particles at once when F is exactly quadratic.

    With one model step to a linear observation the per-particle minimum and
    curvature are closed-form and the curvature is shared, so mu, phi, the map
    X = mu + sqrt(rho) L^T eta (lambda = sqrt(rho) exactly), and the volume
    correction are batched.  One stream per step supplies the reference draws.
    """
    m_particles = ensemble.size
    n = builder.model.dim
    chol = builder.quadratic_chol
    a = builder.obs.linear_map
    w_model = builder.w_model.matrix()
    w_obs = builder.w_obs
    r_prev = np.array([builder.model.mapping(x) for x in ensemble.positions])
    rhs = r_prev @ w_model.T + a.T @ w_obs.apply(observation)
    mu = spd_solve(chol, rhs.T).T
    resid = mu - r_prev
    e_obs = mu @ a.T - observation
    phi = 0.5 * np.einsum("ij,ij->i", resid, resid @ w_model.T)
    phi += 0.5 * np.einsum("ij,ij->i", e_obs, w_obs.left_multiply(e_obs.T).T)
    xi = stream_factory("batch").standard_normal(m_particles * n).reshape(m_particles, n)
    rho = np.einsum("ij,ij->i", xi, xi)
    positions = mu + solve_upper(chol.T, xi.T).T
    # volume correction, same expression as the scalar solver; the rho and
    # lambda powers cancel for quadratic F, leaving log|det L| per particle
    log_det_l = -np.sum(np.log(np.diag(chol)))
    lam = np.sqrt(rho)
    dlam_drho = 1.0 / (2.0 * lam)
    log_j = (
        np.log(2.0)
        + log_det_l
        + (1.0 - 0.5 * n) * np.log(rho)
        + (n - 1.0) * np.log(lam)
        + np.log(dlam_drho)
    )
    if stats is not None:
        for _ in range(m_particles):
            stats.record(0)
    return positions, -phi + log_j


def implicit_filter_step(
    ensemble: ParticleEnsemble,
    observation: np.ndarray,
    builder,
    config: FilterConfig,
    stream_factory: Callable[[int], RngStream],
    resample_rng: RngStream,
    stats: Optional[SamplerStats] = None,
    quadratic_approx: bool = False,
) -> tuple[ParticleEnsemble, ParticleEnsemble]:
    """Advance every particle to the next observation by implicit sampling.

    Returns (weighted ensemble before resampling, ensemble after the resample
    policy); the first is what the state estimator reads.
    """
    m_particles = ensemble.size
    r = builder.obs.gap
    if getattr(builder, "quadratic", False):
        new_positions, increments = _implicit_step_quadratic_batch(
            ensemble, observation, builder, stream_factory, stats
        )
        new_log_weights = ensemble.log_weights + increments
        weighted = ParticleEnsemble(new_positions, new_log_weights, ensemble.step + r)
        weighted = weighted.normalized()
        return weighted, _maybe_resample(weighted, config, resample_rng)
    new_positions = np.empty_like(ensemble.positions)
    increments = np.empty(m_particles)
    sampler = quadratic_approx_sample if quadratic_approx else implicit_sample
    for j in range(m_particles):
        rng = stream_factory(j)
        posterior = builder.build(ensemble.positions[j], observation)
        try:
            minres = minimize_posterior(posterior)
        except MinimizationError:
            new_positions[j] = ensemble.positions[j]
            increments[j] = -np.inf
            if stats is not None:
                stats.record(0, failed=True)
            continue
        sample = sampler(posterior, minres, rng)
        new_positions[j] = posterior.final_state(sample.x)
        increments[j] = sample.log_weight_increment
        if stats is not None:
            stats.record(sample.lambda_iterations, failed=not np.isfinite(sample.log_weight_increment))
    new_log_weights = ensemble.log_weights + increments
    step = ensemble.step + r
    if np.all(new_log_weights == -np.inf):
        raise FilterCollapse("implicit filter collapse: all log-weights are -inf", step, 0.0)
    weighted = ParticleEnsemble(new_positions, new_log_weights, step).normalized()
    return weighted, _maybe_resample(weighted, config, resample_rng)


def sir_filter_step(
    ensemble: ParticleEnsemble,
    observation: np.ndarray,
    propagate: Callable[[np.ndarray, RngStream], np.ndarray],
    obs: ObservationModel,
    config: FilterConfig,
    stream_factory: Callable[[int], RngStream],
    resample_rng: RngStream,
    w_obs=None,
) -> tuple[ParticleEnsemble, ParticleEnsemble]:
    """Propagate r model steps with noise, reweight by the likelihood, resample.

    Collapse (all normalized weights zero to machine precision except possibly
    one) is an error, not a silent reset.
    """
    if w_obs is None:
        w_obs = observation_precision(obs)
    m_particles = ensemble.size
    r = obs.gap
    new_positions = np.empty_like(ensemble.positions)
    log_lik = np.empty(m_particles)
    for j in range(m_particles):
        rng = stream_factory(j)
        x = ensemble.positions[j]
        for _ in range(r):
            x = propagate(x, rng)
        new_positions[j] = x
        e = obs.h(x) - observation
        log_lik[j] = -0.5 * w_obs.quad(e)
    step = ensemble.step + r
    weighted = ParticleEnsemble(new_positions, ensemble.log_weights + log_lik, step).normalized()
    if m_particles > 1:
        alive = int(np.sum(np.exp(weighted.log_weights) > _COLLAPSE_EPS))
        if alive <= 1:
            raise FilterCollapse(
                "SIR collapse: all weights zero to machine precision",
                step,
                effective_sample_size(weighted),
            )
    return weighted, _maybe_resample(weighted, config, resample_rng)
