"""Twin experiments, error statistics, and strong-convergence studies.

A twin experiment generates a reference model run plus noisy observations,
then lets each configured filter reconstruct the reference from the identical
observations.  The error at a check step is e = ||x_ref - x_est|| (Euclidean;
over Fourier coefficients for the spectral model).
"""

from __future__ import annotations

import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .filters import (
    FilterCollapse,
    FilterConfig,
    SamplerStats,
    effective_sample_size,
    estimate_state,
    implicit_filter_step,
    initial_ensemble,
    sir_filter_step,
)
from .numerics import RngStream, derive_stream
from .posterior import observation_precision
from .sde import ObservationModel


@dataclass
class Scenario:
    """Everything one experiment needs, shared read-only across experiments."""

    name: str
    delta: float
    n_steps: int
    check_steps: Sequence[int]
    initial_state: np.ndarray
    propagate: Callable[[np.ndarray, RngStream], np.ndarray]  # one model step
    obs: ObservationModel
    builder: object  # posterior builder for the implicit filter
    filter_configs: Sequence[FilterConfig]

    def filter_label(self, config: FilterConfig) -> str:
        return f"{config.kind}-M{config.particles}"


@dataclass
class FilterRunResult:
    label: str
    errors: dict  # check step -> ||x_ref - x_est||
    collapsed: bool = False
    collapse_step: Optional[int] = None
    ess_mean: float = np.nan
    sampler_stats: SamplerStats = field(default_factory=SamplerStats)
    estimates: Optional[dict] = None  # step -> state estimate, opt-in
    ess_values: Optional[list] = None  # per observation step, opt-in


@dataclass
class ExperimentRecord:
    exp_index: int
    results: dict  # label -> FilterRunResult


@dataclass
class ErrorStats:
    """Across-experiment mean and sample variance of the error norms."""

    label: str
    check_step: int
    mean_error: float
    error_variance: float
    n_success: int
    collapses: int
    single_sample: bool = False


def _reference_and_observations(scenario: Scenario, seed: int, exp_index: int):
    ref_rng = derive_stream(seed, exp_index, "reference")
    obs_rng = derive_stream(seed, exp_index, "observations")
    r = scenario.obs.gap
    x = np.array(scenario.initial_state, dtype=float)
    reference = {}
    observations = {}
    for step in range(1, scenario.n_steps + 1):
        x = scenario.propagate(x, ref_rng)
        if step % r == 0:
            reference[step] = x.copy()
            observations[step] = scenario.obs.observe(x, obs_rng)
    return reference, observations


def _run_filter(
    scenario: Scenario,
    config: FilterConfig,
    observations: dict,
    reference: dict,
    seed: int,
    exp_index: int,
    label: str,
    collect_estimates: bool = False,
) -> FilterRunResult:
    r = scenario.obs.gap
    ensemble = initial_ensemble(scenario.initial_state, config.particles)
    check = set(scenario.check_steps)
    errors = {}
    estimates = {} if collect_estimates else None
    ess_values = []
    stats = SamplerStats()
    w_obs = observation_precision(scenario.obs)
    try:
        for window, step in enumerate(range(r, scenario.n_steps + 1, r)):
            b = observations[step]

            def stream_factory(j, _w=window):
                return derive_stream(seed, exp_index, label, _w, j)

            resample_rng = derive_stream(seed, exp_index, label, window, "resample")
            if config.kind == "sir":
                weighted, ensemble = sir_filter_step(
                    ensemble, b, scenario.propagate, scenario.obs, config,
                    stream_factory, resample_rng, w_obs=w_obs,
                )
            else:
                weighted, ensemble = implicit_filter_step(
                    ensemble, b, scenario.builder, config,
                    stream_factory, resample_rng, stats=stats,
                    quadratic_approx=(config.kind == "implicit_quadratic_approx"),
                )
            ess_values.append(effective_sample_size(weighted))
            if collect_estimates:
                estimates[step] = estimate_state(weighted)
            if step in check:
                errors[step] = float(
                    np.linalg.norm(reference[step] - estimate_state(weighted))
                )
    except FilterCollapse as collapse:
        return FilterRunResult(
            label, errors, collapsed=True, collapse_step=collapse.step,
            ess_mean=float(np.mean(ess_values)) if ess_values else np.nan,
            sampler_stats=stats, estimates=estimates, ess_values=ess_values,
        )
    return FilterRunResult(
        label, errors, ess_mean=float(np.mean(ess_values)), sampler_stats=stats,
        estimates=estimates, ess_values=ess_values,
    )


def run_single_experiment(scenario: Scenario, seed: int, exp_index: int) -> ExperimentRecord:
    reference, observations = _reference_and_observations(scenario, seed, exp_index)
    results = {}
    for config in scenario.filter_configs:
        label = scenario.filter_label(config)
        results[label] = _run_filter(
            scenario, config, observations, reference, seed, exp_index, label
        )
    return ExperimentRecord(exp_index, results)


def _pool_worker(args):
    config_dict, seed, exp_index = args
    from .scenarios import make_scenario  # deferred: workers rebuild from plain data

    return run_single_experiment(make_scenario(config_dict), seed, exp_index)


def worker_count() -> int:
    value = os.environ.get("DA_THREADS", "")
    try:
        return max(1, int(value))
    except ValueError:
        return 1


def run_twin_experiment(
    scenario: Scenario,
    n_exp: int,
    seed: int,
    config_dict: Optional[dict] = None,
) -> list[ExperimentRecord]:
    """Run experiments 0..n_exp-1; reduction is in experiment-index order.

    With DA_THREADS > 1 and a plain config available, experiments run in a
    process pool; per-experiment streams make the result independent of the
    worker count.
    """
    threads = worker_count()
    if threads > 1 and config_dict is not None:
        args = [(config_dict, seed, i) for i in range(n_exp)]
        with ProcessPoolExecutor(max_workers=threads) as pool:
            records = list(pool.map(_pool_worker, args))
        return records
    return [run_single_experiment(scenario, seed, i) for i in range(n_exp)]


def aggregate_errors(records: Sequence[ExperimentRecord]) -> list[ErrorStats]:
    if not records:
        raise ValueError("no experiment records to aggregate")
    labels = list(records[0].results.keys())
    stats = []
    for label in labels:
        collapses = sum(1 for rec in records if rec.results[label].collapsed)
        steps = sorted({s for rec in records for s in rec.results[label].errors})
        for step in steps:
            values = np.array(
                [
                    rec.results[label].errors[step]
                    for rec in records
                    if step in rec.results[label].errors and not rec.results[label].collapsed
                ]
            )
            if values.size == 0:
                continue
            single = values.size == 1
            stats.append(
                ErrorStats(
                    label=label,
                    check_step=step,
                    mean_error=float(values.mean()),
                    error_variance=0.0 if single else float(values.var(ddof=1)),
                    n_success=int(values.size),
                    collapses=collapses,
                    single_sample=single,
                )
            )
        if not steps:
            stats.append(
                ErrorStats(label, -1, np.nan, np.nan, 0, collapses, single_sample=False)
            )
    if all(s.n_success == 0 for s in stats):
        raise ValueError("zero successful experiments")
    return stats


# ---------------------------------------------------------------------------
# Strong-convergence studies: coarse and reference paths share the Brownian
# increments (coarse standard normals are sums of fine ones, rescaled).
# ---------------------------------------------------------------------------

BLOWUP_NORM = 1e10


def coarsen_normals(z_fine: np.ndarray, factor: int) -> np.ndarray:
    """Sum groups of `factor` fine standard normals, rescaled to unit variance."""
    shape = (z_fine.shape[0] // factor, factor) + z_fine.shape[1:]
    return z_fine[: shape[0] * factor].reshape(shape).sum(axis=1) / np.sqrt(factor)


class KpConvergenceProblem:
    """Klauder-Petersen scheme; two coupled noise draws per step."""

    def __init__(self, drift_fn, g: float, x0: np.ndarray):
        self.drift = drift_fn
        self.g = g
        self.x0 = np.asarray(x0, dtype=float)
        self.noise_shape = (2, self.x0.size)

    def run(self, delta: float, normals: np.ndarray):
        x = self.x0
        sq = self.g * np.sqrt(delta)
        for z in normals:
            fx = self.drift(x)
            x_star = x + delta * fx + sq * z[0]
            x = x + 0.5 * delta * (fx + self.drift(x_star)) + sq * z[1]
            if not np.all(np.abs(x) < BLOWUP_NORM):
                return None
        return x


class Rk4ConvergenceProblem:
    def __init__(self, drift_fn, g: float, x0: np.ndarray):
        self.drift = drift_fn
        self.g = g
        self.x0 = np.asarray(x0, dtype=float)
        self.noise_shape = (1, self.x0.size)

    def run(self, delta: float, normals: np.ndarray):
        x = self.x0
        f = self.drift
        sq = self.g * np.sqrt(delta)
        for z in normals:
            k1 = f(x)
            k2 = f(x + 0.5 * delta * k1)
            k3 = f(x + 0.5 * delta * k2)
            k4 = f(x + delta * k3)
            x = x + (delta / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4) + sq * z[0]
            if not np.all(np.abs(x) < BLOWUP_NORM):
                return None
        return x


class EulerConvergenceProblem:
    def __init__(self, drift_fn, g: float, x0: np.ndarray):
        self.drift = drift_fn
        self.g = g
        self.x0 = np.asarray(x0, dtype=float)
        self.noise_shape = (1, self.x0.size)

    def run(self, delta: float, normals: np.ndarray):
        x = self.x0
        sq = self.g * np.sqrt(delta)
        for z in normals:
            x = x + delta * self.drift(x) + sq * z[0]
            if not np.all(np.abs(x) < BLOWUP_NORM):
                return None
        return x


class SksConvergenceProblem:
    """Exponential Euler for the spectral model, coupled through the z draws."""

    def __init__(self, params, u0: Optional[np.ndarray] = None):
        from .sks import SksParams, _phi_coefficients, sks_nonlinear

        self.params = params
        self._phi = lambda delta: _phi_coefficients(params, delta)
        self._nonlinear = lambda u: sks_nonlinear(u, params)
        self.u0 = np.zeros(params.n_modes) if u0 is None else np.asarray(u0, dtype=float)
        self.noise_shape = (1, params.n_modes)

    def run(self, delta: float, normals: np.ndarray):
        exp_ld, phi1, noise_std = self._phi(delta)
        scale = self.params.g * noise_std
        u = self.u0
        for z in normals:
            u = exp_ld * u + phi1 * self._nonlinear(u) + scale * z[0]
            if not np.all(np.abs(u) < BLOWUP_NORM):
                return None
        return u


@dataclass
class ConvergenceResult:
    deltas: np.ndarray
    mean_errors: np.ndarray
    slope: float
    n_used: int
    n_discarded: int


def run_convergence_study(
    problem,
    deltas: Sequence[float],
    delta_ref: float,
    n_realizations: int,
    t_final: float,
    seed: int,
) -> ConvergenceResult:
    deltas = np.asarray(sorted(deltas, reverse=True), dtype=float)
    factors = []
    for d in deltas:
        ratio = d / delta_ref
        if abs(ratio - round(ratio)) > 1e-9:
            raise ValueError(f"delta_ref must divide every delta; got {d} / {delta_ref}")
        factors.append(int(round(ratio)))
    n_fine = int(round(t_final / delta_ref))
    errors = np.zeros(len(deltas))
    used = 0
    discarded = 0
    for exp_index in range(n_realizations):
        rng = derive_stream(seed, exp_index, "convergence")
        z_fine = rng.standard_normal(
            n_fine * int(np.prod(problem.noise_shape))
        ).reshape((n_fine,) + tuple(problem.noise_shape))
        reference = problem.run(delta_ref, z_fine)
        if reference is None:
            discarded += 1
            continue
        trial = np.empty(len(deltas))
        ok = True
        for i, factor in enumerate(factors):
            final = problem.run(deltas[i], coarsen_normals(z_fine, factor))
            if final is None:
                ok = False
                break
            trial[i] = np.linalg.norm(final - reference)
        if not ok:
            discarded += 1
            continue
        errors += trial
        used += 1
    if used == 0:
        raise ValueError("every realization blew up; no convergence data")
    mean_errors = errors / used
    if len(deltas) < 2:
        slope = np.nan  # a slope needs at least two step sizes
    else:
        slope = float(np.polyfit(np.log(deltas), np.log(mean_errors), 1)[0])
    return ConvergenceResult(deltas, mean_errors, slope, used, discarded)
