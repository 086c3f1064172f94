"""Named experiment presets and config-to-scenario construction.

Configs are plain nested dicts (JSON on disk, schema_version 1).  Every table
and convergence figure ships as a preset in both desk and paper scales; desk
scale is the CI-friendly default.
"""

from __future__ import annotations

import numpy as np

from .filters import FilterConfig
from .harness import (
    EulerConvergenceProblem,
    KpConvergenceProblem,
    Rk4ConvergenceProblem,
    Scenario,
    SksConvergenceProblem,
)
from .lorenz import Lorenz63Params, lorenz_drift_spec
from .posterior import KpPosteriorBuilder, PosteriorBuilder
from .sde import (
    DiscreteModel,
    cubic_observation,
    identity_observation,
    kp_step,
    linear_observation,
    selection_observation,
)
from .sks import (
    SksParams,
    default_observation_locations,
    sks_discrete_model,
    sks_projection_matrix,
)

SCHEMA_VERSION = 1


class ConfigError(ValueError):
    """Invalid configuration; the message names the offending key."""


def _check_keys(doc: dict, required: set, optional: set, context: str):
    for key in required:
        if key not in doc:
            raise ConfigError(f"{context}: missing required key '{key}'")
    unknown = set(doc) - required - optional
    if unknown:
        raise ConfigError(f"{context}: unknown key '{sorted(unknown)[0]}'")


def _make_lorenz(model_cfg: dict):
    _check_keys(
        model_cfg,
        {"kind"},
        {"delta", "g", "sigma", "rho", "beta", "initial_state"},
        "model",
    )
    params = Lorenz63Params(
        sigma=model_cfg.get("sigma", 10.0),
        rho=model_cfg.get("rho", 28.0),
        beta=model_cfg.get("beta", 8.0 / 3.0),
        g=model_cfg.get("g", float(np.sqrt(2.0))),
        initial_state=tuple(model_cfg.get("initial_state", (-5.91652, -5.52332, 24.5723))),
    )
    delta = model_cfg.get("delta", 0.01)
    drift = lorenz_drift_spec(params)

    def propagate(x, rng):
        return kp_step(x, drift.f, params.g, delta, rng)[1]

    return params, drift, delta, propagate


def _make_sks(model_cfg: dict):
    _check_keys(
        model_cfg,
        {"kind", "n_modes"},
        {"delta", "g", "noise", "period", "nu"},
        "model",
    )
    params = SksParams(
        n_modes=int(model_cfg["n_modes"]),
        period=model_cfg.get("period", 16.0 * np.pi),
        nu=model_cfg.get("nu", 0.251),
        g=model_cfg.get("g", 4.0),
        noise=model_cfg.get("noise", "smooth"),
    )
    delta = model_cfg.get("delta", 2.0**-10)
    model = sks_discrete_model(params, delta)
    return params, model, delta, model.step


def _make_linear_gaussian(model_cfg: dict):
    _check_keys(
        model_cfg,
        {"kind", "coefficient", "noise_std"},
        {"initial_state", "dim"},
        "model",
    )
    dim = int(model_cfg.get("dim", 1))
    a = float(model_cfg["coefficient"])
    noise = float(model_cfg["noise_std"])
    eye = np.eye(dim)
    zero = np.zeros((dim, dim))
    model = DiscreteModel(
        dim=dim,
        mapping=lambda x: a * x,
        map_jacobian=lambda x: a * eye,
        map_hessian_vp=lambda x, v: zero,
        noise_diag=np.full(dim, noise),
    )
    x0 = np.asarray(model_cfg.get("initial_state", np.zeros(dim)), dtype=float)
    return model, x0


def _make_observation(obs_cfg: dict, model_kind: str, state_dim: int, sks_params=None):
    _check_keys(
        obs_cfg,
        {"kind"},
        {"noise_std", "gap", "indices", "nonlinear", "locations"},
        "observation",
    )
    kind = obs_cfg["kind"]
    gap = int(obs_cfg.get("gap", 1))
    if gap < 1:
        raise ConfigError("observation: gap must be >= 1")
    noise_std = float(obs_cfg.get("noise_std", 1.0))
    if kind == "identity":
        return identity_observation(state_dim, noise_std, gap=gap)
    if kind == "selection":
        if "indices" not in obs_cfg:
            raise ConfigError("observation: missing required key 'indices'")
        return selection_observation(state_dim, obs_cfg["indices"], noise_std, gap=gap)
    if kind == "sks_physical":
        if sks_params is None:
            raise ConfigError("observation: sks_physical requires an sks model")
        locations = obs_cfg.get("locations")
        locations = (
            default_observation_locations(sks_params)
            if locations is None
            else np.asarray(locations, dtype=float)
        )
        projection = sks_projection_matrix(sks_params, locations)
        q = noise_std * np.eye(projection.shape[0])
        if obs_cfg.get("nonlinear", False):
            return cubic_observation(projection, q, gap=gap)
        return linear_observation(projection, q, gap=gap)
    if kind == "cubic":
        return cubic_observation(np.eye(state_dim), noise_std * np.eye(state_dim), gap=gap)
    raise ConfigError(f"observation: unknown kind '{kind}'")


def _make_filter_configs(filter_cfgs: list) -> list[FilterConfig]:
    configs = []
    for entry in filter_cfgs:
        _check_keys(
            entry,
            {"kind", "particles"},
            {"resampling", "resample_policy", "ess_threshold"},
            "filters",
        )
        configs.append(
            FilterConfig(
                kind=entry["kind"],
                particles=int(entry["particles"]),
                resampling=entry.get("resampling", "systematic"),
                resample_policy=entry.get("resample_policy", "every_observation"),
                ess_threshold=entry.get("ess_threshold", 0.5),
            )
        )
    return configs


_TWIN_KEYS_REQUIRED = {"schema_version", "kind", "model", "observation", "filters", "n_steps"}
_TWIN_KEYS_OPTIONAL = {"name", "seed", "check_times", "check_steps", "n_exp", "scale"}


def make_scenario(config: dict) -> Scenario:
    """Build a twin-experiment Scenario from a validated plain config."""
    _check_keys(config, _TWIN_KEYS_REQUIRED, _TWIN_KEYS_OPTIONAL, "config")
    if config["schema_version"] != SCHEMA_VERSION:
        raise ConfigError(f"config: unsupported schema_version {config['schema_version']}")
    if config["kind"] != "twin":
        raise ConfigError(f"config: expected kind 'twin', got '{config['kind']}'")
    model_cfg = config["model"]
    if "kind" not in model_cfg:
        raise ConfigError("model: missing required key 'kind'")
    model_kind = model_cfg["kind"]
    n_steps = int(config["n_steps"])

    if model_kind == "lorenz":
        params, drift, delta, propagate = _make_lorenz(model_cfg)
        obs = _make_observation(config["observation"], model_kind, 3)
        builder = KpPosteriorBuilder(drift, params.g, delta, obs)
        x0 = np.asarray(params.initial_state, dtype=float)
    elif model_kind == "sks":
        params, model, delta, propagate = _make_sks(model_cfg)
        obs = _make_observation(config["observation"], model_kind, params.n_modes, params)
        builder = PosteriorBuilder(model, obs)
        x0 = np.zeros(params.n_modes)
    elif model_kind == "linear_gaussian":
        model, x0 = _make_linear_gaussian(model_cfg)
        delta = 1.0
        obs = _make_observation(config["observation"], model_kind, model.dim)
        builder = PosteriorBuilder(model, obs)
        propagate = model.step
    else:
        raise ConfigError(f"model: unknown kind '{model_kind}'")

    if "check_steps" in config:
        check_steps = [int(s) for s in config["check_steps"]]
    elif "check_times" in config:
        check_steps = [int(round(t / delta)) for t in config["check_times"]]
    else:
        check_steps = [n_steps]
    for step in check_steps:
        if step > n_steps or step % obs.gap != 0:
            raise ConfigError(
                f"config: check step {step} must be an observation step within n_steps"
            )
    return Scenario(
        name=config.get("name", "scenario"),
        delta=delta,
        n_steps=n_steps,
        check_steps=check_steps,
        initial_state=x0,
        propagate=propagate,
        obs=obs,
        builder=builder,
        filter_configs=_make_filter_configs(config["filters"]),
    )


_CONV_KEYS_REQUIRED = {"schema_version", "kind", "model", "schemes", "deltas", "delta_ref", "t_final"}
_CONV_KEYS_OPTIONAL = {"name", "seed", "n_realizations", "scale"}


def make_convergence_problems(config: dict) -> dict:
    """scheme label -> convergence problem, from a 'convergence' config."""
    _check_keys(config, _CONV_KEYS_REQUIRED, _CONV_KEYS_OPTIONAL, "config")
    model_cfg = config["model"]
    if "kind" not in model_cfg:
        raise ConfigError("model: missing required key 'kind'")
    problems = {}
    for scheme in config["schemes"]:
        if model_cfg["kind"] == "lorenz":
            params, drift, _, _ = _make_lorenz(model_cfg)
            x0 = np.asarray(params.initial_state, dtype=float)
            cls = {
                "kp": KpConvergenceProblem,
                "rk4": Rk4ConvergenceProblem,
                "euler": EulerConvergenceProblem,
            }.get(scheme)
            if cls is None:
                raise ConfigError(f"config: unknown scheme '{scheme}' for lorenz")
            problems[scheme] = cls(drift.f, params.g, x0)
        elif model_cfg["kind"] == "sks":
            if scheme not in ("smooth", "white"):
                raise ConfigError(f"config: unknown scheme '{scheme}' for sks")
            base = dict(model_cfg)
            base["noise"] = scheme
            params, _, _, _ = _make_sks(base)
            problems[scheme] = SksConvergenceProblem(params)
        else:
            raise ConfigError(f"model: unknown kind '{model_cfg['kind']}'")
    return problems


def _lorenz_twin(name, obs, n_steps, check_times, n_exp, implicit_m, sir_m, seed):
    return {
        "schema_version": SCHEMA_VERSION,
        "name": name,
        "kind": "twin",
        "seed": seed,
        "model": {"kind": "lorenz", "delta": 0.01, "g": float(np.sqrt(2.0))},
        "observation": obs,
        "filters": [{"kind": "implicit", "particles": m} for m in implicit_m]
        + [{"kind": "sir", "particles": m} for m in sir_m],
        "n_steps": n_steps,
        "check_times": check_times,
        "n_exp": n_exp,
    }


def _sks_twin(name, obs, n_modes, g, n_steps, n_exp, implicit_m, sir_m, seed):
    return {
        "schema_version": SCHEMA_VERSION,
        "name": name,
        "kind": "twin",
        "seed": seed,
        "model": {"kind": "sks", "n_modes": n_modes, "delta": 2.0**-10, "g": g},
        "observation": obs,
        "filters": [{"kind": "implicit", "particles": m} for m in implicit_m]
        + [{"kind": "sir", "particles": m} for m in sir_m],
        "n_steps": n_steps,
        "check_steps": [n_steps],
        "n_exp": n_exp,
    }


def preset(name: str, scale: str = "desk", seed: int = 20260826) -> dict:
    """Config for a named table/figure preset at 'desk' or 'paper' scale."""
    if scale not in ("desk", "paper"):
        raise ConfigError(f"config: unknown scale '{scale}'")
    desk = scale == "desk"
    full_obs = {"kind": "identity", "noise_std": float(np.sqrt(0.1)), "gap": 1}
    if name == "table1":
        return _lorenz_twin(
            "table1", full_obs,
            n_steps=500 if desk else 1200,
            check_times=[5.0] if desk else [5.0, 10.0, 12.0],
            n_exp=100 if desk else 1000,
            implicit_m=[5, 10, 20, 30], sir_m=[5, 10, 20, 30, 50],
            seed=seed,
        )
    if name == "table2":
        x_obs = {"kind": "selection", "indices": [0], "noise_std": float(np.sqrt(0.1)), "gap": 1}
        return _lorenz_twin(
            "table2", x_obs,
            n_steps=500 if desk else 1200,
            check_times=[5.0] if desk else [5.0, 10.0, 12.0],
            n_exp=100 if desk else 1000,
            implicit_m=[5, 10, 20, 30], sir_m=[5, 10, 20, 30, 50],
            seed=seed,
        )
    if name == "table3":
        sparse_obs = {"kind": "identity", "noise_std": float(np.sqrt(0.1)), "gap": 48}
        return _lorenz_twin(
            "table3", sparse_obs,
            n_steps=480 if desk else 960,
            check_times=[4.8] if desk else [4.8, 9.6],
            n_exp=50 if desk else 1000,
            implicit_m=[5, 10, 20] if not desk else [20],
            sir_m=[10, 20, 50, 100] if not desk else [20],
            seed=seed,
        )
    if name == "table4":
        obs = {"kind": "sks_physical", "noise_std": 1.0, "gap": 1}
        return _sks_twin(
            "table4", obs, n_modes=128, g=4.0, n_steps=100,
            n_exp=20 if desk else 500,
            implicit_m=[10] if desk else [10, 20, 50, 100, 200, 300],
            sir_m=[20, 100] if desk else [50, 100, 500, 1000],
            seed=seed,
        )
    if name == "table5":
        obs = {"kind": "sks_physical", "noise_std": 1.0, "gap": 1, "nonlinear": True}
        return _sks_twin(
            "table5", obs, n_modes=128, g=4.0, n_steps=100,
            n_exp=20 if desk else 500,
            implicit_m=[10] if desk else [10, 20, 50, 100],
            sir_m=[100] if desk else [50, 100, 500, 5000],
            seed=seed,
        )
    if name == "table6":
        obs = {"kind": "sks_physical", "noise_std": 1.0, "gap": 2}
        return _sks_twin(
            "table6", obs, n_modes=128, g=1.0, n_steps=100,
            n_exp=20 if desk else 500,
            implicit_m=[10] if desk else [10, 20],
            sir_m=[100] if desk else [500, 1000],
            seed=seed,
        )
    if name == "fig3":
        return {
            "schema_version": SCHEMA_VERSION,
            "name": "fig3",
            "kind": "convergence",
            "seed": seed,
            "model": {"kind": "lorenz", "g": float(np.sqrt(2.0))},
            "schemes": ["kp", "rk4"],
            "deltas": [2.0**-5, 2.0**-6, 2.0**-7, 2.0**-8, 2.0**-9],
            "delta_ref": 2.0**-12,
            "t_final": 1.0,
            "n_realizations": 200 if desk else 1000,
        }
    if name == "fig6":
        return {
            "schema_version": SCHEMA_VERSION,
            "name": "fig6",
            "kind": "convergence",
            "seed": seed,
            "model": {"kind": "sks", "n_modes": 64 if desk else 512, "g": 4.0},
            "schemes": ["smooth", "white"],
            "deltas": [2.0**-4, 2.0**-5, 2.0**-6, 2.0**-7, 2.0**-8],
            "delta_ref": 2.0**-12,
            "t_final": 3.0,
            "n_realizations": 200 if desk else 2000,
        }
    raise ConfigError(f"config: unknown preset '{name}'")


PRESET_NAMES = ("table1", "table2", "table3", "table4", "table5", "table6", "fig3", "fig6")


def resolve_config(doc: dict) -> dict:
    """Expand a {'preset': ...} document into a full config, applying overrides."""
    if "preset" in doc:
        _check_keys(
            doc,
            {"preset"},
            {"schema_version", "scale", "seed", "n_exp", "n_steps", "check_times",
             "check_steps", "filters", "n_realizations", "name", "model",
             "observation", "deltas", "delta_ref", "t_final", "schemes"},
            "config",
        )
        config = preset(doc["preset"], doc.get("scale", "desk"), doc.get("seed", 20260826))
        for key, value in doc.items():
            if key in ("preset", "scale"):
                continue
            config[key] = value
        return config
    return doc
