"""Command-line front end.

    da run <config> [--strict] [--out DIR]
    da check [--suite NAME]
    da plotdata <csv> --kind {convergence,error_bars}

<config> is either a JSON file (see docs/config.md) or a bare preset name
(table1..table6, fig3, fig6), which runs at desk scale.  DA_THREADS caps the
worker count for twin experiments.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys

import numpy as np

from . import __version__
from .filters import ParticleEnsemble, resample
from .harness import aggregate_errors, run_convergence_study, run_twin_experiment
from .minimize import minimize_posterior
from .numerics import RngStream, derive_stream, finite_difference_jacobian_det
from .oracles import scalar_kalman_filter
from .posterior import PosteriorBuilder
from .sampling import implicit_sample, solve_lambda
from .scenarios import (
    PRESET_NAMES,
    ConfigError,
    make_convergence_problems,
    make_scenario,
    preset,
    resolve_config,
)
from .sde import DiscreteModel, cubic_observation, linear_observation

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_CONFIG = 2


def _fmt(x: float) -> str:
    # locale-independent decimal formatting for CSV fields
    return format(float(x), ".10g")


def _load_config(path: str) -> dict:
    if not os.path.exists(path) and path in PRESET_NAMES:
        return preset(path)
    try:
        with open(path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"config: cannot read '{path}': {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(
            f"config: invalid JSON in '{path}' at line {exc.lineno}, column {exc.colno}: {exc.msg}"
        ) from exc
    if not isinstance(doc, dict):
        raise ConfigError("config: top level must be an object")
    return resolve_config(doc)


def _split_label(label: str) -> tuple[str, int]:
    kind, _, m = label.rpartition("-M")
    return kind, int(m)


def _run_twin(config: dict, out_dir: str, strict: bool) -> int:
    scenario = make_scenario(config)
    seed = int(config.get("seed", 20260826))
    n_exp = int(config.get("n_exp", 10))
    records = run_twin_experiment(scenario, n_exp, seed, config_dict=config)
    stats = aggregate_errors(records)
    rows = []
    dominated = []
    for s in stats:
        kind, particles = _split_label(s.label)
        rows.append(
            [
                scenario.name,
                kind,
                str(particles),
                _fmt(s.check_step * scenario.delta),
                _fmt(s.mean_error),
                _fmt(s.error_variance),
                str(s.collapses),
                str(n_exp),
                str(seed),
            ]
        )
        if s.collapses > n_exp // 2:
            dominated.append(s.label)
    _write_results(out_dir, rows)
    lines = [f"scenario {scenario.name}: {n_exp} experiments, seed {seed}"]
    for s in stats:
        lines.append(
            f"  {s.label} t={s.check_step * scenario.delta:g}: "
            f"mean error {s.mean_error:.4f}, variance {s.error_variance:.4f}, "
            f"{s.collapses}/{n_exp} collapsed"
        )
    _write_summary(out_dir, lines)
    if strict and dominated:
        print(f"strict: collapse-dominated filters: {', '.join(sorted(set(dominated)))}",
              file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


def _run_convergence(config: dict, out_dir: str) -> int:
    problems = make_convergence_problems(config)
    seed = int(config.get("seed", 20260826))
    n_real = int(config.get("n_realizations", 200))
    name = config.get("name", "convergence")
    rows = []
    lines = [f"scenario {name}: {n_real} realizations, seed {seed}"]
    for scheme, problem in problems.items():
        result = run_convergence_study(
            problem,
            config["deltas"],
            config["delta_ref"],
            n_real,
            config["t_final"],
            seed,
        )
        for d, e in zip(result.deltas, result.mean_errors):
            rows.append([name, scheme, "0", _fmt(d), _fmt(e), "0",
                         str(result.n_discarded), str(result.n_used), str(seed)])
        rows.append([name, f"{scheme}-slope", "0", "0", _fmt(result.slope), "0",
                     str(result.n_discarded), str(result.n_used), str(seed)])
        lines.append(
            f"  {scheme}: slope {result.slope:.3f} over deltas "
            f"[{_fmt(result.deltas.max())}, {_fmt(result.deltas.min())}], "
            f"{result.n_discarded} discarded"
        )
    _write_results(out_dir, rows)
    _write_summary(out_dir, lines)
    return EXIT_OK


def _write_results(out_dir: str, rows: list):
    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir, "results.csv")
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(
            ["scenario", "filter", "particles", "time", "mean_error",
             "error_variance", "collapses", "n_exp", "seed"]
        )
        writer.writerows(rows)


def _write_summary(out_dir: str, lines: list):
    text = "\n".join(lines + [f"version {__version__}"]) + "\n"
    with open(os.path.join(out_dir, "summary.txt"), "w", encoding="utf-8") as fh:
        fh.write(text)
    print(text, end="")


def cmd_run(args) -> int:
    try:
        config = _load_config(args.config)
        if "kind" not in config:
            raise ConfigError("config: missing required key 'kind'")
        if config["kind"] == "twin":
            return _run_twin(config, args.out, args.strict)
        if config["kind"] == "convergence":
            return _run_convergence(config, args.out)
        raise ConfigError(f"config: unknown kind '{config['kind']}'")
    except ConfigError as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # runtime failure, not a config problem
        print(f"run failed: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


# ---------------------------------------------------------------------------
# da check: fast self-check suites
# ---------------------------------------------------------------------------


def _random_linear_builder(rng: RngStream, n: int, nonlinear_obs: bool) -> PosteriorBuilder:
    a = rng.standard_normal(n * n).reshape(n, n) * 0.5
    noise = 0.3 + 0.5 * np.abs(rng.standard_normal(n))
    eye = np.eye(n)
    zero = np.zeros((n, n))
    model = DiscreteModel(
        dim=n,
        mapping=lambda x: a @ x,
        map_jacobian=lambda x: a,
        map_hessian_vp=lambda x, v: zero,
        noise_diag=noise,
    )
    p = eye + 0.1 * rng.standard_normal(n * n).reshape(n, n)
    q = (0.5 + rng.uniform()) * eye
    obs = cubic_observation(p, q) if nonlinear_obs else linear_observation(p, q)
    return PosteriorBuilder(model, obs)


def check_jacobian() -> bool:
    """log J equals log|det L| on quadratic posteriors and matches a
    finite-difference determinant of the random map on non-quadratic ones."""
    rng = derive_stream(1234, "check", "jacobian")
    ok = True
    for case in range(10):
        n = (2, 3, 6)[case % 3]
        builder = _random_linear_builder(rng, n, nonlinear_obs=False)
        posterior = builder.build(rng.standard_normal(n), rng.standard_normal(n))
        minres = minimize_posterior(posterior)
        sample = implicit_sample(posterior, minres, rng)
        if abs(sample.log_jacobian - minres.log_det_l) > 1e-10:
            ok = False
    for case in range(5):
        n = (2, 3)[case % 2]
        builder = _random_linear_builder(rng, n, nonlinear_obs=True)
        posterior = builder.build(0.1 * rng.standard_normal(n), rng.standard_normal(n))
        minres = minimize_posterior(posterior)
        xi = rng.standard_normal(n)

        def xi_to_x(z):
            return solve_lambda(posterior, minres, z)[1]

        sample_lam, x, direction, _ = solve_lambda(posterior, minres, xi)
        from .sampling import jacobian_log

        log_j, _ = jacobian_log(posterior, minres, sample_lam, float(xi @ xi), x, direction)
        fd = finite_difference_jacobian_det(xi_to_x, xi, 1e-6)
        if abs(np.exp(log_j) - abs(fd)) > 1e-3 * abs(fd):
            ok = False
    return ok


def check_kalman() -> bool:
    """Implicit filter posterior mean tracks the exact Gaussian recursion on
    x' = 0.9 x + 0.5 W, b = x + 0.3 V."""
    config = {
        "schema_version": 1,
        "name": "kalman-check",
        "kind": "twin",
        "model": {"kind": "linear_gaussian", "coefficient": 0.9, "noise_std": 0.5},
        "observation": {"kind": "identity", "noise_std": 0.3},
        "filters": [{"kind": "implicit", "particles": 400}],
        "n_steps": 30,
    }
    scenario = make_scenario(config)
    from .harness import _reference_and_observations, _run_filter

    seed, m = 777, 400
    ok = True
    for exp_index in range(3):
        reference, observations = _reference_and_observations(scenario, seed, exp_index)
        config_f = scenario.filter_configs[0]
        result = _run_filter(
            scenario, config_f, observations, reference, seed, exp_index,
            scenario.filter_label(config_f), collect_estimates=True,
        )
        obs_values = [observations[k][0] for k in sorted(observations)]
        means, variances = scalar_kalman_filter(obs_values, 0.9, 0.5, 0.3, 0.0)
        for k, step in enumerate(sorted(observations)):
            se = np.sqrt(variances[k] / m)
            if abs(result.estimates[step][0] - means[k]) > 5.0 * se:
                ok = False
    return ok


def check_resampling() -> bool:
    """Each resampling scheme reproduces the weights in expectation (3 sigma)."""
    rng = derive_stream(99, "check", "resampling")
    m = 8
    weights = np.array([rng.uniform() for _ in range(m)]) + 0.05
    weights = weights / weights.sum()
    positions = np.arange(m, dtype=float).reshape(-1, 1)
    ensemble = ParticleEnsemble(positions, np.log(weights), 0)
    reps = 4000
    ok = True
    for scheme in ("systematic", "multinomial", "residual"):
        counts = np.zeros((reps, m))
        for rep in range(reps):
            out = resample(ensemble, derive_stream(99, scheme, rep), scheme)
            idx = out.positions[:, 0].astype(int)
            counts[rep] = np.bincount(idx, minlength=m)
        mean = counts.mean(axis=0)
        se = counts.std(axis=0, ddof=1) / np.sqrt(reps) + 1e-12
        if np.any(np.abs(mean - m * weights) > 3.0 * se):
            ok = False
    return ok


CHECK_SUITES = {
    "jacobian": check_jacobian,
    "kalman": check_kalman,
    "resampling": check_resampling,
}


def cmd_check(args) -> int:
    names = [args.suite] if args.suite else list(CHECK_SUITES)
    for name in names:
        if name not in CHECK_SUITES:
            print(f"unknown suite '{name}'; choose from {', '.join(CHECK_SUITES)}",
                  file=sys.stderr)
            return EXIT_CONFIG
    failed = False
    for name in names:
        passed = CHECK_SUITES[name]()
        print(f"{name}: {'PASS' if passed else 'FAIL'}")
        failed = failed or not passed
    return EXIT_RUNTIME if failed else EXIT_OK


# ---------------------------------------------------------------------------
# da plotdata: turn results.csv into per-series (x, y) files
# ---------------------------------------------------------------------------


def cmd_plotdata(args) -> int:
    try:
        with open(args.csv, "r", encoding="utf-8") as fh:
            rows = list(csv.DictReader(fh))
    except OSError as exc:
        print(f"cannot read '{args.csv}': {exc}", file=sys.stderr)
        return EXIT_CONFIG
    if not rows:
        print("empty CSV: no data rows", file=sys.stderr)
        return EXIT_CONFIG
    stem = os.path.splitext(args.csv)[0]
    written = []
    if args.kind == "convergence":
        series = {}
        for row in rows:
            label = row["filter"]
            if label.endswith("-slope"):
                continue
            series.setdefault(label, []).append((float(row["time"]), float(row["mean_error"])))
        for label, points in series.items():
            path = f"{stem}_{label}.dat"
            with open(path, "w", encoding="utf-8") as fh:
                fh.write("# delta mean_error\n")
                for x, y in sorted(points):
                    fh.write(f"{_fmt(x)} {_fmt(y)}\n")
            written.append(path)
    else:
        series = {}
        for row in rows:
            key = f"{row['filter']}_t{row['time']}"
            series.setdefault(key, []).append(
                (int(row["particles"]), float(row["mean_error"]), float(row["error_variance"]))
            )
        for key, points in series.items():
            path = f"{stem}_{key}.dat"
            with open(path, "w", encoding="utf-8") as fh:
                fh.write("# particles mean_error error_variance\n")
                for m, y, v in sorted(points):
                    fh.write(f"{m} {_fmt(y)} {_fmt(v)}\n")
            written.append(path)
    for path in written:
        print(path)
    return EXIT_OK


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="da", description=__doc__.strip().splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run a twin-experiment or convergence scenario")
    p_run.add_argument("config", help="JSON config path or preset name")
    p_run.add_argument("--strict", action="store_true",
                       help="exit nonzero if any filter collapses in most experiments")
    p_run.add_argument("--out", default=".", help="output directory")
    p_run.set_defaults(func=cmd_run)

    p_check = sub.add_parser("check", help="run the fast self-check suites")
    p_check.add_argument("--suite", default=None, help="jacobian, kalman, or resampling")
    p_check.set_defaults(func=cmd_check)

    p_plot = sub.add_parser("plotdata", help="extract plot-ready series from results.csv")
    p_plot.add_argument("csv", help="results.csv produced by `da run`")
    p_plot.add_argument("--kind", required=True, choices=("convergence", "error_bars"))
    p_plot.set_defaults(func=cmd_plotdata)

    args = parser.parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
