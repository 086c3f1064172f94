import os

import numpy as np
import pytest

from implicitda.harness import (
    ErrorStats,
    EulerConvergenceProblem,
    ExperimentRecord,
    FilterRunResult,
    aggregate_errors,
    coarsen_normals,
    run_convergence_study,
    run_single_experiment,
    run_twin_experiment,
    worker_count,
)
from implicitda.scenarios import make_scenario

TINY_CONFIG = {
    "schema_version": 1,
    "name": "tiny",
    "kind": "twin",
    "model": {"kind": "linear_gaussian", "coefficient": 0.9, "noise_std": 0.5},
    "observation": {"kind": "identity", "noise_std": 0.3},
    "filters": [
        {"kind": "implicit", "particles": 6},
        {"kind": "sir", "particles": 6},
    ],
    "n_steps": 8,
}


def record(label_errors, collapsed=()):
    results = {}
    for label, errors in label_errors.items():
        results[label] = FilterRunResult(label, errors, collapsed=label in collapsed)
    return results


class TestAggregation:
    def test_mean_and_sample_variance(self):
        records = [
            ExperimentRecord(0, record({"implicit-M5": {10: 0.2}})),
            ExperimentRecord(1, record({"implicit-M5": {10: 0.4}})),
        ]
        stats = aggregate_errors(records)
        assert len(stats) == 1
        s = stats[0]
        assert s.label == "implicit-M5"
        assert s.check_step == 10
        assert np.isclose(s.mean_error, 0.3)
        assert np.isclose(s.error_variance, 0.02)  # ddof=1
        assert s.n_success == 2 and s.collapses == 0

    def test_collapsed_runs_counted_and_excluded(self):
        records = [
            ExperimentRecord(0, record({"sir-M5": {10: 0.2}})),
            ExperimentRecord(1, record({"sir-M5": {10: 99.0}}, collapsed={"sir-M5"})),
        ]
        stats = aggregate_errors(records)
        s = stats[0]
        assert s.collapses == 1
        assert s.n_success == 1
        assert np.isclose(s.mean_error, 0.2)
        assert s.single_sample

    def test_empty_records_rejected(self):
        with pytest.raises(ValueError):
            aggregate_errors([])


class TestTwinExperiments:
    def test_single_experiment_deterministic(self):
        scenario = make_scenario(TINY_CONFIG)
        a = run_single_experiment(scenario, 11, 0)
        b = run_single_experiment(scenario, 11, 0)
        for label in a.results:
            assert a.results[label].errors == b.results[label].errors

    def test_experiments_differ_across_indices(self):
        scenario = make_scenario(TINY_CONFIG)
        a = run_single_experiment(scenario, 11, 0)
        b = run_single_experiment(scenario, 11, 1)
        label = "implicit-M6"
        assert a.results[label].errors != b.results[label].errors

    def test_worker_count_env(self, monkeypatch):
        monkeypatch.delenv("DA_THREADS", raising=False)
        assert worker_count() == 1
        monkeypatch.setenv("DA_THREADS", "3")
        assert worker_count() == 3
        monkeypatch.setenv("DA_THREADS", "junk")
        assert worker_count() == 1

    def test_result_independent_of_worker_count(self, monkeypatch):
        scenario = make_scenario(TINY_CONFIG)
        monkeypatch.delenv("DA_THREADS", raising=False)
        serial = run_twin_experiment(scenario, 3, 7, config_dict=TINY_CONFIG)
        monkeypatch.setenv("DA_THREADS", "2")
        parallel = run_twin_experiment(scenario, 3, 7, config_dict=TINY_CONFIG)
        for a, b in zip(serial, parallel):
            assert a.exp_index == b.exp_index
            for label in a.results:
                assert a.results[label].errors == b.results[label].errors


class TestCoarsening:
    def test_sum_and_rescale(self):
        z = np.ones((4, 1))
        out = coarsen_normals(z, 2)
        assert out.shape == (2, 1)
        assert np.allclose(out, 2.0 / np.sqrt(2.0))

    def test_identity_factor(self):
        z = np.arange(6.0).reshape(3, 2)
        assert np.array_equal(coarsen_normals(z, 1), z)

    def test_variance_preserved(self):
        rng = np.random.default_rng(0)
        z = rng.standard_normal((4096, 1))
        out = coarsen_normals(z, 8)
        assert abs(out.std() - 1.0) < 0.05


class TestConvergenceStudy:
    def test_euler_linear_drift_slope_near_one(self):
        # dx = -x dt + dW has Euler strong order 1 under coupled increments
        problem = EulerConvergenceProblem(lambda x: -x, 1.0, np.array([1.0]))
        result = run_convergence_study(
            problem,
            deltas=[2.0**-3, 2.0**-4, 2.0**-5],
            delta_ref=2.0**-9,
            n_realizations=40,
            t_final=1.0,
            seed=5,
        )
        assert 0.7 < result.slope < 1.3
        assert result.n_used == 40
        # errors decrease monotonically with delta
        assert np.all(np.diff(result.mean_errors) < 0)

    def test_non_divisible_delta_rejected(self):
        problem = EulerConvergenceProblem(lambda x: -x, 1.0, np.array([1.0]))
        with pytest.raises(ValueError, match="divide"):
            run_convergence_study(problem, [0.3], 2.0**-6, 2, 1.0, 0)

    def test_all_blowups_rejected(self):
        class Exploding:
            noise_shape = (1,)

            def run(self, delta, normals):
                return None

        with pytest.raises(ValueError, match="blew up"):
            run_convergence_study(Exploding(), [0.5], 0.25, 3, 1.0, 0)
