import math

import numpy as np
import pytest

from semi_ope.errors import ConfigError
from semi_ope.experiments import compute_metrics, fmt, rows_to_csv, run_experiment


def test_metrics_on_known_estimates():
    v = np.array([1.0, 2.0, 3.0])
    est = np.array([[1.0, 1.2], [2.0, 1.8], [3.5, 2.5]])
    m = compute_metrics(est, v, v_b=1.5)
    assert np.allclose(m.bias, [0.1, -0.1, 0.0])
    assert np.allclose(m.rmse_per_seed, [math.sqrt(0.25 / 3), math.sqrt((0.04 + 0.04 + 0.25) / 3)])
    assert np.allclose(m.spearman_per_seed, 1.0)
    # policies >= v_b are positives; every prediction is right
    assert np.all(m.accuracy_per_seed == 1.0) and np.all(m.fpr_per_seed == 0.0)
    with pytest.raises(ValueError):
        compute_metrics(est[:2], v, 1.5)


def test_csv_formatting_is_stable():
    rows = [{"a": 0.1, "b": True, "c": "x"}, {"a": float("nan"), "b": False, "c": "y,z"}]
    text = rows_to_csv(rows)
    assert text.splitlines()[0] == "a,b,c"
    assert fmt(0.1) == repr(0.1)
    assert rows_to_csv(rows) == text


SMALL_BANDIT = {
    "kind": "bandit_table", "name": "t", "seed": 1,
    "environment": {"name": "two-state-bandit", "sigma": 0.5},
    "behavior_grid": [[0.5, 0.5]], "eval_grid": [[0.0, 1.0]],
    "annotated_states": [0], "repetitions": 2000,
}


def test_small_bandit_table():
    rows = run_experiment(SMALL_BANDIT)["t"]
    by = {r["estimator"]: r for r in rows}
    assert set(by) == {"is", "naive", "cstar_is"}
    assert abs(by["is"]["bias"]) < 4 * by["is"]["se"] + 1e-12
    assert abs(by["cstar_is"]["bias"]) < 4 * by["cstar_is"]["se"]
    assert by["cstar_is"]["std"] < by["is"]["std"]


def test_experiment_kind_validation():
    with pytest.raises(ConfigError):
        run_experiment({"kind": "nope"})
    with pytest.raises(ConfigError):
        run_experiment({**SMALL_BANDIT, "behavior_grid": [[1.0, 0.0, 0.0]]})


def test_small_sepsis_suite_runs():
    cfg = {"kind": "sepsis_suite", "seed": 2, "n_datasets": 2, "n_episodes": 100,
           "noise_stds": [0.0], "availability_fractions": [0.5], "low_availability_noise_stds": [0.5]}
    tables = run_experiment(cfg)
    assert {"sepsis_table2", "sepsis_policies", "sepsis_noise_sweep", "sepsis_availability_sweep"} <= set(tables)
    t2 = {r["key"]: r for r in tables["sepsis_table2"]}
    assert t2["cstar_qe"]["ess_mean"] == 100.0
    assert len(tables["sepsis_raw_estimates"]) == 9 * 26 * 2
