"""Experiment harness: metrics, bandit tables, weight and missingness
heatmaps, and the sepsis evaluation suite.

Each runner takes a plain config mapping (parsed from TOML by the CLI),
returns rows, and can write them as CSV. Random draws come from streams keyed
by the master seed and the task's coordinates, so outputs do not depend on
the number of worker processes.
"""
from __future__ import annotations

import csv
import io as _io
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from typing import Any, Callable, Mapping, Optional, Sequence

import numpy as np
from scipy.stats import spearmanr

from . import annotation as ann
from .annotation import AvgWeightTable, Constant, EqualSplit, RandomUniform
from .environments import (
    eps_greedy,
    make_environment,
    make_policy_set,
    optimal_policy,
)
from .errors import ConfigError
from .estimators import (
    cis_estimate,
    cpdis_estimate,
    cstar_is_estimate,
    cstar_pdis_estimate,
    is_estimate,
    naive_unweighted_estimate,
    naive_weighted_estimate,
    pdis_estimate,
    weighted_variant,
)
from .mdp import (
    Policy,
    TabularMDP,
    exact_policy_value,
    horizon_q_values,
    policy_kl,
    sample_trajectories,
    state_occupancy,
)
from .rng import stream

# --------------------------------------------------------------------------
# metrics


@dataclass
class MetricsReport:
    estimates: np.ndarray  # [P, K]
    true_values: np.ndarray  # [P]
    v_b: float
    bias: np.ndarray
    std: np.ndarray
    rmse: np.ndarray
    rmse_per_seed: np.ndarray
    spearman_per_seed: np.ndarray
    accuracy_per_seed: np.ndarray
    fpr_per_seed: np.ndarray
    fnr_per_seed: np.ndarray
    ess: Optional[np.ndarray] = None

    @staticmethod
    def _ms(x) -> tuple[float, float]:
        x = np.asarray(x, dtype=float)
        x = x[~np.isnan(x)]
        if x.size == 0:
            return float("nan"), float("nan")
        return float(x.mean()), float(x.std())

    def summary(self) -> dict:
        out = {}
        for name, arr in (
            ("rmse", self.rmse_per_seed),
            ("spearman", self.spearman_per_seed),
            ("accuracy", self.accuracy_per_seed),
            ("fpr", self.fpr_per_seed),
            ("fnr", self.fnr_per_seed),
        ):
            out[f"{name}_mean"], out[f"{name}_std"] = self._ms(arr)
        if self.ess is not None:
            out["ess_mean"], out["ess_std"] = self._ms(self.ess)
        return out


def _spearman(x: np.ndarray, y: np.ndarray) -> float:
    if np.all(x == x[0]) or np.all(y == y[0]):
        return float("nan")
    return float(spearmanr(x, y).statistic)


def compute_metrics(estimates, true_values, v_b: float, ess=None) -> MetricsReport:
    """``estimates`` is [policies, seeds]. Spearman (average ranks on ties)
    and the classification metrics are computed per seed."""
    est = np.asarray(estimates, dtype=float)
    v = np.asarray(true_values, dtype=float)
    if est.ndim != 2 or est.size == 0 or est.shape[0] != v.size:
        raise ValueError("estimates must be a nonempty [policies, seeds] array matching true_values")
    P, K = est.shape
    err = est - v[:, None]
    bias = err.mean(axis=1)
    std = est.std(axis=1)
    rmse = np.sqrt(np.mean(err**2, axis=1))
    rmse_seed = np.sqrt(np.mean(err**2, axis=0))
    spear = np.array([_spearman(est[:, k], v) for k in range(K)]) if P >= 2 else np.full(K, np.nan)
    pos = v >= v_b
    pred = est >= v_b
    acc = np.mean(pred == pos[:, None], axis=0)
    n_neg, n_pos = int((~pos).sum()), int(pos.sum())
    fp = np.sum(pred & ~pos[:, None], axis=0)
    fn = np.sum(~pred & pos[:, None], axis=0)
    fpr = fp / n_neg if n_neg else np.full(K, np.nan)
    fnr = fn / n_pos if n_pos else np.full(K, np.nan)
    return MetricsReport(est, v, float(v_b), bias, std, rmse, rmse_seed, spear, acc,
                         np.asarray(fpr, float), np.asarray(fnr, float),
                         None if ess is None else np.asarray(ess, dtype=float))


# --------------------------------------------------------------------------
# config helpers and output


def _get(cfg: Mapping, key: str, default=..., path: str = ""):
    if key in cfg:
        return cfg[key]
    if default is ...:
        raise ConfigError("missing required field", f"{path}.{key}" if path else key)
    return default


def _floats(x, path: str) -> list:
    try:
        out = [float(v) for v in x]
    except (TypeError, ValueError):
        raise ConfigError("expected a list of numbers", path) from None
    if not out:
        raise ConfigError("must not be empty", path)
    return out


def fmt(x) -> str:
    if isinstance(x, (bool, np.bool_)):
        return "1" if x else "0"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        x = float(x)
        if math.isnan(x):
            return "nan"
        return repr(x)
    return str(x)


def rows_to_csv(rows: Sequence[Mapping], columns: Optional[Sequence[str]] = None) -> str:
    if not rows:
        return ""
    cols = list(columns or rows[0].keys())
    buf = _io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(cols)
    for r in rows:
        w.writerow([fmt(r[c]) for c in cols])
    return buf.getvalue()


def _pstr(p) -> str:
    return "[" + ",".join(f"{v:g}" for v in p) + "]"


def _run_tasks(fn: Callable, tasks: Sequence, jobs: int, init: Optional[Callable] = None, initargs=()) -> list:
    """Ordered map; identical results for any ``jobs``."""
    if jobs <= 1 or len(tasks) <= 1:
        if init is not None:
            init(*initargs)
        return [fn(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=jobs, initializer=init, initargs=initargs) as ex:
        return list(ex.map(fn, tasks))


def _env(cfg: Mapping, path: str) -> TabularMDP:
    env = _get(cfg, "environment", path=path)
    if isinstance(env, str):
        return make_environment(env)
    name = _get(env, "name", path=f"{path}.environment")
    params = {k: v for k, v in env.items() if k != "name"}
    return make_environment(name, params)


# --------------------------------------------------------------------------
# bandit tables


def _grid_policy(row: Sequence[float], mdp: TabularMDP, grid_state: int, default_action: int) -> Policy:
    S, A = mdp.num_states, mdp.num_actions
    probs = np.zeros((S, A))
    probs[:, default_action] = 1.0
    probs[grid_state] = np.asarray(row, dtype=float)
    return Policy(probs, name=_pstr(row))


def _annotated_states_table(mdp: TabularMDP, states) -> np.ndarray:
    tab = np.zeros((mdp.num_states, mdp.num_actions))
    idx = range(mdp.num_states) if states is None else [int(s) for s in states]
    tab[list(idx)] = 1.0
    return tab


def _bandit_cell(task) -> list[dict]:
    mdp, cfg, ib, pb_row, pe_rows = task
    gs, da = cfg["grid_state"], cfg["default_action"]
    pb = _grid_policy(pb_row, mdp, gs, da)
    R = cfg["repetitions"]
    seed = cfg["seed"]
    batch = sample_trajectories(mdp, pb, R, stream(seed, "bandit_table.data", ib))
    noise = mdp.reward_std if cfg["annotation_noise"] == "reward" else float(cfg["annotation_noise"])
    means = np.broadcast_to(mdp.reward_mean, (1,) + mdp.reward_mean.shape)
    ad = ann.annotate_from_table(batch, means, noise, cfg["availability"], seed, stream(seed, "bandit_table.annot", ib))
    rows = []
    for pe_row in pe_rows:
        pe = _grid_policy(pe_row, mdp, gs, da)
        v = exact_policy_value(mdp, pe)
        for eid in cfg["estimators"]:
            if eid == "is":
                rep = is_estimate(batch, pe, pb)
            elif eid == "naive":
                rep = naive_unweighted_estimate(ad, pe, pb)
            elif eid == "cstar_is":
                rep = cstar_is_estimate(ad, pe)
            else:
                raise ConfigError(f"unknown bandit-table estimator {eid!r}", "estimators")
            x = rep.per_trajectory_estimates
            bias = float(np.mean(x) - v)
            std = float(np.std(x))
            rows.append({
                "pi_b": _pstr(pb_row), "pi_e": _pstr(pe_row), "estimator": eid,
                "bias": bias, "std": std, "rmse": math.sqrt(bias**2 + std**2),
                "se": std / math.sqrt(x.size), "n_units": int(x.size), "true_value": v,
            })
    return rows


def run_bandit_table(config: Mapping, jobs: int = 1) -> list[dict]:
    """Single-sample (bias, std, RMSE) for each (pi_b, pi_e) cell.

    The unit is one factual sample for IS and C*-IS and one augmented-dataset
    entry for the naive estimator. ``se`` is the standard error of the bias
    estimate over the repetitions.
    """
    mdp = _env(config, "bandit_table")
    if mdp.horizon != 1:
        raise ConfigError("bandit tables need a horizon-1 environment", "environment")
    A = mdp.num_actions
    b_rows = [_floats(r, "behavior_grid") for r in _get(config, "behavior_grid")]
    e_rows = [_floats(r, "eval_grid") for r in _get(config, "eval_grid")]
    for r in b_rows + e_rows:
        if len(r) != A:
            raise ConfigError(f"policy row {r} does not have {A} entries", "behavior_grid/eval_grid")
    cfg = {
        "grid_state": int(config.get("grid_state", 0)),
        "default_action": int(config.get("default_action", 0)),
        "repetitions": int(config.get("repetitions", 100_000)),
        "estimators": list(config.get("estimators", ["is", "naive", "cstar_is"])),
        "annotation_noise": config.get("annotation_noise", "reward"),
        "availability": _annotated_states_table(mdp, config.get("annotated_states")),
        "seed": int(config.get("seed", 0)),
    }
    tasks = [(mdp, cfg, ib, pb, e_rows) for ib, pb in enumerate(b_rows)]
    out = []
    for rows in _run_tasks(_bandit_cell, tasks, jobs):
        out.extend(rows)
    return out


# --------------------------------------------------------------------------
# weight heatmap


def _uniform_moments(center: float, width: float, S: int, A: int) -> AvgWeightTable:
    """Moments of RandomUniform weights with every annotation present."""
    k = A - 1
    v = width**2 / 12.0 / k**2  # variance of one counterfactual weight
    mean = np.zeros((S, A, A))
    cov = np.zeros((S, A, A, A))
    for a in range(A):
        for x in range(A):
            mean[:, a, x] = 1.0 - center if x == a else center / k
        for x in range(A):
            for y in range(A):
                if x == a and y == a:
                    cov[:, a, x, y] = k * v
                elif x == a or y == a:
                    cov[:, a, x, y] = -v
                elif x == y:
                    cov[:, a, x, y] = v
    var = cov[..., np.arange(A), np.arange(A)].copy()
    return AvgWeightTable(mean, var, cov, np.ones((S, A), dtype=np.int64))


def _heatmap_setup(config: Mapping, path: str):
    mdp = _env(config, path)
    if mdp.horizon != 1:
        raise ConfigError("heatmaps need a horizon-1 environment", "environment")
    pb = Policy(np.broadcast_to(_floats(_get(config, "behavior", path=path), "behavior"), mdp.reward_mean.shape).copy())
    pe = Policy(np.broadcast_to(_floats(_get(config, "evaluation", path=path), "evaluation"), mdp.reward_mean.shape).copy())
    seed = int(config.get("seed", 0))
    n = int(config.get("samples", 2000))
    noise = config.get("annotation_noise", "reward")
    noise = mdp.reward_std if noise == "reward" else float(noise)
    return mdp, pb, pe, seed, n, noise


def run_weight_heatmap(config: Mapping, jobs: int = 1) -> list[dict]:
    """C-IS std over a grid of constant weights (``mode = "grid"``) or over
    widths of uniform random weights centred at ``center``
    (``mode = "uniform_width"``).

    Grid axes: ``w10`` = W(1|s,0) and ``w01`` = W(0|s,1). All cells share one
    dataset. A cell is flagged biased when |mean - v| > 4 SE.
    """
    from .theory import constant_weight_moments, theory_cis

    mdp, pb, pe, seed, n, noise = _heatmap_setup(config, "weight_heatmap")
    if mdp.num_actions != 2:
        raise ConfigError("the weight heatmap is defined for two actions", "environment")
    S = mdp.num_states
    v = exact_policy_value(mdp, pe)
    batch = sample_trajectories(mdp, pb, n, stream(seed, "heatmap.data"))
    means = np.broadcast_to(mdp.reward_mean, (1,) + mdp.reward_mean.shape)
    ad = ann.annotate_from_table(batch, means, noise, np.ones(mdp.reward_mean.shape), seed, stream(seed, "heatmap.annot"))
    dsig = np.zeros_like(mdp.reward_mean) if np.ndim(noise) else np.full(mdp.reward_mean.shape, float(noise) ** 2) - mdp.reward_std**2
    mode = config.get("mode", "grid")
    rows = []

    def cell(scheme, theory_w, **coords):
        wd = ann.assign_weights(ad, scheme)
        pbp = ann.augmented_policy(ann.average_weights(wd, S), pb)
        rep = cis_estimate(wd, pe, pbp)
        x = rep.per_trajectory_estimates
        std = float(np.std(x))
        se = float(np.std(x, ddof=1) / math.sqrt(x.size))
        bias = float(np.mean(x) - v)
        th = theory_cis(mdp, pe, pb, theory_w, None, dsig)
        row = dict(coords)
        row.update({
            "std": std, "log10_std": math.log10(std) if std > 0 else float("-inf"),
            "bias": bias, "se": se, "biased": abs(bias) > 4 * se,
            "theory_std": th.std, "theory_bias": th.bias,
        })
        return row

    if mode == "grid":
        grid = _floats(config.get("grid", [i / 10 for i in range(11)]), "grid")
        for x in grid:
            for y in grid:
                table = np.array([[1 - x, x], [y, 1 - y]])
                r = cell(Constant(table), constant_weight_moments(table, S), w10=x, w01=y)
                r["equal_cell"] = x == 0.5 and y == 0.5
                r["factual_only_cell"] = x == 0 and y == 0
                rows.append(r)
    elif mode == "uniform_width":
        center = float(config.get("center", 0.5))
        for wdt in _floats(config.get("widths", [0.0, 0.2, 0.4, 0.6, 0.8, 1.0]), "widths"):
            scheme = RandomUniform(center, wdt, int(stream(seed, "heatmap.weights").integers(2**62)))
            rows.append(cell(scheme, _uniform_moments(center, wdt, S, 2), center=center, width=wdt))
    else:
        raise ConfigError(f"unknown mode {mode!r}", "mode")
    return rows


# --------------------------------------------------------------------------
# missingness heatmap


def run_missingness_heatmap(config: Mapping, jobs: int = 1) -> list[dict]:
    """C-IS std with equal split over available annotations, with and without
    imputation, over per-action availability fractions ``p0`` x ``p1``.
    Availability masks are nested across fractions (one uniform per slot)."""
    mdp, pb, pe, seed, n, noise = _heatmap_setup(config, "missingness_heatmap")
    if mdp.num_actions != 2:
        raise ConfigError("the missingness heatmap is defined for two actions", "environment")
    S = mdp.num_states
    v = exact_policy_value(mdp, pe)
    grid = _floats(config.get("grid", [i / 10 for i in range(11)]), "grid")
    batch = sample_trajectories(mdp, pb, n, stream(seed, "missing.data"))
    means = np.broadcast_to(mdp.reward_mean, (1,) + mdp.reward_mean.shape)
    full = ann.annotate_from_table(batch, means, noise, np.ones((S, 2)), seed, stream(seed, "missing.annot"))
    avail_seed = int(stream(seed, "missing.avail").integers(2**62))
    rows = []
    for p0 in grid:
        for p1 in grid:
            keep = ann.availability_mask(batch, np.tile([p0, p1], (S, 1)), avail_seed) & full.available
            ad = ann.AnnotatedDataset(batch, full.values, keep)
            row = {"p0": p0, "p1": p1, "available_fraction": float(keep.sum() / max(full.available.sum(), 1))}
            for tag, data in (("unimputed", ad), ("imputed", ann.impute_missing(ad, S))):
                wd = ann.assign_weights(data, EqualSplit())
                pbp = ann.augmented_policy(ann.average_weights(wd, S), pb)
                x = cis_estimate(wd, pe, pbp).per_trajectory_estimates
                se = float(np.std(x, ddof=1) / math.sqrt(x.size))
                row[f"std_{tag}"] = float(np.std(x))
                row[f"bias_{tag}"] = float(np.mean(x) - v)
                row[f"se_{tag}"] = se
            rows.append(row)
    return rows


# --------------------------------------------------------------------------
# sepsis suite


@dataclass
class SepsisSuiteConfig:
    n_datasets: int = 50
    n_episodes: int = 1000
    epsilon: float = 0.1
    flip_counts: tuple = (50, 100, 200, 300, 400)
    per_count: int = 5
    noise_stds: tuple = (0.0, 0.1, 0.2, 0.5, 1.0)
    availability_fractions: tuple = (0.0, 0.1, 0.25, 0.5, 0.75, 1.0)
    low_availability: float = 0.1
    low_availability_noise_stds: tuple = (0.0, 0.2, 0.5, 1.0)
    impute_by_time: bool = False
    seed: int = 0
    sepsis_config: Optional[Any] = None

    @classmethod
    def from_dict(cls, d: Mapping) -> "SepsisSuiteConfig":
        known = set(cls.__dataclass_fields__)
        extra = set(d) - known - {"kind", "environment", "jobs"}
        if extra:
            raise ConfigError(f"unknown keys {sorted(extra)}", "sepsis_suite")
        kw = {}
        for k in known:
            if k not in d:
                continue
            val = d[k]
            if k in ("noise_stds", "availability_fractions", "low_availability_noise_stds"):
                val = tuple(_floats(val, k))
            elif k == "flip_counts":
                val = tuple(int(x) for x in val)
            kw[k] = val
        cfg = cls(**kw)
        if cfg.n_datasets < 1 or cfg.n_episodes < 1:
            raise ConfigError("must be positive", "n_datasets/n_episodes")
        return cfg


_W: dict = {}  # per-process state for sepsis workers


def _sepsis_init(state: dict) -> None:
    _W.clear()
    _W.update(state)


def _rmse_keys(cfg: SepsisSuiteConfig) -> list[str]:
    keys = ["pdis", "pdwis", "naive_unweighted", "naive_weighted",
            "cstar_qe", "cstar_qb", "cstar_corrected", "cstar_qe_wis", "cstar_qb_wis"]
    keys += [f"noise:{s!r}" for s in cfg.noise_stds]
    for f in cfg.availability_fractions:
        keys += [f"avail:{f!r}:unimputed", f"avail:{f!r}:imputed"]
    for s in cfg.low_availability_noise_stds:
        keys += [f"lownoise:{s!r}:unimputed", f"lownoise:{s!r}:imputed"]
    return keys


def _sepsis_dataset(d: int) -> dict:
    mdp, pb, policies, cfg = _W["mdp"], _W["pi_b"], _W["policies"], _W["cfg"]
    q_e, q_b = _W["q_e"], _W["q_b"]
    seed = cfg.seed
    S, A = mdp.num_states, mdp.num_actions
    batch = sample_trajectories(mdp, pb, cfg.n_episodes, stream(seed, "dataset", d))
    full_av = np.ones((S, A))
    avail_seed = int(stream(seed, "sepsis.avail", d).integers(2**62))
    mhat = ann.fit_approximate_mdp(batch, S, A, mdp.horizon)
    qhat_b = mhat.q_values(pb)
    ad_qb = ann.annotate_from_table(batch, q_b, 0.0, full_av, avail_seed)
    est = {k: np.zeros(len(policies)) for k in _rmse_keys(cfg)}
    ess = {k: np.zeros(len(policies)) for k in est}

    def put(key, p, rep):
        est[key][p] = rep.value
        ess[key][p] = rep.ess

    def partial(ad_full, frac, p, key_prefix):
        keep = ann.availability_mask(batch, np.full((S, A), frac), avail_seed) & ad_full.available
        ad = ann.AnnotatedDataset(batch, ad_full.values, keep)
        for tag, data in (("unimputed", ad), ("imputed", ann.impute_missing(ad, S, by_time=cfg.impute_by_time))):
            wd = ann.assign_weights(data, EqualSplit())
            pbp = ann.augmented_policy(ann.average_weights(wd, S), pb)
            put(f"{key_prefix}:{tag}", p, cpdis_estimate(wd, policies[p], pbp))

    for p, pe in enumerate(policies):
        rep = pdis_estimate(batch, pe, pb)
        put("pdis", p, rep)
        put("pdwis", p, weighted_variant(rep, "per_step"))
        ad_qe = ann.annotate_from_table(batch, q_e[p], 0.0, full_av, avail_seed)
        put("naive_unweighted", p, naive_unweighted_estimate(ad_qe, pe, pb))
        put("naive_weighted", p, naive_weighted_estimate(ad_qe, pe, pb))
        rep = cstar_pdis_estimate(ad_qe, pe)
        put("cstar_qe", p, rep)
        put("cstar_qe_wis", p, weighted_variant(rep, "trajectory"))
        rep = cstar_pdis_estimate(ad_qb, pe)
        put("cstar_qb", p, rep)
        put("cstar_qb_wis", p, weighted_variant(rep, "trajectory"))
        corrected = ann.correct_bias(ad_qb, mhat, pb, pe, qhat_b=qhat_b)
        put("cstar_corrected", p, cstar_pdis_estimate(corrected, pe))
        for k, sd in enumerate(cfg.noise_stds):
            noisy = ann.annotate_from_table(batch, q_e[p], sd, full_av, avail_seed, stream(seed, "sepsis.noise", d, p, k))
            put(f"noise:{sd!r}", p, cstar_pdis_estimate(noisy, pe))
        for f in cfg.availability_fractions:
            partial(ad_qe, f, p, f"avail:{f!r}")
        for k, sd in enumerate(cfg.low_availability_noise_stds):
            noisy = ann.annotate_from_table(batch, q_e[p], sd, full_av, avail_seed, stream(seed, "sepsis.lownoise", d, p, k))
            partial(noisy, cfg.low_availability, p, f"lownoise:{sd!r}")
    return {"est": est, "ess": ess}


@dataclass
class SepsisSuiteResult:
    tables: dict  # name -> rows
    metrics: dict  # key -> MetricsReport
    true_values: np.ndarray
    v_b: float
    kl: np.ndarray
    labels: list


TABLE2_ROWS = (
    ("pdis", "PDIS"),
    ("pdwis", "PDWIS"),
    ("naive_unweighted", "naive unweighted"),
    ("naive_weighted", "naive weighted"),
    ("cstar_qe", "C*-PDIS (G=Q_e)"),
    ("cstar_qe_wis", "C*-PDWIS (G=Q_e)"),
    ("cstar_qb", "C*-PDIS (G=Q_b)"),
    ("cstar_qb_wis", "C*-PDWIS (G=Q_b)"),
    ("cstar_corrected", "C*-PDIS (G=Q_b corrected)"),
)


def run_sepsis_suite(config: Mapping, jobs: int = 1) -> SepsisSuiteResult:
    cfg = SepsisSuiteConfig.from_dict(config)
    env = config.get("environment", "sepsis")
    params = {} if isinstance(env, str) else {k: v for k, v in env.items() if k != "name"}
    mdp = make_environment("sepsis", params)
    opt = optimal_policy(mdp)
    pb = eps_greedy(opt, cfg.epsilon)
    pset = make_policy_set(mdp, opt, cfg.flip_counts, cfg.per_count, cfg.seed)
    policies = list(pset.policies)
    true_values = np.array([exact_policy_value(mdp, p) for p in policies])
    v_b = exact_policy_value(mdp, pb)
    q_e = [horizon_q_values(mdp, p).values for p in policies]
    q_b = horizon_q_values(mdp, pb).values
    occ = state_occupancy(mdp, pb).time_average()
    occ = np.where(mdp.terminal_mask(), 0.0, occ)
    occ = occ / occ.sum()
    kl = np.array([policy_kl(p, pb, occ) for p in policies])

    state = {"mdp": mdp, "pi_b": pb, "policies": policies, "cfg": cfg, "q_e": q_e, "q_b": q_b}
    results = _run_tasks(_sepsis_dataset, list(range(cfg.n_datasets)), jobs, _sepsis_init, (state,))
    keys = _rmse_keys(cfg)
    est = {k: np.stack([r["est"][k] for r in results], axis=1) for k in keys}
    ess = {k: np.stack([r["ess"][k] for r in results], axis=1) for k in keys}
    metrics = {k: compute_metrics(est[k], true_values, v_b, ess[k].mean(axis=0)) for k in keys}

    tables = {}
    rows = []
    for key, label in TABLE2_ROWS:
        s = metrics[key].summary()
        rows.append({"estimator": label, "key": key, **s})
    tables["sepsis_table2"] = rows
    tables["sepsis_policies"] = [
        {"policy": pset.labels[i], "flips": pset.flip_counts[i], "value": true_values[i],
         "kl": kl[i], "better_than_behavior": true_values[i] >= v_b}
        for i in range(len(policies))
    ] + [{"policy": "behavior", "flips": -1, "value": v_b, "kl": 0.0, "better_than_behavior": True}]
    scatter = []
    for key in ("pdis", "cstar_qe", "cstar_qb", "cstar_corrected"):
        m = metrics[key]
        for i in range(len(policies)):
            scatter.append({"estimator": key, "policy": pset.labels[i], "kl": kl[i],
                            "bias": m.bias[i], "std": m.std[i], "rmse": m.rmse[i]})
    tables["sepsis_kl_scatter"] = scatter

    def sweep_row(key, **coords):
        s = metrics[key].summary()
        return {**coords, "rmse_mean": s["rmse_mean"], "rmse_std": s["rmse_std"],
                "spearman_mean": s["spearman_mean"], "ess_mean": s["ess_mean"]}

    tables["sepsis_noise_sweep"] = [sweep_row(f"noise:{sd!r}", noise_std=sd) for sd in cfg.noise_stds] + [
        sweep_row("pdis", noise_std=float("nan"))
    ]
    tables["sepsis_noise_sweep"][-1]["estimator"] = "pdis"
    for r in tables["sepsis_noise_sweep"][:-1]:
        r["estimator"] = "cstar_pdis"
    tables["sepsis_availability_sweep"] = [
        sweep_row(f"avail:{f!r}:{tag}", fraction=f, imputed=tag == "imputed")
        for f in cfg.availability_fractions for tag in ("unimputed", "imputed")
    ]
    tables["sepsis_low_availability_noise_sweep"] = [
        sweep_row(f"lownoise:{sd!r}:{tag}", fraction=cfg.low_availability, noise_std=sd, imputed=tag == "imputed")
        for sd in cfg.low_availability_noise_stds for tag in ("unimputed", "imputed")
    ]
    raw = []
    for key, _ in TABLE2_ROWS:
        for i in range(len(policies)):
            for d in range(cfg.n_datasets):
                raw.append({"estimator": key, "policy": pset.labels[i], "dataset": d,
                            "estimate": est[key][i, d], "ess": ess[key][i, d]})
    tables["sepsis_raw_estimates"] = raw
    return SepsisSuiteResult(tables, metrics, true_values, v_b, kl, list(pset.labels))


EXPERIMENTS = ("bandit_table", "weight_heatmap", "missingness_heatmap", "sepsis_suite")


def run_experiment(config: Mapping, jobs: int = 1) -> dict:
    """Dispatch on ``config["kind"]``; returns ``{table_name: rows}``."""
    kind = _get(config, "kind")
    if kind == "bandit_table":
        return {str(config.get("name", "bandit_table")): run_bandit_table(config, jobs)}
    if kind == "weight_heatmap":
        return {str(config.get("name", "weight_heatmap")): run_weight_heatmap(config, jobs)}
    if kind == "missingness_heatmap":
        return {str(config.get("name", "missingness_heatmap")): run_missingness_heatmap(config, jobs)}
    if kind == "sepsis_suite":
        return run_sepsis_suite(config, jobs).tables
    raise ConfigError(f"unknown experiment kind {kind!r}; expected one of {EXPERIMENTS}", "kind")
