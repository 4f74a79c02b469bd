"""Importance-sampling value estimators, plain and counterfactual-augmented.

Every estimator returns an :class:`EstimateReport` carrying per-trajectory
contributions (their mean is the estimate) and per-trajectory importance
weights (used for ESS and self-normalization).

Ratio convention: a zero numerator gives a zero ratio whatever the
denominator. A positive numerator over a zero denominator at a position that
carries weight raises :class:`SupportViolation`.
"""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .annotation import (
    AnnotatedDataset,
    AugmentedPolicy,
    EqualSplit,
    WeightedDataset,
    assign_weights,
    augmented_policy,
    average_weights,
)
from .errors import DimensionError, SupportViolation
from .mdp import Policy, TrajectoryBatch


@dataclass(eq=False)
class EstimateReport:
    estimator_id: str
    value: float
    per_trajectory_estimates: np.ndarray
    per_trajectory_weights: np.ndarray
    ess: float
    n: int
    config: dict = field(default_factory=dict)
    # arrays needed by weighted_variant; never serialized
    components: dict = field(default_factory=dict, repr=False)

    @property
    def std(self) -> float:
        return float(np.std(self.per_trajectory_estimates))

    @property
    def se(self) -> float:
        if self.n < 2:
            return float("nan")
        return float(np.std(self.per_trajectory_estimates, ddof=1) / math.sqrt(self.n))

    def to_dict(self, include_per_trajectory: bool = True) -> dict:
        cfg = json.dumps(self.config, sort_keys=True, default=str)
        out = {
            "format_version": 1,
            "estimator": self.estimator_id,
            "value": self.value,
            "ess": self.ess,
            "n": self.n,
            "se": self.se,
            "config": self.config,
            "config_hash": hashlib.sha256(cfg.encode()).hexdigest()[:16],
        }
        if include_per_trajectory:
            out["per_trajectory_estimates"] = self.per_trajectory_estimates.tolist()
            out["per_trajectory_weights"] = self.per_trajectory_weights.tolist()
        return out

    def to_json(self, **kw) -> str:
        return json.dumps(self.to_dict(**kw), sort_keys=True)


def stable_mean(x: np.ndarray) -> float:
    x = np.asarray(x, dtype=float).ravel()
    if x.size == 0:
        raise ValueError("mean of an empty array")
    return math.fsum(x.tolist()) / x.size


def effective_sample_size(weights) -> float:
    w = np.asarray(weights, dtype=float).ravel()
    if w.size == 0 or np.any(w < 0):
        raise ValueError("ESS needs a nonempty nonnegative weight vector")
    s2 = math.fsum((w * w).tolist())
    if s2 == 0:
        raise ValueError("ESS is undefined for all-zero weights")
    return math.fsum(w.tolist()) ** 2 / s2


def _ess_or_zero(w: np.ndarray) -> float:
    try:
        return effective_sample_size(w)
    except ValueError:
        return 0.0


def _report(eid, per, weights, config=None, components=None) -> EstimateReport:
    per = np.asarray(per, dtype=float)
    return EstimateReport(eid, stable_mean(per), per, np.asarray(weights, dtype=float),
                          _ess_or_zero(weights), per.size, dict(config or {}), dict(components or {}))


def _safe_ratio(num: np.ndarray, den: np.ndarray, need: np.ndarray, states, actions, what: str) -> np.ndarray:
    """num/den with 0/anything = 0; raise where ``need`` and den == 0 < num."""
    bad = need & (num > 0) & (den <= 0)
    if np.any(bad):
        idx = tuple(int(v) for v in np.argwhere(bad)[0])
        i, t = idx[0], idx[1]
        a = idx[2] if len(idx) > 2 else int(actions[i, t])
        raise SupportViolation(f"{what} has no support where pi_e does", i, t, int(states[i, t]), a)
    with np.errstate(divide="ignore", invalid="ignore"):
        r = np.where(num > 0, num / np.where(den > 0, den, 1.0), 0.0)
    return np.where(need | (num == 0), r, 0.0)


def _factual_ratios(batch: TrajectoryBatch, pi_e: Policy, pi_b) -> np.ndarray:
    """[N, T] factual ratios; padding steps get ratio 1."""
    s, a, m = batch.states, batch.actions, batch.mask
    num = np.asarray(pi_e.probs)[s, a]
    den = pi_b.lookup(s, a) if isinstance(pi_b, AugmentedPolicy) else np.asarray(pi_b.probs)[s, a]
    r = _safe_ratio(num, den, m, s, a, "behavior policy")
    return np.where(m, r, 1.0)


def _check_bandit(batch: TrajectoryBatch) -> None:
    if batch.horizon != 1:
        raise DimensionError("this estimator is defined for horizon-1 data")


# --------------------------------------------------------------------------
# standard estimators


def pdis_estimate(batch: TrajectoryBatch, pi_e: Policy, pi_b: Policy, discount: float = 1.0) -> EstimateReport:
    """Backward recursion v <- rho_t (r_t + gamma v) per trajectory."""
    rho = _factual_ratios(batch, pi_e, pi_b)
    r = np.where(batch.mask, batch.rewards, 0.0)
    v = np.zeros(batch.n)
    for t in range(batch.horizon - 1, -1, -1):
        v = rho[:, t] * (r[:, t] + discount * v)
    cum = np.cumprod(rho, axis=1)
    comps = {"cum_ratio": cum, "disc_reward": r * discount ** np.arange(batch.horizon)}
    return _report("pdis", v, cum[:, -1], {"discount": discount}, comps)


def pdis_closed_form(batch: TrajectoryBatch, pi_e: Policy, pi_b: Policy, discount: float = 1.0) -> np.ndarray:
    rho = _factual_ratios(batch, pi_e, pi_b)
    r = np.where(batch.mask, batch.rewards, 0.0)
    return np.sum(np.cumprod(rho, axis=1) * r * discount ** np.arange(batch.horizon), axis=1)


def is_estimate(batch: TrajectoryBatch, pi_e: Policy, pi_b: Policy) -> EstimateReport:
    _check_bandit(batch)
    rep = pdis_estimate(batch, pi_e, pi_b)
    rep.estimator_id = "is"
    return rep


_WEIGHTED_IDS = {"is": "wis", "cis": "cwis", "cpdis": "cpdwis", "cstar_is": "cstar_wis", "cstar_pdis": "cstar_pdwis"}


def weighted_variant(report: EstimateReport, normalization: str = "trajectory") -> EstimateReport:
    """Self-normalized version of ``report``.

    ``trajectory`` divides by the mean per-trajectory weight; ``per_step``
    divides each step's term by the mean cumulative ratio at that step and
    needs a report from :func:`pdis_estimate`.
    """
    if normalization == "trajectory":
        w = report.per_trajectory_weights
        norm = stable_mean(w)
        if norm == 0:
            raise ZeroDivisionError("all trajectory weights are zero")
        per = report.per_trajectory_estimates / norm
        eid = _WEIGHTED_IDS.get(report.estimator_id, f"{report.estimator_id}_wis")
        return _report(eid, per, w, {**report.config, "normalization": "trajectory"})
    if normalization == "per_step":
        if "cum_ratio" not in report.components:
            raise ValueError("per_step normalization needs the cumulative ratios of a PDIS report")
        cum, rew = report.components["cum_ratio"], report.components["disc_reward"]
        norm = cum.mean(axis=0)
        if not np.any(norm > 0):
            raise ZeroDivisionError("all cumulative ratios are zero")
        # a step whose ratios all vanish contributes nothing
        per = np.sum(np.where(norm > 0, cum * rew / np.where(norm > 0, norm, 1.0), 0.0), axis=1)
        eid = "pdwis" if report.estimator_id == "pdis" else f"{report.estimator_id}_wis"
        return _report(eid, per, report.per_trajectory_weights, {**report.config, "normalization": "per_step"})
    raise ValueError(f"unknown normalization {normalization!r}")


def wis_estimate(batch, pi_e, pi_b) -> EstimateReport:
    return weighted_variant(is_estimate(batch, pi_e, pi_b), "trajectory")


def pdwis_estimate(batch, pi_e, pi_b, discount: float = 1.0) -> EstimateReport:
    return weighted_variant(pdis_estimate(batch, pi_e, pi_b, discount), "per_step")


# --------------------------------------------------------------------------
# counterfactual-augmented estimators


def _weighted_ratios(wd: WeightedDataset, pi_e: Policy, pi_bplus: AugmentedPolicy) -> np.ndarray:
    """[N, T, A] products w^x pi_e(x|s)/pi_b+(x|s), zero where the weight is
    zero; padding steps get 1 on the (dummy) factual slot. The weight is
    folded into the numerator so that w == pi_b+ gives exactly pi_e."""
    b = wd.batch
    num = wd.weights * np.asarray(pi_e.probs)[b.states]
    den = pi_bplus.rows(b.states)
    need = (wd.weights > 0) & b.mask[:, :, None]
    wr = _safe_ratio(num, den, need, b.states, b.actions, "augmented behavior policy")
    wr = np.where(need, wr, 0.0)
    factual = wd.annotated.factual_mask()
    return np.where(~b.mask[:, :, None] & factual, 1.0, wr)


def rho_plus(wd: WeightedDataset, pi_e: Policy, pi_bplus: AugmentedPolicy) -> tuple[np.ndarray, np.ndarray]:
    """Per-step sum_x w^x rho^x ([N, T]) and its product over steps ([N])."""
    step = np.sum(_weighted_ratios(wd, pi_e, pi_bplus), axis=2)
    step = np.where(wd.batch.mask, step, 1.0)
    return step, np.prod(step, axis=1)


def cpdis_estimate(wd: WeightedDataset, pi_e: Policy, pi_bplus: AugmentedPolicy, discount: float = 1.0) -> EstimateReport:
    """v <- w^a rho^a (r + gamma v) + sum_{x != a} w^x rho^x g^x."""
    b = wd.batch
    wr = _weighted_ratios(wd, pi_e, pi_bplus)
    factual = wd.annotated.factual_mask()
    w = wd.weights
    wr_f = np.where(b.mask, np.sum(np.where(factual, wr, 0.0), axis=2), 1.0)
    cf = np.sum(np.where(~factual & (w > 0), wr * wd.annotated.values, 0.0), axis=2)
    r = np.where(b.mask, b.rewards, 0.0)
    v = np.zeros(b.n)
    for t in range(b.horizon - 1, -1, -1):
        v = wr_f[:, t] * (r[:, t] + discount * v) + cf[:, t]
    step = np.where(b.mask, np.sum(wr, axis=2), 1.0)
    return _report("cpdis", v, np.prod(step, axis=1), {"discount": discount})


def cis_estimate(wd: WeightedDataset, pi_e: Policy, pi_bplus: AugmentedPolicy) -> EstimateReport:
    _check_bandit(wd.batch)
    rep = cpdis_estimate(wd, pi_e, pi_bplus)
    rep.estimator_id = "cis"
    return rep


def _require_full(ad: AnnotatedDataset, pi_e: Policy) -> None:
    """Every counterfactual that pi_e can take must be annotated."""
    b = ad.batch
    used = np.asarray(pi_e.probs)[b.states] > 0
    need = b.mask[:, :, None] & ~ad.factual_mask() & ~ad.available & used
    if np.any(need):
        i, t, a = (int(v) for v in np.argwhere(need)[0])
        raise ValueError(f"missing annotation at trajectory {i}, t {t}, action {a} (state {int(b.states[i, t])})")


def cstar_pdis_estimate(ad: AnnotatedDataset, pi_e: Policy, discount: float = 1.0) -> EstimateReport:
    """v <- pi_e(a|s)(r + gamma v) + sum_{x != a} pi_e(x|s) g^x."""
    _require_full(ad, pi_e)
    b = ad.batch
    pe = np.asarray(pi_e.probs)[b.states]  # [N, T, A]
    factual = ad.factual_mask()
    pf = np.where(b.mask, np.sum(np.where(factual, pe, 0.0), axis=2), 1.0)
    cf = np.where(b.mask, np.sum(np.where(factual, 0.0, pe * ad.values), axis=2), 0.0)
    r = np.where(b.mask, b.rewards, 0.0)
    v = np.zeros(b.n)
    for t in range(b.horizon - 1, -1, -1):
        v = pf[:, t] * (r[:, t] + discount * v) + cf[:, t]
    step = np.where(b.mask, pe.sum(axis=2), 1.0)
    return _report("cstar_pdis", v, np.prod(step, axis=1), {"discount": discount})


def cstar_is_estimate(ad: AnnotatedDataset, pi_e: Policy) -> EstimateReport:
    _check_bandit(ad.batch)
    rep = cstar_pdis_estimate(ad, pi_e)
    rep.estimator_id = "cstar_is"
    return rep


# --------------------------------------------------------------------------
# naive baselines


def equal_split_policy(ad: AnnotatedDataset, pi_b: Policy) -> AugmentedPolicy:
    wd = assign_weights(ad, EqualSplit())
    return augmented_policy(average_weights(wd, pi_b.num_states), pi_b)


def naive_unweighted_estimate(
    ad: AnnotatedDataset,
    pi_e: Policy,
    pi_b: Policy,
    pi_bplus: Optional[AugmentedPolicy] = None,
    discount: float = 1.0,
) -> EstimateReport:
    """Every annotation becomes an extra sub-trajectory ending with the
    counterfactual action and reward g; per-decision IS runs on the union.

    Ratios use the equal-split augmented behavior policy. Per-entry
    contributions are reported: the N real trajectories first, then one
    entry per annotation in (trajectory, t, action) order.
    """
    b = ad.batch
    pbp = pi_bplus if pi_bplus is not None else equal_split_policy(ad, pi_b)
    rho_f = _factual_ratios(b, pi_e, pbp)
    r = np.where(b.mask, b.rewards, 0.0)
    disc = discount ** np.arange(b.horizon)
    cum = np.cumprod(rho_f, axis=1)
    real = np.sum(cum * r * disc, axis=1)
    # prefix sums before step t: sum_{t'<t} rho_{1:t'} gamma^t' r_t'
    terms = cum * r * disc
    prefix = np.cumsum(terms, axis=1) - terms
    cum_before = np.concatenate([np.ones((b.n, 1)), cum[:, :-1]], axis=1)
    i, t, a = np.nonzero(ad.available)
    num = np.asarray(pi_e.probs)[b.states[i, t], a]
    den = pbp.probs[b.states[i, t], a] if pbp.probs.ndim == 2 else pbp.probs[t, b.states[i, t], a]
    need = np.ones_like(num, dtype=bool)
    rho_cf = _safe_ratio(num[:, None], den[:, None], need[:, None], b.states[i, t][:, None], a[:, None], "augmented behavior policy")[:, 0]
    synth = prefix[i, t] + cum_before[i, t] * rho_cf * disc[t] * ad.values[i, t, a]
    per = np.concatenate([real, synth])
    w_synth = cum_before[i, t] * rho_cf
    weights = np.concatenate([cum[:, -1], w_synth])
    return _report("naive_unweighted", per, weights, {"discount": discount})


def naive_weighted_estimate(
    ad: AnnotatedDataset,
    pi_e: Policy,
    pi_b: Policy,
    weights: Optional[np.ndarray] = None,
    discount: float = 1.0,
) -> EstimateReport:
    """Trajectory-level mixture of the factual IS estimate and one IS
    estimate per annotation sub-trajectory.

    ``weights`` is [N, T, A] (zero off annotated slots) with per-trajectory
    totals at most 1; by default each trajectory splits mass equally over
    itself and its annotations (1/(T+1) each with full binary annotations).
    Ratios use pi_b.
    """
    b = ad.batch
    avail = ad.available
    if weights is None:
        k = avail.sum(axis=(1, 2))
        w = avail / (1.0 + k)[:, None, None]
    else:
        w = np.asarray(weights, dtype=float)
        if w.shape != avail.shape:
            raise DimensionError("naive weights must be [N, T, A]")
        if np.any(w < 0) or np.any((w > 0) & ~avail):
            raise ValueError("naive weights must be nonnegative and sit on annotated slots")
    tot = w.sum(axis=(1, 2))
    if np.any(tot > 1.0 + 1e-12):
        raise ValueError("naive weights exceed 1 for some trajectory")
    rho_f = _factual_ratios(b, pi_e, pi_b)
    r = np.where(b.mask, b.rewards, 0.0)
    disc = discount ** np.arange(b.horizon)
    cum = np.cumprod(rho_f, axis=1)
    ret = np.sum(r * disc, axis=1)
    reward_before = np.cumsum(r * disc, axis=1) - r * disc
    cum_before = np.concatenate([np.ones((b.n, 1)), cum[:, :-1]], axis=1)
    pe = np.asarray(pi_e.probs)[b.states]
    pb = np.asarray(pi_b.probs)[b.states]
    rho_cf = _safe_ratio(pe, pb, w > 0, b.states, b.actions, "behavior policy")
    sub = cum_before[:, :, None] * rho_cf * (reward_before[:, :, None] + disc[None, :, None] * ad.values)
    per = (1.0 - tot) * cum[:, -1] * ret + np.sum(np.where(w > 0, w * sub, 0.0), axis=(1, 2))
    return _report("naive_weighted", per, cum[:, -1], {"discount": discount})


ESTIMATOR_IDS = (
    "is", "wis", "pdis", "pdwis", "cis", "cwis", "cpdis", "cpdwis",
    "cstar_is", "cstar_pdis", "naive_unweighted", "naive_weighted",
)
