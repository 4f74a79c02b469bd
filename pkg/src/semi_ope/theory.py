"""Closed-form bias and variance of single-sample bandit estimators.

All quantities are for one sample (s, a, r, annotations) from a horizon-1
MDP. Variances are exact decompositions: the labelled terms add up to the
total. Annotations for action x at state s have mean R(s,x) + eps_G(s,x) and
variance sigma_R(s,x)^2 + delta_sigma(s,x); weights are independent of
rewards and annotations.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .annotation import AvgWeightTable, augmented_policy
from .errors import DimensionError
from .mdp import Policy, TabularMDP


@dataclass(frozen=True)
class TheoryReport:
    bias: float
    variance: float
    terms: dict

    @property
    def std(self) -> float:
        return math.sqrt(max(self.variance, 0.0))

    @property
    def rmse(self) -> float:
        return math.sqrt(self.bias**2 + max(self.variance, 0.0))

    def to_dict(self) -> dict:
        return {"bias": self.bias, "variance": self.variance, "std": self.std, "rmse": self.rmse, "terms": dict(self.terms)}


def _bandit_tables(mdp: TabularMDP):
    if mdp.horizon != 1:
        raise DimensionError("theory calculators need a horizon-1 MDP")
    return mdp.initial_dist, mdp.reward_mean, mdp.reward_std**2


def _ratio(pe: np.ndarray, pb: np.ndarray) -> np.ndarray:
    return np.where(pb > 0, pe / np.where(pb > 0, pb, 1.0), 0.0)


def _var_over(p: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Row-wise variance of x under probabilities p (both [S, K])."""
    m = np.sum(p * x, axis=1)
    return np.sum(p * (x - m[:, None]) ** 2, axis=1)


def _total(terms: dict) -> float:
    return math.fsum(terms.values())


def theory_is(mdp: TabularMDP, pi_e: Policy, pi_b: Policy) -> TheoryReport:
    """Bias from unsupported actions; variance split into state, action and
    reward-noise terms."""
    d1, R, s2 = _bandit_tables(mdp)
    pe, pb = np.asarray(pi_e.probs), np.asarray(pi_b.probs)
    rho = _ratio(pe, pb)
    unsupported = pb <= 0
    bias = -float(d1 @ np.sum(np.where(unsupported, pe * R, 0.0), axis=1))
    cond_mean = np.sum(pb * rho * R, axis=1)  # E[rho r | s]
    terms = {
        "state": float(_var_over(d1[None, :], cond_mean[None, :])[0]),
        "action": float(d1 @ _var_over(pb, rho * R)),
        "reward": float(d1 @ np.sum(pb * rho**2 * s2, axis=1)),
    }
    return TheoryReport(bias, _total(terms), terms)


def _zero(shape) -> np.ndarray:
    return np.zeros(shape)


def _moments(wbar: AvgWeightTable, A: int):
    """Weight mean/var/cov with never-observed factual pairs treated as
    factual-only (deterministic unit weight on the factual action)."""
    if wbar.by_time:
        raise ValueError("bandit theory needs time-pooled weight moments")
    eye = np.eye(A)
    sup = wbar.supported[..., None]
    mean = np.where(sup, np.nan_to_num(wbar.mean), eye)
    var = np.where(sup, np.nan_to_num(wbar.var), 0.0)
    cov = np.where(sup[..., None], np.nan_to_num(wbar.cov), 0.0)
    return mean, var, cov


def theory_cis(
    mdp: TabularMDP,
    pi_e: Policy,
    pi_b: Policy,
    wbar: AvgWeightTable,
    annotation_bias: Optional[np.ndarray] = None,
    delta_sigma: Optional[np.ndarray] = None,
) -> TheoryReport:
    """Bias = support term + delta_W-scaled annotation bias; variance in
    eight labelled terms.

    ``annotation_bias`` and ``delta_sigma`` are [S, A] tables (default 0).
    ``wbar`` holds the moments of the weight vector W(.|s, a).
    """
    d1, R, s2 = _bandit_tables(mdp)
    S, A = R.shape
    pe, pb = np.asarray(pi_e.probs), np.asarray(pi_b.probs)
    eps = _zero((S, A)) if annotation_bias is None else np.asarray(annotation_bias, dtype=float)
    dsig = _zero((S, A)) if delta_sigma is None else np.asarray(delta_sigma, dtype=float)
    mean, var, cov = _moments(wbar, A)
    pbp = augmented_policy(wbar, pi_b).probs
    rho = _ratio(pe, pbp)  # [S, A], over the annotated/factual action x

    eye = np.eye(A, dtype=bool)[None, :, :]  # [1, a, x]: x is the factual action
    # mu[s, a, x]: mean of the value paired with action x when a is factual
    mu = np.where(eye, R[:, None, :], (R + eps)[:, None, :])
    sig_r = np.broadcast_to(s2[:, None, :], (S, A, A))
    dsig_x = np.where(eye, 0.0, dsig[:, None, :])
    rho_x = rho[:, None, :]

    # support and annotation-bias pieces
    unsupported = pbp <= 0
    support_bias = -np.sum(np.where(unsupported, pe * R, 0.0), axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        wdiag = mean[:, np.arange(A), np.arange(A)]
        delta_w = np.where(pbp > 0, 1.0 - wdiag * pb / np.where(pbp > 0, pbp, 1.0), 0.0)
    annot_bias = np.sum(pe * delta_w * eps * (pbp > 0), axis=1)
    bias = float(d1 @ (support_bias + annot_bias))

    # E[X | s, a] and E[X | s]
    cond_sa = np.sum(mean * rho_x * mu, axis=2)  # [S, A]
    cond_s = np.sum(pb * cond_sa, axis=1)

    def e_sa(x):  # E_s E_{a~pi_b}[x(s, a)]
        return float(d1 @ np.sum(pb * x, axis=1))

    rho2 = rho_x**2
    pair = rho_x[..., :, None] * rho_x[..., None, :] * mu[..., :, None] * mu[..., None, :] * cov
    off = ~np.eye(A, dtype=bool)
    terms = {
        "state": float(_var_over(d1[None, :], cond_s[None, :])[0]),
        "action": float(d1 @ _var_over(pb, cond_sa)),
        "reward_noise": e_sa(np.sum(rho2 * mean**2 * sig_r, axis=2)),
        "annotation_noise": e_sa(np.sum(rho2 * mean**2 * dsig_x, axis=2)),
        "weight_var_mean": e_sa(np.sum(rho2 * mu**2 * var, axis=2)),
        "weight_var_reward_noise": e_sa(np.sum(rho2 * sig_r * var, axis=2)),
        "weight_cov": e_sa(np.sum(np.where(off, pair, 0.0), axis=(2, 3))),
        "weight_var_annotation_noise": e_sa(np.sum(rho2 * dsig_x * var, axis=2)),
    }
    return TheoryReport(bias, _total(terms), terms)


def theory_cstar_is(
    mdp: TabularMDP,
    pi_e: Policy,
    pi_b: Policy,
    delta_sigma: Optional[np.ndarray] = None,
    annotation_bias: Optional[np.ndarray] = None,
) -> TheoryReport:
    """Equal weights with every annotation present. The reward-noise term is
    sum_x pi_e(x|s)^2 sigma_R(s,x)^2, which does not depend on pi_b."""
    d1, R, s2 = _bandit_tables(mdp)
    S, A = R.shape
    pe, pb = np.asarray(pi_e.probs), np.asarray(pi_b.probs)
    eps = _zero((S, A)) if annotation_bias is None else np.asarray(annotation_bias, dtype=float)
    dsig = _zero((S, A)) if delta_sigma is None else np.asarray(delta_sigma, dtype=float)
    # counterfactual-only quantities: E_{a~pi_b} sum_{x != a} f(x) = sum_x (1 - pi_b(x)) f(x)
    miss = 1.0 - pb
    cond_sa = np.sum(pe * R, axis=1)[:, None] + (np.sum(pe * eps, axis=1)[:, None] - pe * eps)
    cond_s = np.sum(pb * cond_sa, axis=1)
    bias = float(d1 @ np.sum(pe * eps * miss, axis=1))
    terms = {
        "state": float(_var_over(d1[None, :], cond_s[None, :])[0]),
        "action": float(d1 @ _var_over(pb, cond_sa)),
        "reward_noise": float(d1 @ np.sum(pe**2 * s2, axis=1)),
        "annotation_noise": float(d1 @ np.sum(miss * pe**2 * dsig, axis=1)),
    }
    return TheoryReport(bias, _total(terms), terms)


def constant_weight_moments(mean: np.ndarray, num_states: int) -> AvgWeightTable:
    """Moments table for deterministic weights W(.|s,a) = mean[s, a] (or
    mean[a] for every state)."""
    m = np.asarray(mean, dtype=float)
    if m.ndim == 2:
        m = np.broadcast_to(m, (num_states,) + m.shape).copy()
    A = m.shape[-1]
    return AvgWeightTable(m, np.zeros_like(m), np.zeros(m.shape + (A,)), np.ones(m.shape[:2], dtype=np.int64))


def discrete_weight_moments(support: np.ndarray, probs: np.ndarray) -> AvgWeightTable:
    """Exact moments for a finite weight distribution: ``support`` is
    [S, A, K, A] (K candidate weight vectors per factual pair) and ``probs``
    is [S, A, K]."""
    w = np.asarray(support, dtype=float)
    p = np.asarray(probs, dtype=float)
    mean = np.einsum("sak,sakx->sax", p, w)
    second = np.einsum("sak,sakx,saky->saxy", p, w, w)
    cov = second - mean[..., :, None] * mean[..., None, :]
    A = w.shape[-1]
    var = cov[..., np.arange(A), np.arange(A)].copy()
    return AvgWeightTable(mean, var, cov, np.ones(mean.shape[:2], dtype=np.int64))
