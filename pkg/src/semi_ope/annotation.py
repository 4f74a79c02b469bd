"""Simulated counterfactual annotations, weighting schemes and the
augmented behavior policy.

Annotations live in dense ``[N, T, A]`` arrays alongside the trajectory
batch: ``values[i, t, a]`` is the annotation for taking ``a`` instead of the
factual action at step ``t`` of trajectory ``i``; ``available`` marks which
slots hold one. Factual slots and padding steps are never available.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence, Union

import numpy as np

from .errors import ConfigError, DimensionError
from .mdp import Policy, TabularMDP, Trajectory, TrajectoryBatch, horizon_q_values
from .rng import slot_uniforms

SOURCES = ("q_eval", "q_behavior", "reward_mean")


# --------------------------------------------------------------------------
# annotation spec and containers


@dataclass(frozen=True)
class AnnotationSpec:
    """``availability`` is ``"all"``, a fraction in [0, 1], a per-action
    vector of fractions, or a per-(state, action) table of fractions."""

    source: str = "q_eval"
    noise_std: Union[float, str] = 0.0
    availability: Union[str, float, Sequence] = "all"
    seed: int = 0

    def __post_init__(self):
        if self.source not in SOURCES:
            raise ConfigError(f"unknown source {self.source!r}; expected one of {SOURCES}", "annotation.source")
        if isinstance(self.noise_std, str):
            if self.noise_std != "reward":
                raise ConfigError("noise_std must be a number or 'reward'", "annotation.noise_std")
        elif not self.noise_std >= 0:
            raise ConfigError("noise_std must be nonnegative", "annotation.noise_std")
        av = self.availability
        if isinstance(av, str):
            if av != "all":
                raise ConfigError(f"unknown availability {av!r}", "annotation.availability")
        else:
            arr = np.asarray(av, dtype=float)
            if np.any(arr < 0) or np.any(arr > 1):
                raise ConfigError("availability fractions must lie in [0, 1]", "annotation.availability")

    def availability_table(self, num_states: int, num_actions: int) -> np.ndarray:
        av = self.availability
        if isinstance(av, str):
            return np.ones((num_states, num_actions))
        arr = np.asarray(av, dtype=float)
        if arr.ndim == 0:
            return np.full((num_states, num_actions), float(arr))
        if arr.shape == (num_actions,):
            return np.broadcast_to(arr, (num_states, num_actions)).copy()
        if arr.shape == (num_states, num_actions):
            return arr.copy()
        raise DimensionError(f"availability shape {arr.shape} fits neither [A] nor [S, A]")


@dataclass(frozen=True)
class AnnotatedTrajectory:
    base: Trajectory
    values: np.ndarray  # [L, A]
    available: np.ndarray  # [L, A] bool

    def annotations(self, t: int) -> dict:
        return {a: (bool(self.available[t, a]), float(self.values[t, a]) if self.available[t, a] else None)
                for a in range(self.values.shape[1]) if a != self.base.actions[t]}


@dataclass(eq=False)
class AnnotatedDataset:
    batch: TrajectoryBatch
    values: np.ndarray  # [N, T, A], 0 where unavailable
    available: np.ndarray  # [N, T, A] bool

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        self.available = np.asarray(self.available, dtype=bool)
        N, T = self.batch.states.shape
        if self.values.shape[:2] != (N, T) or self.available.shape != self.values.shape:
            raise DimensionError("annotation arrays must be [N, T, A] matching the batch")
        factual = self.factual_mask()
        if np.any(self.available & factual) or np.any(self.available & ~self.batch.mask[:, :, None]):
            raise ValueError("factual and padding slots cannot carry annotations")
        self.values = np.where(self.available, self.values, 0.0)

    @property
    def num_actions(self) -> int:
        return self.values.shape[2]

    @property
    def n(self) -> int:
        return self.batch.n

    def factual_mask(self) -> np.ndarray:
        A = self.values.shape[2]
        return self.batch.actions[:, :, None] == np.arange(A)[None, None, :]

    def all_available(self) -> bool:
        need = self.batch.mask[:, :, None] & ~self.factual_mask()
        return bool(np.all(self.available | ~need))

    def __getitem__(self, i: int) -> AnnotatedTrajectory:
        L = int(self.batch.lengths[i])
        return AnnotatedTrajectory(self.batch[i], self.values[i, :L].copy(), self.available[i, :L].copy())

    def __len__(self) -> int:
        return self.n

    def subset(self, idx) -> "AnnotatedDataset":
        return AnnotatedDataset(self.batch.subset(idx), self.values[idx], self.available[idx])

    @classmethod
    def empty(cls, batch: TrajectoryBatch, num_actions: int) -> "AnnotatedDataset":
        shape = batch.states.shape + (num_actions,)
        return cls(batch, np.zeros(shape), np.zeros(shape, dtype=bool))


def _source_table(mdp: TabularMDP, spec: AnnotationSpec, target_policy, behavior_policy) -> np.ndarray:
    """[T, S, A] table of annotation means."""
    if spec.source == "q_eval":
        if target_policy is None:
            raise ConfigError("source q_eval needs the evaluation policy", "annotation.source")
        return horizon_q_values(mdp, target_policy).values
    if spec.source == "q_behavior":
        if behavior_policy is None:
            raise ConfigError("source q_behavior needs the behavior policy", "annotation.source")
        return horizon_q_values(mdp, behavior_policy).values
    return np.broadcast_to(mdp.reward_mean, (mdp.horizon,) + mdp.reward_mean.shape)


def availability_mask(batch: TrajectoryBatch, table: np.ndarray, seed: int) -> np.ndarray:
    """Counterfactual slots kept by an availability table; the uniform for
    slot (i, t, a) depends only on ``(seed, i, t, a)``."""
    N, T = batch.states.shape
    A = table.shape[1]
    i, t, a = np.meshgrid(np.arange(N), np.arange(T), np.arange(A), indexing="ij")
    u = slot_uniforms(seed, i, t, a)
    p = table[batch.states[:, :, None], np.arange(A)[None, None, :]]
    keep = u < p
    factual = batch.actions[:, :, None] == np.arange(A)
    return keep & ~factual & batch.mask[:, :, None]


def annotate_from_table(
    batch: TrajectoryBatch,
    means: np.ndarray,
    noise_std,
    availability: np.ndarray,
    seed: int,
    rng: Optional[np.random.Generator] = None,
) -> AnnotatedDataset:
    """Annotations from a [T, S, A] table of means. ``noise_std`` is a scalar
    or an [S, A] table; ``availability`` is an [S, A] table of fractions."""
    N, T = batch.states.shape
    A = means.shape[2]
    if T > means.shape[0]:
        raise DimensionError("batch horizon exceeds the annotation table horizon")
    t_idx = np.broadcast_to(np.arange(T)[None, :, None], (N, T, A))
    a_idx = np.arange(A)[None, None, :]
    g = means[t_idx, batch.states[:, :, None], a_idx]
    sd = np.asarray(noise_std, dtype=float)
    if np.any(sd > 0):
        if rng is None:
            raise ValueError("noisy annotations need a random stream")
        scale = sd if sd.ndim == 0 else sd[batch.states[:, :, None], a_idx]
        g = g + scale * rng.standard_normal((N, T, A))
    avail = availability_mask(batch, availability, seed)
    return AnnotatedDataset(batch, g, avail)


def annotate(
    batch: TrajectoryBatch,
    mdp: TabularMDP,
    spec: AnnotationSpec,
    rng: Optional[np.random.Generator] = None,
    target_policy: Optional[Policy] = None,
    behavior_policy: Optional[Policy] = None,
) -> AnnotatedDataset:
    """Annotate every available counterfactual slot with its source mean
    plus Normal(0, noise_std) noise. Noise is drawn for the full [N, T, A]
    block so masks never shift the stream. ``noise_std="reward"`` uses the
    MDP's own reward std, i.e. annotations are draws from the reward
    distribution."""
    if batch.horizon > mdp.horizon:
        raise DimensionError("batch horizon exceeds the MDP horizon")
    means = _source_table(mdp, spec, target_policy, behavior_policy)
    sd = mdp.reward_std if isinstance(spec.noise_std, str) else spec.noise_std
    return annotate_from_table(batch, means, sd, spec.availability_table(mdp.num_states, mdp.num_actions), spec.seed, rng)


# --------------------------------------------------------------------------
# weighting schemes


@dataclass(frozen=True)
class EqualSplit:
    pass


@dataclass(frozen=True)
class FactualOnly:
    pass


@dataclass(frozen=True)
class Constant:
    """``weights`` is [A] (same for every factual action), [A, A] indexed
    [factual][action], or [S, A, A]."""

    weights: np.ndarray

    def table(self, S: int, A: int) -> np.ndarray:
        w = np.asarray(self.weights, dtype=float)
        if np.any(w < 0):
            raise ConfigError("constant weights must be nonnegative", "weights")
        if w.shape == (A,):
            return np.broadcast_to(w, (S, A, A))
        if w.shape == (A, A):
            return np.broadcast_to(w, (S, A, A))
        if w.ndim == 3 and w.shape[1:] == (A, A) and w.shape[0] >= S:
            return w
        raise DimensionError(f"constant weights of shape {w.shape} do not fit A={A}")


@dataclass(frozen=True)
class RandomUniform:
    """Each available counterfactual draws U(center - width/2, center + width/2);
    with k counterfactuals available each draw is divided by k and the factual
    action takes the remainder."""

    center: float = 0.5
    width: float = 0.0
    seed: int = 0

    def __post_init__(self):
        lo, hi = self.center - self.width / 2, self.center + self.width / 2
        if self.width < 0 or lo < 0 or hi > 1:
            raise ConfigError("random_uniform range must lie within [0, 1]", "weights")


WeightScheme = Union[EqualSplit, FactualOnly, Constant, RandomUniform]


def parse_scheme(spec) -> WeightScheme:
    if isinstance(spec, (EqualSplit, FactualOnly, Constant, RandomUniform)):
        return spec
    if isinstance(spec, str):
        spec = {"scheme": spec}
    kind = spec.get("scheme")
    if kind == "equal_split":
        return EqualSplit()
    if kind == "factual_only":
        return FactualOnly()
    if kind == "constant":
        return Constant(np.asarray(spec["weights"], dtype=float))
    if kind == "random_uniform":
        return RandomUniform(float(spec.get("center", 0.5)), float(spec.get("width", 0.0)), int(spec.get("seed", 0)))
    raise ConfigError(f"unknown weight scheme {kind!r}", "weights.scheme")


@dataclass(eq=False)
class WeightedDataset:
    annotated: AnnotatedDataset
    weights: np.ndarray  # [N, T, A]

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float)
        self.weights = w
        ad = self.annotated
        if w.shape != ad.values.shape:
            raise DimensionError("weights must be [N, T, A]")
        usable = ad.available | ad.factual_mask()
        mask = ad.batch.mask
        if np.any(w < 0) or np.any((w > 0) & ~usable):
            raise ValueError("weights must be nonnegative and zero on unavailable actions")
        sums = w.sum(axis=2)
        if np.any(np.abs(sums[mask] - 1.0) > 1e-12):
            raise ValueError("weights must sum to 1 at every step")

    @property
    def batch(self) -> TrajectoryBatch:
        return self.annotated.batch

    def factual_weights(self) -> np.ndarray:
        b = self.batch
        return np.take_along_axis(self.weights, b.actions[:, :, None], axis=2)[:, :, 0]


def assign_weights(annotated: AnnotatedDataset, scheme) -> WeightedDataset:
    scheme = parse_scheme(scheme)
    ad = annotated
    b = ad.batch
    N, T, A = ad.values.shape
    factual = ad.factual_mask()
    usable = (ad.available | factual) & b.mask[:, :, None]
    if isinstance(scheme, FactualOnly):
        w = factual.astype(float)
    elif isinstance(scheme, EqualSplit):
        w = usable / np.maximum(usable.sum(axis=2, keepdims=True), 1)
    elif isinstance(scheme, Constant):
        tab = scheme.table(int(b.states.max(initial=0)) + 1, A)
        raw = tab[b.states, b.actions] * usable
        tot = raw.sum(axis=2, keepdims=True)
        bad = (tot[:, :, 0] <= 0) & b.mask
        if np.any(bad):
            i, t = np.argwhere(bad)[0]
            raise ConfigError(f"constant weights put no mass on the available actions (trajectory {i}, t {t})", "weights")
        w = np.where(tot > 0, raw / np.where(tot > 0, tot, 1.0), 0.0)
    else:
        i, t, a = np.meshgrid(np.arange(N), np.arange(T), np.arange(A), indexing="ij")
        u = slot_uniforms(scheme.seed, i, t, a)
        draws = scheme.center - scheme.width / 2 + scheme.width * u
        cf = ad.available & b.mask[:, :, None]
        k = cf.sum(axis=2, keepdims=True)
        cw = np.where(cf, draws / np.maximum(k, 1), 0.0)
        w = cw + factual * (1.0 - cw.sum(axis=2, keepdims=True))
        w = np.where(b.mask[:, :, None], w, 0.0)
    # padding steps: put unit mass on the (dummy) factual action
    w = np.where(b.mask[:, :, None], w, factual.astype(float))
    return WeightedDataset(ad, w)


# --------------------------------------------------------------------------
# average weights and the augmented behavior policy


@dataclass(frozen=True, eq=False)
class AvgWeightTable:
    """Moments of the weight vector given the factual pair. Arrays are
    [S, A, A] (mean, var), [S, A, A, A] (cov) and [S, A] (counts); with
    ``by_time`` every array gains a leading horizon axis."""

    mean: np.ndarray
    var: np.ndarray
    cov: np.ndarray
    counts: np.ndarray
    by_time: bool = False

    @property
    def supported(self) -> np.ndarray:
        return self.counts > 0


def average_weights(wd: WeightedDataset, num_states: int, by_time: bool = False) -> AvgWeightTable:
    """Population (ddof=0) moments of W(.|s,a) pooled over trajectories and,
    unless ``by_time``, over time steps."""
    b = wd.batch
    A = wd.weights.shape[2]
    m = b.mask
    s, a, w = b.states[m], b.actions[m], wd.weights[m]
    t = np.nonzero(m)[1]
    if by_time:
        T = b.horizon
        key = (t * num_states + s) * A + a
        n_keys = T * num_states * A
        lead = (T, num_states, A)
    else:
        key = s * A + a
        n_keys = num_states * A
        lead = (num_states, A)
    counts = np.bincount(key, minlength=n_keys).astype(float)
    sums = np.zeros((n_keys, A))
    np.add.at(sums, key, w)
    outer = np.zeros((n_keys, A, A))
    np.add.at(outer, key, w[:, :, None] * w[:, None, :])
    with np.errstate(invalid="ignore", divide="ignore"):
        mean = sums / counts[:, None]
        second = outer / counts[:, None, None]
    cov = second - mean[:, :, None] * mean[:, None, :]
    idx = np.arange(A)
    cov[:, idx, idx] = np.maximum(cov[:, idx, idx], 0.0)
    var = cov[:, idx, idx].copy()
    return AvgWeightTable(
        mean.reshape(lead + (A,)),
        var.reshape(lead + (A,)),
        cov.reshape(lead + (A, A)),
        counts.reshape(lead).astype(np.int64),
        by_time,
    )


@dataclass(frozen=True, eq=False)
class AugmentedPolicy:
    """pi_b+ as an [S, A] table, or [T, S, A] when built from per-step weights."""

    probs: np.ndarray
    wbar: Optional[AvgWeightTable] = None
    pi_b: Optional[Policy] = None

    def lookup(self, states: np.ndarray, actions: np.ndarray) -> np.ndarray:
        """pi_b+(actions | states) for [N, T] (or broadcastable) index arrays."""
        if self.probs.ndim == 2:
            return self.probs[states, actions]
        T = states.shape[-1]
        return self.probs[np.arange(T), states, actions]

    def rows(self, states: np.ndarray) -> np.ndarray:
        """[N, T, A] rows for an [N, T] state array."""
        if self.probs.ndim == 2:
            return self.probs[states]
        T = states.shape[-1]
        return self.probs[np.arange(T)[None, :], states]

    @classmethod
    def from_policy(cls, pi: Policy) -> "AugmentedPolicy":
        return cls(np.asarray(pi.probs), None, pi)


def augmented_policy(wbar: AvgWeightTable, pi_b: Policy) -> AugmentedPolicy:
    """pi_b+(a|s) = sum over factual actions f of pi_b(f|s) * Wbar(a|s,f).

    Factual actions never observed contribute through pi_b as if they gave
    all weight to themselves; states never observed copy pi_b.
    """
    pb = np.asarray(pi_b.probs)
    A = pb.shape[1]
    eye = np.eye(A)
    mean = np.where(wbar.supported[..., None], np.nan_to_num(wbar.mean), eye)
    probs = np.einsum("...sf,...sfa->...sa", np.broadcast_to(pb, mean.shape[:-1]), mean)
    seen = wbar.supported.any(axis=-1)
    probs = np.where(seen[..., None], probs, pb)
    return AugmentedPolicy(probs, wbar, pi_b)


# --------------------------------------------------------------------------
# approximate MDP, bias correction, imputation


@dataclass(frozen=True, eq=False)
class ApproxMDP:
    """Empirical model with one extra absorbing state (index ``num_states``)
    standing for "episode ended before the horizon"."""

    counts: np.ndarray  # [S+1, A, S+1]
    transition: np.ndarray
    reward: np.ndarray  # [S+1, A]
    support: np.ndarray  # [S, A] bool
    num_states: int
    horizon: int

    def to_tabular(self) -> TabularMDP:
        S1, A = self.reward.shape
        return TabularMDP(
            self.transition, self.reward, np.zeros((S1, A)),
            np.full(S1, 1.0 / S1), horizon=self.horizon,
            terminal_states=frozenset({self.num_states}), name="approx",
        )

    def q_values(self, pi: Policy) -> np.ndarray:
        """Q-hat of ``pi`` on the original state indices, shape [T, S, A]."""
        pb = np.asarray(pi.probs)[: self.num_states]
        ext = np.vstack([pb, np.full((1, pb.shape[1]), 1.0 / pb.shape[1])])
        return horizon_q_values(self.to_tabular(), Policy(ext)).values[:, : self.num_states]


def fit_approximate_mdp(batch: TrajectoryBatch, num_states: int, num_actions: int, horizon: Optional[int] = None) -> ApproxMDP:
    """Count-based model. The last step of an episode shorter than the
    horizon transitions to the end state; the last step of a full-length
    episode has no observed successor and is left out of the counts."""
    T = int(horizon if horizon is not None else batch.horizon)
    S, A = num_states, num_actions
    end = S
    m = batch.mask
    L = batch.lengths
    s, a, r = batch.states[m], batch.actions[m], batch.rewards[m]
    n_sa = np.bincount(s * A + a, minlength=S * A).reshape(S, A)
    r_sum = np.bincount(s * A + a, weights=r, minlength=S * A).reshape(S, A)
    nxt = np.full(batch.states.shape, -1, dtype=np.int64)
    nxt[:, :-1] = np.where(m[:, 1:], batch.states[:, 1:], -1)
    rows = np.arange(batch.n)
    last = L - 1
    ended = L < T
    nxt[rows[ended], last[ended]] = end
    has_next = m & (nxt >= 0)
    counts = np.zeros((S + 1, A, S + 1))
    np.add.at(counts, (batch.states[has_next], batch.actions[has_next], nxt[has_next]), 1.0)
    tot = counts.sum(axis=2, keepdims=True)
    trans = np.where(tot > 0, counts / np.where(tot > 0, tot, 1.0), 0.0)
    support = n_sa > 0
    # no observed successor (unsupported, or only truncated at the horizon): self-loop
    for ss, aa in np.argwhere(tot[:, :, 0] == 0):
        trans[ss, aa, ss] = 1.0
    reward = np.zeros((S + 1, A))
    reward[:S] = np.where(support, r_sum / np.maximum(n_sa, 1), 0.0)
    return ApproxMDP(counts, trans, reward, support, S, T)


def correct_bias(
    annotated: AnnotatedDataset,
    mhat: ApproxMDP,
    pi_b: Policy,
    pi_e: Policy,
    qhat_b: Optional[np.ndarray] = None,
) -> AnnotatedDataset:
    """g <- g - (Qhat_b - Qhat_e) at supported counterfactual pairs; other
    annotations are used as collected. ``qhat_b`` may be passed to reuse
    the behavior Q-table across evaluation policies."""
    b = annotated.batch
    if b.horizon > mhat.horizon:
        raise DimensionError("annotation horizon exceeds the model horizon")
    qb = mhat.q_values(pi_b) if qhat_b is None else qhat_b
    eps = qb - mhat.q_values(pi_e)  # [T, S, A]
    N, T, A = annotated.values.shape
    t_idx = np.broadcast_to(np.arange(T)[None, :, None], (N, T, A))
    s_idx = b.states[:, :, None]
    a_idx = np.arange(A)[None, None, :]
    corr = eps[t_idx, s_idx, a_idx]
    sup = mhat.support[s_idx, a_idx]
    apply = annotated.available & sup
    return AnnotatedDataset(b, np.where(apply, annotated.values - corr, annotated.values), annotated.available)


def impute_missing(annotated: AnnotatedDataset, num_states: Optional[int] = None, by_time: bool = False) -> AnnotatedDataset:
    """Fill missing counterfactual slots with the mean of observed
    annotations for the same (s, a) (or (t, s, a) with ``by_time``)."""
    b = annotated.batch
    N, T, A = annotated.values.shape
    S = int(num_states if num_states is not None else b.states.max(initial=0) + 1)
    avail = annotated.available
    s3 = np.broadcast_to(b.states[:, :, None], (N, T, A))
    a3 = np.broadcast_to(np.arange(A)[None, None, :], (N, T, A))
    key = s3 * A + a3
    n_keys = S * A
    if by_time:
        t3 = np.broadcast_to(np.arange(T)[None, :, None], (N, T, A))
        key = t3 * n_keys + key
        n_keys *= T
    cnt = np.bincount(key[avail], minlength=n_keys)
    tot = np.bincount(key[avail], weights=annotated.values[avail], minlength=n_keys)
    mean = np.where(cnt > 0, tot / np.maximum(cnt, 1), 0.0)
    need = b.mask[:, :, None] & ~annotated.factual_mask() & ~avail
    fill = need & (cnt[key] > 0)
    values = np.where(fill, mean[key], annotated.values)
    return AnnotatedDataset(b, values, avail | fill)
