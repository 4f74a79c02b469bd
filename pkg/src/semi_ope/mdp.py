"""Tabular finite-horizon MDPs: exact dynamic programming and sampling.

Q-values are indexed by horizon step ``t = 0 .. T-1`` (step 1 of the
trajectory is index 0). Reward-to-go is discounted relative to the current
step, which is the quantity the per-decision estimators recurse on.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterator, Optional, Sequence

import numpy as np

from .errors import DimensionError, InfiniteDivergence, InvalidPolicyError

ROW_TOL = 1e-9


def _readonly(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=np.float64, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class TabularMDP:
    transition: np.ndarray  # [s, a, s']
    reward_mean: np.ndarray  # [s, a]
    reward_std: np.ndarray  # [s, a]
    initial_dist: np.ndarray  # [s]
    horizon: int
    discount: float = 1.0
    terminal_states: frozenset = field(default_factory=frozenset)
    name: str = ""

    def __post_init__(self):
        object.__setattr__(self, "transition", _readonly(self.transition))
        object.__setattr__(self, "reward_mean", _readonly(self.reward_mean))
        object.__setattr__(self, "reward_std", _readonly(self.reward_std))
        object.__setattr__(self, "initial_dist", _readonly(self.initial_dist))
        object.__setattr__(self, "terminal_states", frozenset(int(s) for s in self.terminal_states))
        P, R, sd, d1 = self.transition, self.reward_mean, self.reward_std, self.initial_dist
        if P.ndim != 3 or P.shape[0] != P.shape[2]:
            raise DimensionError(f"transition must be [S, A, S], got {P.shape}")
        S, A = P.shape[:2]
        if R.shape != (S, A) or sd.shape != (S, A):
            raise DimensionError("reward tables must be [S, A]")
        if d1.shape != (S,):
            raise DimensionError("initial_dist must have length S")
        if int(self.horizon) < 1:
            raise ValueError("horizon must be positive")
        if not 0.0 <= float(self.discount) <= 1.0:
            raise ValueError("discount must lie in [0, 1]")
        if np.any(P < 0) or np.max(np.abs(P.sum(axis=2) - 1.0)) > ROW_TOL:
            raise ValueError("transition rows must be probability vectors")
        if np.any(d1 < 0) or abs(d1.sum() - 1.0) > ROW_TOL:
            raise ValueError("initial_dist must sum to 1")
        if np.any(sd < 0):
            raise ValueError("reward_std must be nonnegative")
        for s in self.terminal_states:
            if not 0 <= s < S:
                raise DimensionError(f"terminal state {s} out of range")
            if np.any(np.abs(P[s, :, s] - 1.0) > ROW_TOL):
                raise ValueError(f"terminal state {s} must self-loop")
            if np.any(R[s] != 0) or np.any(sd[s] != 0):
                raise ValueError(f"terminal state {s} must have zero reward")

    @property
    def num_states(self) -> int:
        return self.transition.shape[0]

    @property
    def num_actions(self) -> int:
        return self.transition.shape[1]

    def terminal_mask(self) -> np.ndarray:
        m = np.zeros(self.num_states, dtype=bool)
        m[list(self.terminal_states)] = True
        return m


@dataclass(frozen=True, eq=False)
class Policy:
    probs: np.ndarray  # [s, a]
    name: str = ""

    def __post_init__(self):
        p = _readonly(self.probs)
        object.__setattr__(self, "probs", p)
        if p.ndim != 2:
            raise DimensionError("policy table must be [S, A]")
        if np.any(p < 0):
            raise InvalidPolicyError("policy has negative probabilities")
        bad = np.abs(p.sum(axis=1) - 1.0) > ROW_TOL
        if np.any(bad):
            raise InvalidPolicyError(f"policy row {int(np.argmax(bad))} does not sum to 1")

    @property
    def num_states(self) -> int:
        return self.probs.shape[0]

    @property
    def num_actions(self) -> int:
        return self.probs.shape[1]

    def is_deterministic(self) -> bool:
        return bool(np.all((self.probs == 0) | (self.probs == 1)))

    def greedy_actions(self) -> np.ndarray:
        """Highest-probability action per state; lowest index wins ties."""
        return np.argmax(self.probs, axis=1)

    @classmethod
    def deterministic(cls, actions: Sequence[int], num_actions: int, name: str = "") -> "Policy":
        actions = np.asarray(actions, dtype=np.int64)
        probs = np.zeros((len(actions), num_actions))
        probs[np.arange(len(actions)), actions] = 1.0
        return cls(probs, name=name)

    @classmethod
    def uniform(cls, num_states: int, num_actions: int) -> "Policy":
        return cls(np.full((num_states, num_actions), 1.0 / num_actions), name="uniform")


@dataclass(frozen=True, eq=False)
class Trajectory:
    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray

    def __len__(self) -> int:
        return len(self.states)

    @property
    def steps(self) -> list[tuple[int, int, float]]:
        return [(int(s), int(a), float(r)) for s, a, r in zip(self.states, self.actions, self.rewards)]

    def discounted_return(self, discount: float = 1.0) -> float:
        return float(np.sum(self.rewards * discount ** np.arange(len(self.rewards))))


@dataclass(eq=False)
class TrajectoryBatch:
    """Trajectories padded to a common horizon.

    Steps at ``t >= lengths[i]`` are padding: state and action 0, reward 0.
    Every estimator treats them as absorbing no-ops (ratio 1, no reward).
    """

    states: np.ndarray  # [N, T] int
    actions: np.ndarray  # [N, T] int
    rewards: np.ndarray  # [N, T] float
    lengths: np.ndarray  # [N] int

    def __post_init__(self):
        self.states = np.asarray(self.states, dtype=np.int64)
        self.actions = np.asarray(self.actions, dtype=np.int64)
        self.rewards = np.asarray(self.rewards, dtype=np.float64)
        self.lengths = np.asarray(self.lengths, dtype=np.int64)
        if not (self.states.shape == self.actions.shape == self.rewards.shape):
            raise DimensionError("states/actions/rewards must share a shape")
        if self.states.ndim != 2 or self.lengths.shape != (self.states.shape[0],):
            raise DimensionError("batch arrays must be [N, T] with lengths [N]")

    @property
    def n(self) -> int:
        return self.states.shape[0]

    @property
    def horizon(self) -> int:
        return self.states.shape[1]

    @property
    def mask(self) -> np.ndarray:
        return np.arange(self.horizon)[None, :] < self.lengths[:, None]

    def __len__(self) -> int:
        return self.n

    def __getitem__(self, i: int) -> Trajectory:
        L = int(self.lengths[i])
        return Trajectory(self.states[i, :L].copy(), self.actions[i, :L].copy(), self.rewards[i, :L].copy())

    def __iter__(self) -> Iterator[Trajectory]:
        for i in range(self.n):
            yield self[i]

    def returns(self, discount: float = 1.0) -> np.ndarray:
        disc = discount ** np.arange(self.horizon)
        return (self.rewards * self.mask * disc).sum(axis=1)

    @classmethod
    def from_trajectories(cls, trajs: Sequence[Trajectory], horizon: Optional[int] = None) -> "TrajectoryBatch":
        lengths = np.array([len(t) for t in trajs], dtype=np.int64)
        T = int(horizon if horizon is not None else (lengths.max() if len(trajs) else 1))
        n = len(trajs)
        S = np.zeros((n, T), dtype=np.int64)
        A = np.zeros((n, T), dtype=np.int64)
        R = np.zeros((n, T))
        for i, tr in enumerate(trajs):
            L = len(tr)
            S[i, :L], A[i, :L], R[i, :L] = tr.states, tr.actions, tr.rewards
        return cls(S, A, R, lengths)

    def subset(self, idx) -> "TrajectoryBatch":
        return TrajectoryBatch(self.states[idx], self.actions[idx], self.rewards[idx], self.lengths[idx])


@dataclass(frozen=True, eq=False)
class QTable:
    values: np.ndarray  # [T, S, A]

    def v(self, policy: Policy) -> np.ndarray:
        """Horizon-indexed state values, shape [T, S]."""
        return np.einsum("tsa,sa->ts", self.values, policy.probs)


@dataclass(frozen=True, eq=False)
class OccupancyTable:
    dist: np.ndarray  # [T, S]

    def time_average(self) -> np.ndarray:
        return self.dist.mean(axis=0)


def _check_dims(mdp: TabularMDP, policy: Policy) -> None:
    if policy.probs.shape != (mdp.num_states, mdp.num_actions):
        raise DimensionError(
            f"policy shape {policy.probs.shape} does not match MDP ({mdp.num_states}, {mdp.num_actions})"
        )


def horizon_q_values(mdp: TabularMDP, policy: Policy) -> QTable:
    _check_dims(mdp, policy)
    T = mdp.horizon
    P, R, pi, g = mdp.transition, mdp.reward_mean, policy.probs, mdp.discount
    Q = np.empty((T, mdp.num_states, mdp.num_actions))
    v_next = np.zeros(mdp.num_states)
    for t in range(T - 1, -1, -1):
        if t == T - 1:
            Q[t] = R
        else:
            Q[t] = R + g * (P @ v_next)
        v_next = np.sum(pi * Q[t], axis=1)
    return QTable(Q)


def exact_policy_value(mdp: TabularMDP, policy: Policy) -> float:
    q = horizon_q_values(mdp, policy)
    v1 = np.sum(policy.probs * q.values[0], axis=1)
    return float(mdp.initial_dist @ v1)


def state_values(mdp: TabularMDP, policy: Policy) -> np.ndarray:
    """V_{1:T}(s) for every state."""
    q = horizon_q_values(mdp, policy)
    return np.sum(policy.probs * q.values[0], axis=1)


def state_occupancy(mdp: TabularMDP, policy: Policy) -> OccupancyTable:
    _check_dims(mdp, policy)
    T, S = mdp.horizon, mdp.num_states
    d = np.empty((T, S))
    d[0] = mdp.initial_dist
    # P_pi[s, s'] = sum_a pi(a|s) p(s'|s,a)
    P_pi = np.einsum("sa,sap->sp", policy.probs, mdp.transition)
    for t in range(1, T):
        d[t] = d[t - 1] @ P_pi
    return OccupancyTable(d)


def policy_kl(pi_e: Policy, pi_b: Policy, state_weights: Optional[np.ndarray] = None) -> float:
    """State-weighted KL(pi_e || pi_b). Uniform state weights by default."""
    if pi_e.probs.shape != pi_b.probs.shape:
        raise DimensionError("policies must share a shape")
    S = pi_e.num_states
    w = np.full(S, 1.0 / S) if state_weights is None else np.asarray(state_weights, dtype=float)
    pe, pb = pi_e.probs, pi_b.probs
    active = (w > 0)[:, None] & (pe > 0)
    if np.any(active & (pb == 0)):
        s, a = np.argwhere(active & (pb == 0))[0]
        raise InfiniteDivergence(f"pi_e({a}|{s}) > 0 but pi_b({a}|{s}) = 0")
    terms = np.zeros_like(pe)
    terms[active] = pe[active] * np.log(pe[active] / pb[active])
    return float(w @ terms.sum(axis=1))


def _inverse_cdf(cum: np.ndarray, u: np.ndarray) -> np.ndarray:
    # cum: [n, K] cumulative rows, u: [n]
    idx = (cum < u[:, None]).sum(axis=1)
    return np.minimum(idx, cum.shape[1] - 1)


def sample_trajectories(mdp: TabularMDP, policy: Policy, n: int, rng: np.random.Generator) -> TrajectoryBatch:
    """Draw ``n`` episodes. The draw order is fixed per step: actions,
    reward noise, next states; draws for finished episodes are discarded so
    the stream layout does not depend on episode lengths."""
    _check_dims(mdp, policy)
    T = mdp.horizon
    term = mdp.terminal_mask()
    pi_cum = np.cumsum(policy.probs, axis=1)
    d1_cum = np.cumsum(mdp.initial_dist)
    S = np.zeros((n, T), dtype=np.int64)
    A = np.zeros((n, T), dtype=np.int64)
    R = np.zeros((n, T))
    lengths = np.zeros(n, dtype=np.int64)

    s = _inverse_cdf(np.broadcast_to(d1_cum, (n, d1_cum.size)), rng.random(n))
    alive = ~term[s]
    for t in range(T):
        a = _inverse_cdf(pi_cum[s], rng.random(n))
        noise = rng.standard_normal(n)
        r = mdp.reward_mean[s, a] + mdp.reward_std[s, a] * noise
        u = rng.random(n)
        if not alive.any():
            continue
        idx = np.flatnonzero(alive)
        S[idx, t], A[idx, t], R[idx, t] = s[idx], a[idx], r[idx]
        lengths[idx] += 1
        cum = np.cumsum(mdp.transition[s[idx], a[idx]], axis=1)
        s_next = s.copy()
        s_next[idx] = _inverse_cdf(cum, u[idx])
        s = s_next
        alive = alive & ~term[s]
    return TrajectoryBatch(S, A, R, lengths)


def sample_trajectory(mdp: TabularMDP, policy: Policy, rng: np.random.Generator) -> Trajectory:
    return sample_trajectories(mdp, policy, 1, rng)[0]


def rollout_q_estimate(
    mdp: TabularMDP, policy: Policy, t: int, s: int, a: int, n: int, rng: np.random.Generator
) -> tuple[float, float]:
    """Monte Carlo estimate of Q_t(s, a): mean and standard error over ``n``
    rollouts that start in ``s`` at step ``t`` with first action ``a``."""
    T = mdp.horizon
    term = mdp.terminal_mask()
    pi_cum = np.cumsum(policy.probs, axis=1)
    states = np.full(n, s, dtype=np.int64)
    acts = np.full(n, a, dtype=np.int64)
    total = np.zeros(n)
    alive = np.full(n, not term[s])
    disc = 1.0
    for k in range(t, T):
        if k > t:
            acts = _inverse_cdf(pi_cum[states], rng.random(n))
        r = mdp.reward_mean[states, acts] + mdp.reward_std[states, acts] * rng.standard_normal(n)
        total += np.where(alive, disc * r, 0.0)
        cum = np.cumsum(mdp.transition[states, acts], axis=1)
        states = _inverse_cdf(cum, rng.random(n))
        alive = alive & ~term[states]
        disc *= mdp.discount
    return float(total.mean()), float(total.std(ddof=1) / math.sqrt(n))
