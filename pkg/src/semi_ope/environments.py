"""Experimental environments and policy families.

Bandits are horizon-1 MDPs whose states self-loop. The sepsis simulator is a
fully tabular export: 1440 encoded patient states plus one absorbing sink
that every discharge/death transition enters.

Sepsis state encoding is mixed-radix with digit order
``(hr, bp, o2, glucose, diabetes, abx, vaso, vent)``, ``hr`` most significant::

    index = ((((((hr*3 + bp)*2 + o2)*5 + glucose)*2 + diabetes)*2 + abx)*2 + vaso)*2 + vent
"""
from __future__ import annotations

import itertools
import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from importlib import resources
from typing import Any, Iterable, Mapping, Optional, Sequence

import numpy as np

from .errors import ConfigError, DimensionError, InvalidPolicyError
from .mdp import Policy, TabularMDP, TrajectoryBatch, exact_policy_value, sample_trajectories
from .rng import stream

# --------------------------------------------------------------------------
# bandits and trees


@dataclass(frozen=True)
class BanditSpec:
    reward_means: Sequence[Sequence[float]]
    reward_stds: Sequence[Sequence[float]]
    state_probs: Sequence[float]

    @classmethod
    def table1(cls, sigma: float = 0.5) -> "BanditSpec":
        return cls([[1.0, 2.0], [1.0, 1.0]], [[sigma, sigma], [sigma, sigma]], [0.5, 0.5])

    @classmethod
    def didactic(cls) -> "BanditSpec":
        return cls([[1.0, 1.0], [0.0, 0.0]], [[0.0, 0.0], [0.0, 0.0]], [0.5, 0.5])


def make_bandit(spec: BanditSpec, name: str = "bandit") -> TabularMDP:
    R = np.asarray(spec.reward_means, dtype=float)
    sd = np.asarray(spec.reward_stds, dtype=float)
    d1 = np.asarray(spec.state_probs, dtype=float)
    if R.ndim != 2 or sd.shape != R.shape or d1.shape != (R.shape[0],):
        raise DimensionError("bandit tables must be [S, A] with state_probs of length S")
    if np.any(sd < 0):
        raise ValueError("reward std must be nonnegative")
    S, A = R.shape
    P = np.zeros((S, A, S))
    P[np.arange(S), :, np.arange(S)] = 1.0
    return TabularMDP(P, R, sd, d1, horizon=1, discount=1.0, name=name)


def make_two_state_bandit(spec: BanditSpec) -> TabularMDP:
    if np.shape(spec.reward_means) != (2, 2):
        raise DimensionError("two-state bandit needs 2 states and 2 actions")
    return make_bandit(spec, name="two-state-bandit")


def make_one_state_bandit(r0: float, r1: float, s0: float, s1: float) -> TabularMDP:
    if s0 < 0 or s1 < 0:
        raise ValueError("reward std must be nonnegative")
    return make_bandit(BanditSpec([[r0, r1]], [[s0, s1]], [1.0]), name="one-state-bandit")


def make_tree_mdp(depth: int, branching: int, terminal_rewards: Sequence[float]) -> TabularMDP:
    """Deterministic tree; node ids are breadth-first, leaves are absorbing.

    The reward for reaching leaf ``j`` (breadth-first order among leaves) is
    paid on the transition into it, i.e. on the last step.
    """
    rewards = np.asarray(terminal_rewards, dtype=float)
    if depth < 1 or branching < 1:
        raise ValueError("depth and branching must be positive")
    n_leaves = branching**depth
    if rewards.shape != (n_leaves,):
        raise DimensionError(f"need {n_leaves} terminal rewards, got {rewards.size}")
    level_sizes = [branching**k for k in range(depth + 1)]
    offsets = np.concatenate([[0], np.cumsum(level_sizes)])
    S, A = int(offsets[-1]), branching
    P = np.zeros((S, A, S))
    R = np.zeros((S, A))
    for k in range(depth):
        for j in range(level_sizes[k]):
            node = offsets[k] + j
            for a in range(A):
                child_j = j * branching + a
                P[node, a, offsets[k + 1] + child_j] = 1.0
                if k == depth - 1:
                    R[node, a] = rewards[child_j]
    leaves = range(int(offsets[depth]), S)
    for s in leaves:
        P[s, :, s] = 1.0
    d1 = np.zeros(S)
    d1[0] = 1.0
    return TabularMDP(P, R, np.zeros((S, A)), d1, horizon=depth, terminal_states=frozenset(leaves), name="tree")


# --------------------------------------------------------------------------
# sepsis simulator

VITALS = ("hr", "bp", "o2", "glucose")
_RADIX = (3, 3, 2, 5, 2, 2, 2, 2)  # hr, bp, o2, glucose, diabetes, abx, vaso, vent
NUM_SEPSIS_STATES = int(np.prod(_RADIX))


def encode_state(hr: int, bp: int, o2: int, glucose: int, diabetes: int, abx: int = 0, vaso: int = 0, vent: int = 0) -> int:
    idx = 0
    for digit, base in zip((hr, bp, o2, glucose, diabetes, abx, vaso, vent), _RADIX):
        if not 0 <= digit < base:
            raise ValueError(f"digit {digit} out of range for base {base}")
        idx = idx * base + int(digit)
    return idx


def decode_state(index: int) -> dict:
    digits = []
    for base in reversed(_RADIX):
        digits.append(index % base)
        index //= base
    hr, bp, o2, glucose, diabetes, abx, vaso, vent = reversed(digits)
    return dict(hr=hr, bp=bp, o2=o2, glucose=glucose, diabetes=diabetes, abx=abx, vaso=vaso, vent=vent)


def _check_prob(x: Any, path: str) -> float:
    try:
        x = float(x)
    except (TypeError, ValueError):
        raise ConfigError("expected a number", path) from None
    if not 0.0 <= x <= 1.0:
        raise ConfigError(f"probability {x} outside [0, 1]", path)
    return x


@dataclass(frozen=True)
class SepsisConfig:
    vital_level_counts: Mapping[str, int] = field(default_factory=lambda: {"hr": 3, "bp": 3, "o2": 2, "glucose": 5})
    normal_levels: Mapping[str, int] = field(default_factory=lambda: {"hr": 1, "bp": 1, "o2": 1, "glucose": 2})
    diabetes_prevalence: float = 0.2
    max_length: int = 20
    discharge_reward: float = 1.0
    death_reward: float = -1.0
    death_abnormal_count: int = 3
    initial_abnormal_counts: Sequence[int] = (1, 2)
    fluctuation: Mapping[str, Mapping[str, float]] = field(default_factory=dict)
    vasopressor_on: Mapping[str, Mapping[str, float]] = field(default_factory=dict)
    vasopressor_withdrawn: Mapping[str, float] = field(default_factory=dict)

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        counts = tuple(self.vital_level_counts.get(v) for v in VITALS)
        if counts != _RADIX[:4]:
            raise ConfigError(f"vital level counts must be {dict(zip(VITALS, _RADIX[:4]))}", "vital_level_counts")
        for v in VITALS:
            n = self.normal_levels.get(v)
            if n is None or not 0 <= n < self.vital_level_counts[v]:
                raise ConfigError("normal level out of range", f"normal_levels.{v}")
        _check_prob(self.diabetes_prevalence, "diabetes_prevalence")
        if int(self.max_length) < 1:
            raise ConfigError("must be positive", "max_length")
        for key in ("hr", "bp", "o2", "glucose_nondiabetic", "glucose_diabetic"):
            entry = self.fluctuation.get(key)
            if entry is None:
                raise ConfigError("missing", f"fluctuation.{key}")
            _check_prob(entry.get("move"), f"fluctuation.{key}.move")
            _check_prob(entry.get("toward_normal"), f"fluctuation.{key}.toward_normal")
        for group in ("nondiabetic", "diabetic"):
            entry = self.vasopressor_on.get(group)
            if entry is None:
                raise ConfigError("missing", f"vasopressor_on.{group}")
            _check_prob(entry.get("bp_up"), f"vasopressor_on.{group}.bp_up")
            _check_prob(entry.get("glucose_up", 0.0), f"vasopressor_on.{group}.glucose_up")
        _check_prob(self.vasopressor_withdrawn.get("bp_down"), "vasopressor_withdrawn.bp_down")
        if not self.initial_abnormal_counts or any(
            not 0 <= int(k) < self.death_abnormal_count for k in self.initial_abnormal_counts
        ):
            raise ConfigError("counts must be below the death threshold", "initial_abnormal_counts")

    @property
    def num_states(self) -> int:
        return NUM_SEPSIS_STATES

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "SepsisConfig":
        d = dict(d)
        d.pop("format_version", None)
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown keys {sorted(unknown)}", "sepsis")
        if "initial_abnormal_counts" in d:
            d["initial_abnormal_counts"] = tuple(d["initial_abnormal_counts"])
        return cls(**d)

    @classmethod
    def default(cls) -> "SepsisConfig":
        text = resources.files("semi_ope").joinpath("data/sepsis_default.json").read_text()
        return cls.from_dict(json.loads(text))

    def to_dict(self) -> dict:
        return {
            "format_version": 1,
            "vital_level_counts": dict(self.vital_level_counts),
            "normal_levels": dict(self.normal_levels),
            "diabetes_prevalence": self.diabetes_prevalence,
            "max_length": self.max_length,
            "discharge_reward": self.discharge_reward,
            "death_reward": self.death_reward,
            "death_abnormal_count": self.death_abnormal_count,
            "initial_abnormal_counts": list(self.initial_abnormal_counts),
            "fluctuation": {k: dict(v) for k, v in self.fluctuation.items()},
            "vasopressor_on": {k: dict(v) for k, v in self.vasopressor_on.items()},
            "vasopressor_withdrawn": dict(self.vasopressor_withdrawn),
        }


def _fluctuate(level: int, n_levels: int, normal: int, move: float, toward: float) -> np.ndarray:
    out = np.zeros(n_levels)
    out[level] += 1.0 - move
    if level == normal:
        up, down = min(level + 1, n_levels - 1), max(level - 1, 0)
        out[up] += move / 2
        out[down] += move / 2
    else:
        step = 1 if normal > level else -1
        away = min(max(level - step, 0), n_levels - 1)
        out[level + step] += move * toward
        out[away] += move * (1.0 - toward)
    return out


def _shift_up(level: int, n_levels: int, p: float) -> np.ndarray:
    out = np.zeros(n_levels)
    out[level] += 1.0 - p
    out[min(level + 1, n_levels - 1)] += p
    return out


def _shift_down(level: int, n_levels: int, p: float) -> np.ndarray:
    out = np.zeros(n_levels)
    out[level] += 1.0 - p
    out[max(level - 1, 0)] += p
    return out


def sepsis_abnormal_count(index: int, config: SepsisConfig) -> int:
    st = decode_state(index)
    return sum(int(st[v] != config.normal_levels[v]) for v in VITALS)


def make_sepsis_mdp(config: Optional[SepsisConfig] = None) -> TabularMDP:
    """Tabular sepsis MDP with a binary vasopressor action.

    At a state with at least ``death_abnormal_count`` abnormal vitals every
    action ends the episode with the death reward. At a state with all vitals
    normal, choosing "off" (all treatments off) discharges with the discharge
    reward. Otherwise the reward is 0 and vitals move independently.
    Antibiotics and ventilation stay off.
    """
    cfg = config or SepsisConfig.default()
    n_enc = NUM_SEPSIS_STATES
    sink = n_enc
    S, A = n_enc + 1, 2
    P = np.zeros((S, A, S))
    R = np.zeros((S, A))
    levels = cfg.vital_level_counts
    normal = cfg.normal_levels
    fl = cfg.fluctuation
    for idx in range(n_enc):
        st = decode_state(idx)
        n_abn = sum(int(st[v] != normal[v]) for v in VITALS)
        for a in range(A):
            if n_abn >= cfg.death_abnormal_count:
                P[idx, a, sink] = 1.0
                R[idx, a] = cfg.death_reward
                continue
            if n_abn == 0 and a == 0 and st["abx"] == 0 and st["vent"] == 0:
                P[idx, a, sink] = 1.0
                R[idx, a] = cfg.discharge_reward
                continue
            diab = st["diabetes"]
            group = "diabetic" if diab else "nondiabetic"
            hr_d = _fluctuate(st["hr"], levels["hr"], normal["hr"], fl["hr"]["move"], fl["hr"]["toward_normal"])
            o2_d = _fluctuate(st["o2"], levels["o2"], normal["o2"], fl["o2"]["move"], fl["o2"]["toward_normal"])
            if a == 1:
                bp_d = _shift_up(st["bp"], levels["bp"], cfg.vasopressor_on[group]["bp_up"])
            elif st["vaso"] == 1:
                bp_d = _shift_down(st["bp"], levels["bp"], cfg.vasopressor_withdrawn["bp_down"])
            else:
                bp_d = _fluctuate(st["bp"], levels["bp"], normal["bp"], fl["bp"]["move"], fl["bp"]["toward_normal"])
            glu_up = cfg.vasopressor_on[group].get("glucose_up", 0.0)
            if a == 1 and glu_up > 0:
                glu_d = _shift_up(st["glucose"], levels["glucose"], glu_up)
            else:
                g = fl["glucose_diabetic" if diab else "glucose_nondiabetic"]
                glu_d = _fluctuate(st["glucose"], levels["glucose"], normal["glucose"], g["move"], g["toward_normal"])
            joint = np.einsum("a,b,c,d->abcd", hr_d, bp_d, o2_d, glu_d)
            for (h, b, o, gl) in zip(*np.nonzero(joint)):
                nxt = encode_state(h, b, o, gl, diab, 0, a, 0)
                P[idx, a, nxt] += joint[h, b, o, gl]
    P[sink, :, sink] = 1.0

    d1 = np.zeros(S)
    configs = [
        c for c in itertools.product(*(range(levels[v]) for v in VITALS))
        if sum(int(x != normal[v]) for x, v in zip(c, VITALS)) in set(cfg.initial_abnormal_counts)
    ]
    for c in configs:
        d1[encode_state(*c, diabetes=0)] += (1.0 - cfg.diabetes_prevalence) / len(configs)
        d1[encode_state(*c, diabetes=1)] += cfg.diabetes_prevalence / len(configs)
    return TabularMDP(
        P, R, np.zeros((S, A)), d1, horizon=int(cfg.max_length), discount=1.0,
        terminal_states=frozenset({sink}), name="sepsis",
    )


# --------------------------------------------------------------------------
# policies


def optimal_policy(mdp: TabularMDP, iterations: Optional[int] = None, tol: float = 1e-12) -> Policy:
    """Deterministic greedy policy from repeated Bellman optimality backups.

    Runs ``iterations`` backups (default: the MDP horizon, i.e. finite-horizon
    DP) and acts greedily on the resulting first-step Q-values. Ties within
    ``tol`` go to the lowest action index.
    """
    n_iter = mdp.horizon if iterations is None else int(iterations)
    P, R, g = mdp.transition, mdp.reward_mean, mdp.discount
    V = np.zeros(mdp.num_states)
    Q = R.copy()
    for _ in range(n_iter):
        Q = R + g * (P @ V)
        V_new = Q.max(axis=1)
        if iterations is not None and np.max(np.abs(V_new - V)) < tol:
            V = V_new
            break
        V = V_new
    best = Q >= (Q.max(axis=1, keepdims=True) - tol)
    actions = np.argmax(best, axis=1)
    return Policy.deterministic(actions, mdp.num_actions, name="optimal")


def eps_greedy(base: Policy, eps: float) -> Policy:
    if not base.is_deterministic():
        raise InvalidPolicyError("eps_greedy needs a deterministic base policy")
    if not 0.0 <= eps <= 1.0:
        raise ValueError("eps must lie in [0, 1]")
    A = base.num_actions
    probs = np.full(base.probs.shape, eps / A)
    probs[np.arange(base.num_states), base.greedy_actions()] += 1.0 - eps
    return Policy(probs, name=f"eps-greedy({eps:g})")


def perturb_policy(
    optimal: Policy,
    flip_count: int,
    rng: np.random.Generator,
    candidate_states: Optional[Sequence[int]] = None,
) -> Policy:
    """Deterministic policy that disagrees with ``optimal`` in exactly
    ``flip_count`` states drawn uniformly from ``candidate_states``."""
    if not optimal.is_deterministic():
        raise InvalidPolicyError("perturb_policy needs a deterministic policy")
    cand = np.arange(optimal.num_states) if candidate_states is None else np.asarray(candidate_states)
    if not 0 <= flip_count <= cand.size:
        raise ValueError(f"flip_count {flip_count} exceeds {cand.size} candidate states")
    A = optimal.num_actions
    actions = optimal.greedy_actions().copy()
    chosen = rng.choice(cand, size=flip_count, replace=False)
    for s in np.sort(chosen):
        if A == 2:
            actions[s] = 1 - actions[s]
        else:
            others = [a for a in range(A) if a != actions[s]]
            actions[s] = others[int(rng.integers(len(others)))]
    return Policy.deterministic(actions, A, name=f"flip{flip_count}")


@dataclass
class PolicySet:
    policies: list
    labels: list
    flip_counts: list
    seeds: list

    def __len__(self) -> int:
        return len(self.policies)

    def __iter__(self):
        return iter(self.policies)

    def __getitem__(self, i):
        return self.policies[i]


def make_policy_set(
    mdp: TabularMDP,
    optimal: Policy,
    flip_counts: Iterable[int] = (50, 100, 200, 300, 400),
    per_count: int = 5,
    master_seed: int = 0,
) -> PolicySet:
    cand = np.flatnonzero(~mdp.terminal_mask())
    policies, labels, counts, seeds = [optimal], ["optimal"], [0], [-1]
    for k in flip_counts:
        for j in range(per_count):
            rng = stream(master_seed, "perturb", int(k), j)
            pol = perturb_policy(optimal, int(k), rng, cand)
            policies.append(Policy(pol.probs, name=f"flip{k}-{j}"))
            labels.append(f"flip{k}-{j}")
            counts.append(int(k))
            seeds.append(j)
    return PolicySet(policies, labels, counts, seeds)


# --------------------------------------------------------------------------
# datasets


def _gen_one(args) -> TrajectoryBatch:
    mdp, behavior, n_episodes, master_seed, i = args
    return sample_trajectories(mdp, behavior, n_episodes, stream(master_seed, "dataset", i))


def generate_datasets(
    mdp: TabularMDP,
    behavior: Policy,
    n_datasets: int,
    n_episodes: int,
    master_seed: int,
    jobs: int = 1,
) -> list[TrajectoryBatch]:
    tasks = [(mdp, behavior, n_episodes, master_seed, i) for i in range(n_datasets)]
    if jobs <= 1 or n_datasets <= 1:
        return [_gen_one(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=jobs) as ex:
        return list(ex.map(_gen_one, tasks))


# --------------------------------------------------------------------------
# registry used by the CLI

ENVIRONMENTS = ("two-state-bandit", "one-state-bandit", "tree", "sepsis")


def make_environment(name: str, params: Optional[Mapping[str, Any]] = None) -> TabularMDP:
    p = dict(params or {})
    if name == "two-state-bandit":
        sigma = float(p.get("sigma", 0.5))
        means = p.get("reward_means", [[1.0, 2.0], [1.0, 1.0]])
        stds = p.get("reward_stds", [[sigma, sigma], [sigma, sigma]])
        return make_two_state_bandit(BanditSpec(means, stds, p.get("state_probs", [0.5, 0.5])))
    if name == "one-state-bandit":
        means = p.get("reward_means", [1.0, 2.0])
        stds = p.get("reward_stds", [0.5, 0.5])
        return make_one_state_bandit(float(means[0]), float(means[1]), float(stds[0]), float(stds[1]))
    if name == "tree":
        depth, branching = int(p.get("depth", 3)), int(p.get("branching", 2))
        rewards = p.get("terminal_rewards", list(range(branching**depth)))
        return make_tree_mdp(depth, branching, rewards)
    if name == "sepsis":
        cfg_src = p.get("config")
        if cfg_src is None:
            cfg = SepsisConfig.default()
        elif isinstance(cfg_src, Mapping):
            cfg = SepsisConfig.from_dict(cfg_src)
        else:
            with open(cfg_src) as fh:
                cfg = SepsisConfig.from_dict(json.load(fh))
        return make_sepsis_mdp(cfg)
    raise ConfigError(f"unknown environment {name!r}; expected one of {ENVIRONMENTS}", "env")


def behavior_value_gap(mdp: TabularMDP, eps: float = 0.1) -> float:
    opt = optimal_policy(mdp)
    return exact_policy_value(mdp, opt) - exact_policy_value(mdp, eps_greedy(opt, eps))
