import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from semi_ope.environments import make_tree_mdp
from semi_ope.errors import DimensionError, InfiniteDivergence, InvalidPolicyError
from semi_ope.mdp import (
    Policy,
    TabularMDP,
    TrajectoryBatch,
    exact_policy_value,
    horizon_q_values,
    policy_kl,
    rollout_q_estimate,
    sample_trajectories,
    state_occupancy,
)
from semi_ope.rng import slot_uniforms, stream

from oracles import random_bandit, random_policy


def small_chain() -> TabularMDP:
    """Three states, two actions, state 2 terminal."""
    P = np.zeros((3, 2, 3))
    P[0, 0] = [0.5, 0.5, 0.0]
    P[0, 1] = [0.0, 0.2, 0.8]
    P[1, 0] = [0.3, 0.0, 0.7]
    P[1, 1] = [0.0, 1.0, 0.0]
    P[2, :, 2] = 1.0
    R = np.array([[1.0, 0.0], [0.5, 2.0], [0.0, 0.0]])
    sd = np.array([[0.3, 0.1], [0.2, 0.0], [0.0, 0.0]])
    return TabularMDP(P, R, sd, np.array([0.6, 0.4, 0.0]), horizon=4, terminal_states=frozenset({2}))


def test_stream_is_keyed_by_address():
    a = stream(3, "x", 1, 2).random(5)
    assert np.array_equal(a, stream(3, "x", 1, 2).random(5))
    assert not np.array_equal(a, stream(3, "x", 2, 1).random(5))
    assert not np.array_equal(a, stream(3, "y", 1, 2).random(5))
    assert not np.array_equal(a, stream(4, "x", 1, 2).random(5))


@given(st.integers(0, 2**40), st.integers(0, 50), st.integers(0, 50))
def test_slot_uniforms_do_not_depend_on_array_shape(seed, i, t):
    grid = slot_uniforms(seed, np.arange(60)[:, None], np.arange(60)[None, :])
    single = slot_uniforms(seed, np.array([i]), np.array([t]))
    assert grid[i, t] == single[0]
    assert 0.0 <= single[0] < 1.0


def test_slot_uniforms_look_uniform():
    u = slot_uniforms(11, np.arange(100_000))
    assert abs(u.mean() - 0.5) < 0.005
    assert abs(np.mean(u < 0.1) - 0.1) < 0.005


def test_mdp_validation():
    P = np.full((2, 2, 2), 0.5)
    R = np.zeros((2, 2))
    with pytest.raises(ValueError):
        TabularMDP(P * 1.1, R, R, np.array([0.5, 0.5]), horizon=1)
    with pytest.raises(DimensionError):
        TabularMDP(P, np.zeros((3, 2)), R, np.array([0.5, 0.5]), horizon=1)
    with pytest.raises(ValueError):
        TabularMDP(P, R, R, np.array([0.5, 0.5]), horizon=1, terminal_states=frozenset({0}))
    with pytest.raises(InvalidPolicyError):
        Policy(np.array([[0.5, 0.6]]))
    with pytest.raises(InvalidPolicyError):
        Policy(np.array([[1.5, -0.5]]))


def test_q_values_match_rollouts():
    mdp = small_chain()
    pi = Policy(np.array([[0.3, 0.7], [0.6, 0.4], [0.5, 0.5]]))
    q = horizon_q_values(mdp, pi).values
    for t, s, a in [(0, 0, 0), (0, 1, 1), (2, 0, 1), (3, 1, 0)]:
        mean, se = rollout_q_estimate(mdp, pi, t, s, a, 40_000, stream(1, "rollout", t, s, a))
        assert abs(mean - q[t, s, a]) < 4 * se + 1e-12


def test_policy_value_matches_sampled_returns():
    mdp = small_chain()
    pi = Policy(np.array([[0.3, 0.7], [0.6, 0.4], [0.5, 0.5]]))
    b = sample_trajectories(mdp, pi, 50_000, stream(2, "t"))
    ret = b.returns()
    assert abs(ret.mean() - exact_policy_value(mdp, pi)) < 4 * ret.std() / np.sqrt(ret.size)
    # episodes stop at the terminal state
    assert np.all(b.lengths >= 1) and np.all(b.lengths <= mdp.horizon)
    ended = b.lengths < mdp.horizon
    assert np.all(np.where(b.mask, b.states, 0) != 2)
    assert ended.any()


def test_sampling_is_reproducible():
    mdp = small_chain()
    pi = Policy.uniform(3, 2)
    a = sample_trajectories(mdp, pi, 100, stream(5, "d"))
    b = sample_trajectories(mdp, pi, 100, stream(5, "d"))
    assert np.array_equal(a.states, b.states) and np.array_equal(a.rewards, b.rewards)


def test_occupancy_rows_are_distributions():
    mdp = small_chain()
    occ = state_occupancy(mdp, Policy.uniform(3, 2)).dist
    assert np.allclose(occ.sum(axis=1), 1.0)


def test_policy_kl():
    pb = Policy(np.array([[0.5, 0.5], [0.9, 0.1]]))
    assert policy_kl(pb, pb) == 0.0
    pe = Policy(np.array([[1.0, 0.0], [0.0, 1.0]]))
    assert policy_kl(pe, pb) == pytest.approx(0.5 * np.log(2) + 0.5 * np.log(10))
    with pytest.raises(InfiniteDivergence):
        policy_kl(pb, pe)
    # zero weight on the offending state removes the divergence
    assert policy_kl(Policy(np.array([[0.5, 0.5], [0.0, 1.0]])), pe, np.array([0.0, 1.0])) == 0.0


def test_tree_values_by_enumeration():
    mdp = make_tree_mdp(3, 2, [1, 2, 3, 4, 5, 6, 7, 8])
    rng = np.random.default_rng(0)
    pi = random_policy(rng, mdp.num_states, 2)
    expected = 0.0
    for a0 in range(2):
        for a1 in range(2):
            for a2 in range(2):
                s1 = 1 + a0
                s2 = 3 + 2 * a0 + a1
                leaf = 4 * a0 + 2 * a1 + a2
                expected += pi.probs[0, a0] * pi.probs[s1, a1] * pi.probs[s2, a2] * (leaf + 1)
    assert exact_policy_value(mdp, pi) == pytest.approx(expected, abs=1e-12)


def test_bandit_helper_is_horizon_one():
    mdp = random_bandit(np.random.default_rng(1), 3, 2)
    assert mdp.horizon == 1
    assert TrajectoryBatch(np.zeros((2, 1)), np.zeros((2, 1)), np.zeros((2, 1)), np.ones(2)).mask.all()


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000))
def test_value_is_linear_in_initial_distribution(seed):
    rng = np.random.default_rng(seed)
    mdp = random_bandit(rng, 3, 2)
    pi = random_policy(rng, 3, 2)
    direct = float(sum(mdp.initial_dist[s] * pi.probs[s] @ mdp.reward_mean[s] for s in range(3)))
    assert exact_policy_value(mdp, pi) == pytest.approx(direct, abs=1e-12)
