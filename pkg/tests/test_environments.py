import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from semi_ope.environments import (
    NUM_SEPSIS_STATES,
    SepsisConfig,
    decode_state,
    encode_state,
    eps_greedy,
    generate_datasets,
    make_environment,
    make_policy_set,
    make_sepsis_mdp,
    make_tree_mdp,
    optimal_policy,
    perturb_policy,
    sepsis_abnormal_count,
)
from semi_ope.errors import ConfigError, DimensionError
from semi_ope.mdp import Policy, exact_policy_value
from semi_ope.rng import stream


@pytest.fixture(scope="module")
def sepsis():
    return make_sepsis_mdp()


@given(st.integers(0, NUM_SEPSIS_STATES - 1))
def test_state_codec_roundtrip(idx):
    assert encode_state(**decode_state(idx)) == idx


def test_encode_rejects_out_of_range():
    with pytest.raises(ValueError):
        encode_state(3, 0, 0, 0, 0)


def test_sepsis_structure(sepsis):
    cfg = SepsisConfig.default()
    assert sepsis.num_states == NUM_SEPSIS_STATES + 1
    assert sepsis.num_actions == 2 and sepsis.horizon == cfg.max_length
    sink = NUM_SEPSIS_STATES
    assert sepsis.terminal_states == frozenset({sink})
    for idx in range(0, NUM_SEPSIS_STATES, 37):
        n = sepsis_abnormal_count(idx, cfg)
        st_ = decode_state(idx)
        if n >= cfg.death_abnormal_count:
            assert np.all(sepsis.reward_mean[idx] == cfg.death_reward)
            assert np.all(sepsis.transition[idx, :, sink] == 1.0)
        elif n == 0:
            assert sepsis.reward_mean[idx, 0] == cfg.discharge_reward
        else:
            assert np.all(sepsis.reward_mean[idx] == 0.0)
            # the vasopressor bit of the next state records the action
            for a in range(2):
                nxt = np.flatnonzero(sepsis.transition[idx, a])
                assert all(decode_state(j)["vaso"] == a for j in nxt)
                assert all(decode_state(j)["diabetes"] == st_["diabetes"] for j in nxt)
    # initial states have 1 or 2 abnormal vitals and are non-terminal
    start = np.flatnonzero(sepsis.initial_dist)
    assert all(sepsis_abnormal_count(s, cfg) in (1, 2) for s in start)


def test_sepsis_config_validation():
    d = SepsisConfig.default().to_dict()
    d["fluctuation"]["hr"]["move"] = 1.5
    with pytest.raises(ConfigError) as e:
        SepsisConfig.from_dict(d)
    assert e.value.path == "fluctuation.hr.move"
    with pytest.raises(ConfigError):
        SepsisConfig.from_dict({**SepsisConfig.default().to_dict(), "bogus": 1})
    assert SepsisConfig.from_dict(SepsisConfig.default().to_dict()) == SepsisConfig.default()


def test_optimal_policy_dominates(sepsis):
    opt = optimal_policy(sepsis)
    v = exact_policy_value(sepsis, opt)
    rng = np.random.default_rng(0)
    for _ in range(5):
        pi = Policy.deterministic(rng.integers(0, 2, sepsis.num_states), 2)
        assert exact_policy_value(sepsis, pi) <= v + 1e-12
    assert exact_policy_value(sepsis, eps_greedy(opt, 0.1)) < v


def test_eps_greedy_probabilities():
    base = Policy.deterministic([0, 1, 2], 3)
    pi = eps_greedy(base, 0.3)
    assert np.allclose(pi.probs[0], [0.8, 0.1, 0.1])
    assert np.allclose(pi.probs[2], [0.1, 0.1, 0.8])


def test_perturbation_flips_exactly(sepsis):
    opt = optimal_policy(sepsis)
    pi = perturb_policy(opt, 50, stream(0, "p"), np.arange(NUM_SEPSIS_STATES))
    assert int(np.sum(pi.greedy_actions() != opt.greedy_actions())) == 50


def test_policy_set_shape_and_spread(sepsis):
    opt = optimal_policy(sepsis)
    ps = make_policy_set(sepsis, opt, master_seed=0)
    assert len(ps) == 26 and ps.labels[0] == "optimal"
    vb = exact_policy_value(sepsis, eps_greedy(opt, 0.1))
    vals = np.array([exact_policy_value(sepsis, p) for p in ps])
    better = int(np.sum(vals >= vb))
    # a mix of policies better and worse than behavior
    assert 6 <= better <= 20
    again = make_policy_set(sepsis, opt, master_seed=0)
    assert all(np.array_equal(a.probs, b.probs) for a, b in zip(ps, again))


def test_tree_mdp():
    mdp = make_tree_mdp(3, 2, np.arange(8.0))
    assert mdp.num_states == 15 and mdp.horizon == 3
    assert mdp.terminal_states == frozenset(range(7, 15))
    with pytest.raises(DimensionError):
        make_tree_mdp(3, 2, [1.0, 2.0])


def test_environment_registry():
    assert make_environment("two-state-bandit").reward_mean.tolist() == [[1.0, 2.0], [1.0, 1.0]]
    assert make_environment("one-state-bandit", {"reward_means": [1, 2]}).num_states == 1
    with pytest.raises(ConfigError):
        make_environment("nope")


def test_generate_datasets_independent_of_jobs():
    mdp = make_tree_mdp(3, 2, np.arange(8.0))
    pi = Policy.uniform(mdp.num_states, 2)
    a = generate_datasets(mdp, pi, 3, 50, 9, jobs=1)
    b = generate_datasets(mdp, pi, 3, 50, 9, jobs=2)
    assert all(np.array_equal(x.actions, y.actions) for x, y in zip(a, b))
    assert not np.array_equal(a[0].actions, a[1].actions)
