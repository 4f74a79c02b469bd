import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from semi_ope import annotation as ann
from semi_ope.environments import make_tree_mdp
from semi_ope.errors import ConfigError
from semi_ope.mdp import TrajectoryBatch, horizon_q_values, sample_trajectories
from semi_ope.rng import stream

from oracles import random_bandit, random_policy


def bandit_batch(seed=0, n=2000, S=3, A=3):
    rng = np.random.default_rng(seed)
    mdp = random_bandit(rng, S, A)
    pb = random_policy(rng, S, A, floor=0.05)
    return mdp, pb, sample_trajectories(mdp, pb, n, stream(seed, "b"))


def test_annotated_dataset_rejects_factual_annotations(didactic):
    b = didactic["batch"]
    avail = np.zeros((2, 1, 2), dtype=bool)
    avail[0, 0, 0] = True  # the factual action
    with pytest.raises(ValueError):
        ann.AnnotatedDataset(b, np.zeros((2, 1, 2)), avail)


def test_spec_validation():
    with pytest.raises(ConfigError):
        ann.AnnotationSpec(source="oracle")
    with pytest.raises(ConfigError):
        ann.AnnotationSpec(noise_std=-1.0)
    with pytest.raises(ConfigError):
        ann.AnnotationSpec(availability=1.5)
    assert ann.AnnotationSpec(availability=[0.2, 0.7]).availability_table(3, 2).shape == (3, 2)


def test_annotation_means_and_noise():
    mdp, pb, b = bandit_batch(n=20_000)
    ad = ann.annotate(b, mdp, ann.AnnotationSpec("reward_mean", 0.5, "all", 1), stream(1, "n"))
    cf = ad.available
    assert cf.sum() == b.n * 2  # every counterfactual of 3 actions
    s = np.broadcast_to(b.states[:, :, None], cf.shape)[cf]
    a = np.broadcast_to(np.arange(3)[None, None, :], cf.shape)[cf]
    resid = ad.values[cf] - mdp.reward_mean[s, a]
    assert abs(resid.mean()) < 0.02 and abs(resid.std() - 0.5) < 0.02


def test_q_eval_source_requires_policy():
    mdp, pb, b = bandit_batch(n=10)
    with pytest.raises(ConfigError):
        ann.annotate(b, mdp, ann.AnnotationSpec("q_eval"))


def test_availability_fraction_and_nesting():
    mdp, pb, b = bandit_batch(n=30_000)
    lo = ann.availability_mask(b, np.full((3, 3), 0.3), 5)
    hi = ann.availability_mask(b, np.full((3, 3), 0.6), 5)
    assert np.all(hi[lo])  # nested across fractions
    assert abs(lo.sum() / (2 * b.n) - 0.3) < 0.01
    none = ann.availability_mask(b, np.zeros((3, 3)), 5)
    assert not none.any()


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 1000), st.floats(0.0, 1.0), st.sampled_from(["equal_split", "factual_only", "random", "constant"]))
def test_weights_sum_to_one_and_respect_availability(seed, frac, kind):
    mdp, pb, b = bandit_batch(seed, n=50)
    spec = ann.AnnotationSpec("reward_mean", 0.0, frac, seed)
    ad = ann.annotate(b, mdp, spec)
    scheme = {
        "equal_split": ann.EqualSplit(),
        "factual_only": ann.FactualOnly(),
        "random": ann.RandomUniform(0.4, 0.5, seed),
        "constant": ann.Constant(np.array([[0.5, 0.3, 0.2], [0.1, 0.8, 0.1], [0.3, 0.3, 0.4]])),
    }[kind]
    wd = ann.assign_weights(ad, scheme)
    assert np.allclose(wd.weights.sum(axis=2), 1.0)
    assert not np.any((wd.weights > 0) & ~(ad.available | ad.factual_mask()))


def test_average_weights_and_augmented_policy():
    mdp, pb, b = bandit_batch(n=5000)
    ad = ann.annotate(b, mdp, ann.AnnotationSpec("reward_mean", 0.0, 0.5, 3))
    wd = ann.assign_weights(ad, ann.EqualSplit())
    wbar = ann.average_weights(wd, 3)
    # direct computation for one (s, a)
    sel = (b.states[:, 0] == 1) & (b.actions[:, 0] == 2)
    w = wd.weights[sel, 0]
    assert np.allclose(wbar.mean[1, 2], w.mean(axis=0))
    assert np.allclose(wbar.var[1, 2], w.var(axis=0))
    assert np.allclose(wbar.cov[1, 2], np.cov(w.T, ddof=0))
    pbp = ann.augmented_policy(wbar, pb)
    assert np.allclose(pbp.probs.sum(axis=1), 1.0)
    expect = sum(pb.probs[1, f] * wbar.mean[1, f] for f in range(3))
    assert np.allclose(pbp.probs[1], expect)


def test_augmented_policy_without_annotations_is_behavior():
    mdp, pb, b = bandit_batch(n=500)
    wd = ann.assign_weights(ann.AnnotatedDataset.empty(b, 3), ann.EqualSplit())
    assert np.allclose(ann.augmented_policy(ann.average_weights(wd, 3), pb).probs, pb.probs)


def test_impute_uses_pair_means():
    mdp, pb, b = bandit_batch(n=3000)
    full = ann.annotate(b, mdp, ann.AnnotationSpec("reward_mean", 1.0, "all", 0), stream(0, "x"))
    keep = ann.availability_mask(b, np.full((3, 3), 0.5), 9) & full.available
    part = ann.AnnotatedDataset(b, full.values, keep)
    imp = ann.impute_missing(part, 3)
    assert np.array_equal(imp.available, full.available)
    filled = imp.available & ~keep
    i, t, a = np.argwhere(filled)[0]
    s = b.states[i, t]
    obs = keep & (b.states[:, :, None] == s) & (np.arange(3) == a)
    assert imp.values[i, t, a] == pytest.approx(full.values[obs].mean())
    assert np.array_equal(imp.values[keep], full.values[keep])


def tree_full_data():
    """Every path of a depth-3 binary tree, so the fitted model is exact."""
    mdp = make_tree_mdp(3, 2, [0.0, 1, 2, 3, 4, 5, 6, 7])
    states, actions, rewards = [], [], []
    for a0 in range(2):
        for a1 in range(2):
            for a2 in range(2):
                s = [0, 1 + a0, 3 + 2 * a0 + a1]
                states.append(s)
                actions.append([a0, a1, a2])
                rewards.append([0.0, 0.0, float(4 * a0 + 2 * a1 + a2)])
    b = TrajectoryBatch(np.array(states), np.array(actions), np.array(rewards), np.full(8, 3))
    return mdp, b


def test_approximate_model_is_exact_with_full_coverage():
    mdp, b = tree_full_data()
    m = ann.fit_approximate_mdp(b, mdp.num_states, 2, 3)
    # last-step transitions of full-length episodes have no observed successor
    for s in range(3):
        for a in range(2):
            assert np.allclose(m.transition[s, a, : mdp.num_states], mdp.transition[s, a])
    rng = np.random.default_rng(4)
    pi = random_policy(rng, mdp.num_states, 2)
    q = horizon_q_values(mdp, pi).values
    qh = m.q_values(pi)
    for t, s in [(0, 0), (1, 1), (1, 2), (2, 3), (2, 6)]:
        assert np.allclose(qh[t, s], q[t, s])


def test_bias_correction_recovers_target_q():
    mdp, b = tree_full_data()
    rng = np.random.default_rng(5)
    pb = random_policy(rng, mdp.num_states, 2, floor=0.1)
    pe = random_policy(rng, mdp.num_states, 2)
    qb = horizon_q_values(mdp, pb).values
    qe = horizon_q_values(mdp, pe).values
    ad = ann.annotate_from_table(b, qb, 0.0, np.ones((mdp.num_states, 2)), 0)
    m = ann.fit_approximate_mdp(b, mdp.num_states, 2, 3)
    fixed = ann.correct_bias(ad, m, pb, pe)
    target = ann.annotate_from_table(b, qe, 0.0, np.ones((mdp.num_states, 2)), 0)
    assert np.allclose(fixed.values[fixed.available], target.values[target.available])


def test_episode_end_goes_to_end_state():
    b = TrajectoryBatch(np.array([[0, 1], [0, 0]]), np.array([[0, 0], [1, 0]]), np.zeros((2, 2)), np.array([2, 1]))
    m = ann.fit_approximate_mdp(b, 2, 2, 3)
    assert m.transition[0, 1, 2] == 1.0  # ended early -> end state
    assert m.transition[1, 0, 2] == 1.0
    assert m.support[0, 0] and m.support[0, 1] and not m.support[1, 1]


def test_parse_scheme():
    assert isinstance(ann.parse_scheme("equal_split"), ann.EqualSplit)
    assert isinstance(ann.parse_scheme({"scheme": "random_uniform", "width": 0.2}), ann.RandomUniform)
    with pytest.raises(ConfigError):
        ann.parse_scheme("nope")
    with pytest.raises(ConfigError):
        ann.RandomUniform(0.9, 0.4)



@pytest.mark.slow
def test_sepsis_model_q_behavior_converges():
    from semi_ope.environments import eps_greedy, make_sepsis_mdp, optimal_policy

    mdp = make_sepsis_mdp()
    pb = eps_greedy(optimal_policy(mdp), 0.1)
    q = horizon_q_values(mdp, pb).values
    b = sample_trajectories(mdp, pb, 30_000, stream(0, "sepsis-model"))
    m = ann.fit_approximate_mdp(b, mdp.num_states, 2, mdp.horizon)
    err = m.q_values(pb)[:, : mdp.num_states][:, m.support] - q[:, m.support]
    assert np.sqrt(np.mean(err**2)) < 0.05
