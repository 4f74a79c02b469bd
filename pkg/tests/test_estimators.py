import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from semi_ope import annotation as ann
from semi_ope import estimators as est
from semi_ope.environments import make_tree_mdp
from semi_ope.errors import SupportViolation
from semi_ope.mdp import Policy, exact_policy_value, horizon_q_values, sample_trajectories
from semi_ope.rng import stream

from oracles import cpdis_loop, random_policy


def tree_setup(seed=0, n=400):
    rng = np.random.default_rng(seed)
    mdp = make_tree_mdp(3, 2, rng.uniform(-1, 1, 8))
    pb = random_policy(rng, mdp.num_states, 2, floor=0.1)
    pe = random_policy(rng, mdp.num_states, 2)
    b = sample_trajectories(mdp, pb, n, stream(seed, "tree"))
    return mdp, pb, pe, b


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 5000), st.floats(0.5, 1.0))
def test_pdis_recursion_matches_closed_form(seed, discount):
    mdp, pb, pe, b = tree_setup(seed, 50)
    rep = est.pdis_estimate(b, pe, pb, discount)
    assert np.allclose(rep.per_trajectory_estimates, est.pdis_closed_form(b, pe, pb, discount), atol=1e-12)


def test_on_policy_pdis_is_mean_return():
    mdp, pb, pe, b = tree_setup()
    rep = est.pdis_estimate(b, pb, pb)
    assert rep.value == pytest.approx(b.returns().mean(), abs=1e-12)
    assert rep.ess == pytest.approx(b.n)


def test_support_violation_reported():
    from semi_ope.mdp import TrajectoryBatch

    b = TrajectoryBatch(np.array([[0]]), np.array([[1]]), np.array([[1.0]]), np.array([1]))
    pb = Policy(np.array([[1.0, 0.0]]))
    pe = Policy(np.array([[0.0, 1.0]]))
    with pytest.raises(SupportViolation) as e:
        est.is_estimate(b, pe, pb)
    assert (e.value.trajectory, e.value.t, e.value.state, e.value.action) == (0, 0, 0, 1)


def test_ess_definition():
    assert est.effective_sample_size([1, 1, 1, 1]) == 4
    assert est.effective_sample_size([2, 0, 0, 0]) == 1
    assert est.effective_sample_size([1, 2, 3]) == pytest.approx(36 / 14)
    with pytest.raises(ValueError):
        est.effective_sample_size([0, 0])


def test_weighted_variants():
    mdp, pb, pe, b = tree_setup(1, 2000)
    rep = est.is_estimate if mdp.horizon == 1 else est.pdis_estimate
    r = rep(b, pe, pb)
    wis = est.weighted_variant(r, "trajectory")
    assert wis.value == pytest.approx(r.value / r.per_trajectory_weights.mean())
    pdwis = est.pdwis_estimate(b, pe, pb)
    cum = r.components["cum_ratio"]
    rew = r.components["disc_reward"]
    expect = np.sum(cum * rew / cum.mean(axis=0), axis=1).mean()
    assert pdwis.value == pytest.approx(expect)
    assert pdwis.estimator_id == "pdwis" and wis.estimator_id == "pdis_wis"


def test_cpdis_matches_loop_and_cstar():
    mdp, pb, pe, b = tree_setup(2, 300)
    q = horizon_q_values(mdp, pe).values
    ad = ann.annotate_from_table(b, q, 0.0, np.full((mdp.num_states, 2), 0.7), 3)
    wd = ann.assign_weights(ad, ann.RandomUniform(0.5, 0.6, 4))
    pbp = ann.augmented_policy(ann.average_weights(wd, mdp.num_states), pb)
    rep = est.cpdis_estimate(wd, pe, pbp)
    for i in range(0, b.n, 37):
        L = int(b.lengths[i])
        loop = cpdis_loop(b.states[i, :L], b.actions[i, :L], b.rewards[i, :L], wd.weights[i, :L],
                          ad.values[i, :L], pe.probs, pbp.probs)
        assert rep.per_trajectory_estimates[i] == pytest.approx(loop, abs=1e-12)
    # with all annotations and equal weights, C-PDIS reduces to C*-PDIS for a
    # balanced behavior policy
    full = ann.annotate_from_table(b, q, 0.0, np.ones((mdp.num_states, 2)), 3)
    wd = ann.assign_weights(full, ann.EqualSplit())
    pbp = ann.augmented_policy(ann.average_weights(wd, mdp.num_states), pb)
    assert np.allclose(pbp.probs[[0, 1, 2]], 0.5)
    a = est.cpdis_estimate(wd, pe, pbp).per_trajectory_estimates
    c = est.cstar_pdis_estimate(full, pe).per_trajectory_estimates
    assert np.allclose(a, c, atol=1e-12)


def test_cstar_with_exact_q_is_deterministic_on_tree():
    mdp, pb, pe, b = tree_setup(3, 100)
    full = ann.annotate_from_table(b, horizon_q_values(mdp, pe).values, 0.0, np.ones((mdp.num_states, 2)), 0)
    rep = est.cstar_pdis_estimate(full, pe)
    # deterministic transitions and rewards: every trajectory gives v(pi_e)
    assert np.allclose(rep.per_trajectory_estimates, exact_policy_value(mdp, pe), atol=1e-12)
    assert rep.ess == b.n


def test_cstar_needs_annotations_that_pi_e_uses():
    mdp, pb, pe, b = tree_setup(4, 50)
    empty = ann.AnnotatedDataset.empty(b, 2)
    with pytest.raises(ValueError):
        est.cstar_pdis_estimate(empty, pe)
    # a policy that always matches the factual action needs none
    det = Policy.deterministic(np.zeros(mdp.num_states, dtype=int), 2)
    sub = b.subset(np.flatnonzero(np.all((b.actions == 0) | ~b.mask, axis=1)))
    est.cstar_pdis_estimate(ann.AnnotatedDataset.empty(sub, 2), det)


def test_didactic_values(didactic):
    d = didactic
    assert est.naive_unweighted_estimate(d["annotated"], d["pi_e"], d["pi_b"]).value == 2 / 3
    for alpha in (0.1, 0.5, 0.9):
        wd = ann.assign_weights(d["annotated"], ann.Constant(np.array([[alpha, 1 - alpha], [0.0, 1.0]])))
        pbp = ann.augmented_policy(ann.average_weights(wd, 2), d["pi_b"])
        assert np.allclose(pbp.probs, [[alpha, 1 - alpha], [1.0, 0.0]])
        assert est.cis_estimate(wd, d["pi_e"], pbp).value == 0.5


def test_naive_weighted_against_loop():
    mdp, pb, pe, b = tree_setup(5, 60)
    q = horizon_q_values(mdp, pe).values
    ad = ann.annotate_from_table(b, q, 0.0, np.full((mdp.num_states, 2), 0.6), 1)
    rep = est.naive_weighted_estimate(ad, pe, pb)
    for i in range(b.n):
        L = int(b.lengths[i])
        s, a, r = b.states[i, :L], b.actions[i, :L], b.rewards[i, :L]
        k = int(ad.available[i].sum())
        w = 1.0 / (1 + k)
        rho = [pe.probs[s[t], a[t]] / pb.probs[s[t], a[t]] for t in range(L)]
        total = (1 - k * w) * np.prod(rho) * r.sum()
        for t in range(L):
            for x in range(2):
                if ad.available[i, t, x]:
                    ratio = np.prod(rho[:t]) * pe.probs[s[t], x] / pb.probs[s[t], x]
                    total += w * ratio * (r[:t].sum() + ad.values[i, t, x])
        assert rep.per_trajectory_estimates[i] == pytest.approx(total, abs=1e-12)


def test_report_serialization():
    mdp, pb, pe, b = tree_setup(6, 20)
    rep = est.pdis_estimate(b, pe, pb)
    doc = json.loads(rep.to_json())
    assert doc["format_version"] == 1 and doc["estimator"] == "pdis"
    assert doc["value"] == rep.value and len(doc["per_trajectory_estimates"]) == 20
    assert "components" not in doc
    assert len(json.loads(rep.to_json(include_per_trajectory=False))) == 8


def test_stable_mean_is_order_independent():
    x = np.array([1e16, 1.0, -1e16, 1.0])
    assert est.stable_mean(x) == est.stable_mean(x[::-1]) == 0.5
