import json

import numpy as np
import pytest

from mmsa.envsuite import random_tabular
from mmsa.verify import (
    FAULTS,
    EvidenceSizeError,
    MarkovPosterior,
    decoupling_report,
    elbo_estimate,
    evidence_check,
    exact_evidence,
    exact_posterior,
    naive_evidence,
    random_posterior,
    run_verification_suite,
)


def _case(seed, **kw):
    rng = np.random.default_rng(seed)
    model = random_tabular(rng, **kw)
    acts, obs = model.sample_record(rng)
    return model, acts, obs, rng


@pytest.mark.parametrize("seed", range(5))
def test_forward_algorithm_matches_path_enumeration(seed):
    model, acts, obs, _ = _case(seed, n_states=4, horizon=4)
    assert abs(exact_evidence(model, acts, obs) - naive_evidence(model, acts, obs)) < 1e-12


def test_evidence_of_a_hand_computed_model():
    from mmsa.envsuite import TabularDecPomdp

    # one agent, one action, two states that never move, perfectly observed
    model = TabularDecPomdp(init=[0.25, 0.75], T=np.eye(2)[:, None, :], O=np.eye(2)[:, None, :], R=np.zeros((2, 1)),
                            policy=np.ones((1, 3, 1)), horizon=2)
    acts = np.zeros((3, 1), dtype=int)
    assert np.isclose(exact_evidence(model, acts, np.array([[1], [1]])), np.log(0.75))
    assert exact_evidence(model, acts, np.array([[0], [1]])) == -np.inf


def test_oversized_enumeration_is_refused():
    model, acts, obs, _ = _case(0, n_states=17, horizon=2)
    with pytest.raises(EvidenceSizeError):
        exact_evidence(model, acts, obs)
    model, acts, obs, _ = _case(0, n_states=12, horizon=6)
    with pytest.raises(EvidenceSizeError):
        naive_evidence(model, acts, obs)


def test_random_posterior_gives_a_lower_bound():
    for seed in range(10):
        model, acts, obs, rng = _case(seed, n_states=5, horizon=5)
        r = evidence_check(model, random_posterior(rng, 5, len(obs)), acts, obs, 4000, rng)
        assert r.within_bound()
        assert r.elbo_estimate < r.log_evidence


def test_exact_posterior_is_tight():
    model, acts, obs, rng = _case(11, n_states=6, horizon=5)
    q = exact_posterior(model, acts, obs)
    r = evidence_check(model, q, acts, obs, 2000, rng)
    assert abs(r.gap) <= 1e-9 + 3 * r.mc_sigma
    assert r.mc_sigma < 1e-8


def test_posterior_samples_match_log_prob():
    rng = np.random.default_rng(0)
    q = random_posterior(rng, 3, 2)
    paths = q.sample(rng, 20000)
    # empirical frequency of one path against its probability
    target = paths[0]
    freq = np.mean(np.all(paths == target, axis=1))
    assert np.isclose(freq, np.exp(q.log_prob(target[None])[0]), atol=0.02)


def test_elbo_estimate_reports_sigma():
    model, acts, obs, rng = _case(3, horizon=3)
    est, sigma = elbo_estimate(model, random_posterior(rng, model.n_states, len(obs)), acts, obs, 500, rng,
                               return_sigma=True)
    assert np.isfinite(est) and sigma > 0


def test_decoupling_report_is_exactly_zero():
    assert all(v == 0.0 for v in decoupling_report(seed=0).values())
    bad = decoupling_report(seed=0, inject="sale.no_stop_gradient")
    assert bad["next_state_input"] > 0


@pytest.mark.parametrize("fault,check", [("mixer.sign_flip", "mixer"), ("sale.no_stop_gradient", "sale.decoupling")])
def test_injected_faults_are_caught(fault, check):
    report = run_verification_suite(seed=0, only=check, inject=fault, quick=True)
    assert not report["passed"]
    assert set(FAULTS) >= {fault}


def test_suite_report_is_json_and_green():
    report = run_verification_suite(seed=1, quick=True)
    assert report["passed"], report["failed"]
    json.dumps(report)
    assert {c["name"] for c in report["checks"]} >= {"mixer.igm", "verify.elbo_bound", "tensorcore.gradients"}


def test_unknown_filters_and_faults():
    with pytest.raises(ValueError):
        run_verification_suite(only="nothing")
    with pytest.raises(ValueError):
        run_verification_suite(inject="gremlins")
