import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hmmseq.hmm import (
    FMM,
    HMM,
    StateModel,
    StateModelError,
    conditional_state_prior,
    log_joint_states,
    stationary_distribution,
    update_state_model_params,
)

TRANS_A = np.array([[0.50, 0.50], [0.05, 0.95]])
TRANS_B = np.array([[0.50, 0.25, 0.25], [0.10, 0.80, 0.10], [0.25, 0.25, 0.50]])
WEIGHTS_P = np.array([0.1, 0.9])
WEIGHTS_Q = np.array([0.22, 0.56, 0.22])


def chain_logprob(seq, pi, trans):
    # independent route: plain python loop over the factorization
    p = math.log(pi[seq[0] - 1])
    for a, b in zip(seq[:-1], seq[1:]):
        p += math.log(trans[a - 1][b - 1])
    return p


def test_stationary_two_state_frozen():
    pi = stationary_distribution(TRANS_A)
    np.testing.assert_allclose(pi, [1 / 11, 10 / 11], atol=1e-10)


def test_stationary_three_state_frozen():
    pi = stationary_distribution(TRANS_B)
    np.testing.assert_allclose(pi, [2 / 9, 5 / 9, 2 / 9], atol=1e-10)


def test_stationary_matches_power_method():
    rng = np.random.default_rng(7)
    for _ in range(25):
        m = rng.integers(2, 5)
        trans = rng.gamma(1.0, 1.0, size=(m, m)) + 1e-3
        trans /= trans.sum(axis=1, keepdims=True)
        pi = stationary_distribution(trans)
        limit = np.linalg.matrix_power(trans, 400)[0]
        np.testing.assert_allclose(pi, limit, atol=1e-9)


def test_stationary_rejects_reducible():
    with pytest.raises(StateModelError):
        stationary_distribution(np.eye(2))
    with pytest.raises(StateModelError):
        # periodic two-cycle has no limiting distribution
        stationary_distribution(np.array([[0.0, 1.0], [1.0, 0.0]]))


def test_stationary_rejects_bad_rows():
    with pytest.raises(StateModelError):
        stationary_distribution(np.array([[0.5, 0.4], [0.1, 0.9]]))


def three_state_model():
    return StateModel(HMM, 3, trans=TRANS_B)


def test_conditional_prior_matches_enumeration():
    # every length-5 three-state sequence, every position, against the
    # brute-force ratio of joint chain probabilities
    model = three_state_model()
    pi = np.linalg.matrix_power(TRANS_B, 400)[0]
    for seq in itertools.product((1, 2, 3), repeat=5):
        seq = np.array(seq)
        for i in range(5):
            joint = np.empty(3)
            for t in (1, 2, 3):
                var = seq.copy()
                var[i] = t
                joint[t - 1] = math.exp(chain_logprob(var, pi, TRANS_B))
            want = joint / joint.sum()
            got = conditional_state_prior(seq, i, model)
            np.testing.assert_allclose(got, want, atol=1e-10)


def test_conditional_prior_frozen_interior():
    # both neighbors in the middle state
    model = three_state_model()
    got = conditional_state_prior(np.array([2, 2, 2]), 1, model)
    want = np.array([0.025, 0.64, 0.025]) / 0.69
    np.testing.assert_allclose(got, want, atol=1e-12)


def test_conditional_prior_boundaries():
    model = three_state_model()
    pi = stationary_distribution(TRANS_B)
    seq = np.array([1, 3, 2])

    left = conditional_state_prior(seq, 0, model)
    want = pi * TRANS_B[:, 2]
    np.testing.assert_allclose(left, want / want.sum(), atol=1e-12)

    right = conditional_state_prior(seq, 2, model)
    want = TRANS_B[2, :]
    np.testing.assert_allclose(right, want / want.sum(), atol=1e-12)

    single = conditional_state_prior(np.array([2]), 0, model)
    np.testing.assert_allclose(single, pi, atol=1e-12)


def test_conditional_prior_fmm_is_weights():
    model = StateModel(FMM, 3, weights=WEIGHTS_Q)
    for i in range(4):
        got = conditional_state_prior(np.array([1, 2, 3, 2]), i, model)
        np.testing.assert_allclose(got, WEIGHTS_Q)


def test_conditional_prior_index_bounds():
    model = three_state_model()
    with pytest.raises(IndexError):
        conditional_state_prior(np.array([1, 2]), 2, model)


@given(st.lists(st.integers(1, 3), min_size=1, max_size=12), st.integers(0, 11))
@settings(max_examples=200, deadline=None)
def test_conditional_prior_is_distribution(states, i):
    seq = np.array(states)
    i = i % seq.size
    p = conditional_state_prior(seq, i, three_state_model())
    assert np.all(p >= 0)
    assert abs(p.sum() - 1.0) < 1e-12


def test_log_joint_fmm():
    model = StateModel(FMM, 3, weights=WEIGHTS_Q)
    seq = np.array([1, 2, 2, 3])
    want = sum(math.log(WEIGHTS_Q[t - 1]) for t in seq)
    assert log_joint_states(seq, model) == pytest.approx(want, abs=1e-12)


def test_log_joint_hmm_matches_oracle():
    model = three_state_model()
    pi = stationary_distribution(TRANS_B)
    rng = np.random.default_rng(11)
    for _ in range(20):
        seq = rng.integers(1, 4, size=rng.integers(1, 9))
        want = chain_logprob(seq, pi, TRANS_B)
        assert log_joint_states(seq, model) == pytest.approx(want, abs=1e-10)


def test_log_joint_rejects_bad_states():
    with pytest.raises(StateModelError):
        log_joint_states(np.array([0, 1]), three_state_model())


def test_update_fmm_posterior_mean():
    # Dirichlet(1 + counts) draws should average to the posterior mean
    model = StateModel(FMM, 2, weights=WEIGHTS_P, nu=np.array([1.0, 3.91]))
    seq = np.array([1] * 30 + [2] * 70)
    rng = np.random.default_rng(3)
    draws = np.array(
        [update_state_model_params(seq, model, rng=rng).weights for _ in range(4000)]
    )
    want = np.array([31.0, 71.0]) / 102.0
    np.testing.assert_allclose(draws.mean(axis=0), want, atol=0.01)
    np.testing.assert_allclose(
        update_state_model_params(seq, model, rng=np.random.default_rng(5)).nu,
        model.nu,
    )


def test_update_hmm_posterior_mean():
    model = three_state_model()
    seq = np.array([1, 1, 2, 2, 2, 3, 2, 1])
    # transition counts: 1->1, 1->2, 2->2 twice, 2->3, 3->2, 2->1
    counts = np.array([[1, 1, 0], [1, 2, 1], [0, 1, 0]], dtype=float)
    rng = np.random.default_rng(9)
    draws = np.array(
        [update_state_model_params(seq, model, rng=rng).trans for _ in range(4000)]
    )
    want = (counts + 1.0) / (counts + 1.0).sum(axis=1, keepdims=True)
    np.testing.assert_allclose(draws.mean(axis=0), want, atol=0.02)
    np.testing.assert_allclose(draws[0].sum(axis=1), np.ones(3), atol=1e-12)


def test_update_is_deterministic_under_seed():
    model = three_state_model()
    seq = np.array([1, 2, 2, 3, 2])
    a = update_state_model_params(seq, model, rng=np.random.default_rng(42)).trans
    b = update_state_model_params(seq, model, rng=np.random.default_rng(42)).trans
    np.testing.assert_array_equal(a, b)


def test_state_model_validation():
    with pytest.raises(StateModelError):
        StateModel("markov", 2, trans=TRANS_A)
    with pytest.raises(StateModelError):
        StateModel(HMM, 4, trans=np.eye(4))
    with pytest.raises(StateModelError):
        StateModel(FMM, 2, weights=np.array([0.5, 0.6]))
    with pytest.raises(StateModelError):
        StateModel(HMM, 2, trans=np.array([[0.5, 0.5], [0.2, 0.9]]))
    with pytest.raises(StateModelError):
        StateModel(FMM, 2, weights=WEIGHTS_P, kappa2=np.array([0.1, -0.2]))


def test_stationary_accessor():
    fmm = StateModel(FMM, 3, weights=WEIGHTS_Q)
    np.testing.assert_allclose(fmm.stationary(), WEIGHTS_Q)
    hmm = three_state_model()
    np.testing.assert_allclose(hmm.stationary(), [2 / 9, 5 / 9, 2 / 9], atol=1e-10)
