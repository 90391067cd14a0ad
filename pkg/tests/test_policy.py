import warnings

import numpy as np
import pytest

from blockdrop.backbone import Architecture
from blockdrop.policy import (
    PolicyNetwork,
    action_probability,
    all_actions,
    log_likelihood,
    make_output,
    map_action,
    sample_action,
)
from blockdrop.tensor import Tensor


def out(s, alpha=0.8):
    return make_output(Tensor(np.asarray(s, dtype=np.float64), requires_grad=True, dtype=np.float64), alpha)


def test_bounded_probabilities_stay_in_range():
    po = out(np.linspace(0, 1, 11)[None], alpha=0.8)
    assert po.bounded.min() >= 0.2 - 1e-12 and po.bounded.max() <= 0.8 + 1e-12
    np.testing.assert_allclose(po.bounded[0, [0, 5, 10]], [0.2, 0.5, 0.8])


def test_map_action_is_strict_threshold_on_unbounded_s():
    po = out([[0.5, 0.51, 0.49, 0.9]], alpha=0.6)
    np.testing.assert_array_equal(map_action(po), [[0, 1, 0, 1]])


def test_log_likelihood_matches_closed_form():
    s = np.array([[0.3, 0.9, 0.6]])
    u = np.array([[1, 0, 1]])
    po = out(s, alpha=0.8)
    sb = 0.8 * s + 0.2 * (1 - s)
    want = np.log(sb[0, 0]) + np.log(1 - sb[0, 1]) + np.log(sb[0, 2])
    assert log_likelihood(po, u).data[0] == pytest.approx(want, abs=1e-12)
    # restricted to the free tail
    tail = log_likelihood(po, u, slice(1, 3)).data[0]
    assert tail == pytest.approx(np.log(1 - sb[0, 1]) + np.log(sb[0, 2]), abs=1e-12)


@pytest.mark.parametrize("K", [2, 5, 8])
def test_probabilities_sum_to_one(K):
    rng = np.random.default_rng(K)
    po = out(rng.random((1, K)), alpha=0.8)
    total = sum(np.exp(log_likelihood(po, a[None]).data[0]) for a in all_actions(K))
    assert abs(total - 1.0) < 1e-9


def test_sample_frequencies_follow_bounded_probabilities():
    po = out(np.array([[0.0, 1.0, 0.5, 0.8]]), alpha=0.8)
    rng = np.random.default_rng(0)
    draws = np.stack([sample_action(po, rng)[0] for _ in range(20000)])
    np.testing.assert_allclose(draws.mean(0), po.bounded[0], atol=0.015)


def test_saturated_unbounded_policy_is_clamped_with_warning():
    po = out([[1.0, 0.0]], alpha=1.0)
    with pytest.warns(RuntimeWarning):
        ll = log_likelihood(po, np.array([[0, 1]]))
    assert np.isfinite(ll.data).all()


def test_no_warning_when_bounded():
    po = out([[1.0, 0.0]], alpha=0.8)
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        log_likelihood(po, np.array([[0, 1]]))


def test_action_probability_oracle_agrees():
    rng = np.random.default_rng(3)
    s = rng.random((1, 4))
    po = out(s)
    acts = all_actions(4)
    p = action_probability(po.bounded[0], acts)
    ll = np.array([log_likelihood(po, a[None]).data[0] for a in acts])
    np.testing.assert_allclose(np.exp(ll), p, rtol=1e-12)


def test_policy_network_outputs_K_probabilities():
    arch = Architecture("mlp", (1, 16, 16), (2,), 32, 15, stem_stride=2)
    pn = PolicyNetwork(arch, np.random.default_rng(0))
    po = pn(Tensor(np.zeros((3, 1, 16, 16), dtype=np.float32)))
    assert po.probs.shape == (3, 15)
    assert ((po.probs > 0) & (po.probs < 1)).all()


def test_alpha_out_of_range():
    arch = Architecture("mlp", (1, 16, 16), (1,), 8, 4)
    with pytest.raises(ValueError):
        PolicyNetwork(arch, np.random.default_rng(0), alpha=0.5)
