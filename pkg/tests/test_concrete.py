import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from sfgnet.autograd import Tensor, backward, ops
from sfgnet.autograd.gradcheck import check_gradients
from sfgnet.concrete import (GroupingParams, TempSchedule, entropy, gsm_sample, inverse_softplus,
                             logits_for_probs, probs, sample_gumbel, temperature)

P_INIT = np.array([0.2, 0.6, 0.2])


def trainable(p, k=1):
    return GroupingParams.from_probs(np.tile(p, (k, 1)), trainable=True)


def test_zero_logits_give_uniform():
    gp = GroupingParams(logits=Tensor(np.zeros((4, 3)), requires_grad=True))
    np.testing.assert_allclose(probs(gp).data, 1.0 / 3.0, atol=1e-15)


def test_initial_probabilities_recovered():
    gp = trainable(P_INIT, 5)
    np.testing.assert_allclose(gp.probs_array(), np.tile(P_INIT, (5, 1)), atol=1e-12)


def test_softplus_positivity_with_very_negative_logits():
    gp = GroupingParams(logits=Tensor(np.array([[-50.0, 0.0, 0.0]]), requires_grad=True))
    p = probs(gp).data
    assert p[0, 0] > 0.0
    assert abs(p.sum() - 1.0) < 1e-12


def test_inverse_softplus_roundtrip_wide_range():
    y = np.array([1e-10, 1e-3, 0.5, 1.0, 19.9, 20.1, 50.0])
    np.testing.assert_allclose(np.logaddexp(0.0, inverse_softplus(y)), y, rtol=1e-10)
    with pytest.raises(ValueError):
        inverse_softplus(np.array([0.0]))


def test_fixed_probabilities_must_be_rows_on_simplex():
    with pytest.raises(ValueError):
        GroupingParams(fixed=np.array([[0.5, 0.6, 0.0]]))
    with pytest.raises(ValueError):
        GroupingParams()


@given(st.lists(st.floats(-8, 8), min_size=3, max_size=3), st.floats(0.05, 5.0), st.integers(0, 2**31 - 1))
@settings(max_examples=60, deadline=None)
def test_samples_and_probs_are_normalised(logits, tau, seed):
    gp = GroupingParams(logits=Tensor(np.array([logits]), requires_grad=True))
    z = gsm_sample(gp, tau, np.random.default_rng(seed)).z.data
    assert abs(z.sum() - 1.0) < 1e-9
    assert abs(gp.probs_array().sum() - 1.0) < 1e-9


def test_low_temperature_samples_are_nearly_one_hot():
    gp = trainable(P_INIT, 1000)
    z = gsm_sample(gp, 1e-3, np.random.default_rng(1)).z.data
    assert np.mean(z.max(axis=1) > 0.999) > 0.99


def test_near_one_hot_probs_almost_always_pick_that_group():
    gp = trainable(np.array([1e-6, 1 - 2e-6, 1e-6]), 5000)
    z = gsm_sample(gp, 0.5, np.random.default_rng(2)).z.data
    assert np.mean(z.argmax(axis=1) == 1) >= 0.999


def test_argmax_distribution_matches_categorical():
    n = 100_000
    gp = trainable(P_INIT, n)
    z = gsm_sample(gp, 1e-3, np.random.default_rng(3)).z.data
    counts = np.bincount(z.argmax(axis=1), minlength=3)
    np.testing.assert_allclose(counts / n, P_INIT, atol=0.01)
    assert stats.chisquare(counts, P_INIT * n).pvalue > 0.01


def test_hard_mode_is_one_hot_with_soft_gradient():
    gp = trainable(P_INIT, 6)
    g = sample_gumbel(np.random.default_rng(4), (6, 3))
    hard = gsm_sample(gp, 0.7, hard=True, gumbel=g)
    soft = gsm_sample(gp, 0.7, hard=False, gumbel=g)
    assert set(np.unique(hard.z.data)) <= {0.0, 1.0}
    np.testing.assert_array_equal(hard.z.data.argmax(1), soft.z.data.argmax(1))
    w = np.random.default_rng(5).normal(size=(6, 3))
    backward(ops.sum(hard.z * Tensor(w)))
    g_hard = gp.logits.grad.copy()
    gp.logits.zero_grad()
    soft = gsm_sample(gp, 0.7, hard=False, gumbel=g)
    backward(ops.sum(soft.z * Tensor(w)))
    np.testing.assert_allclose(g_hard, gp.logits.grad, atol=1e-14)


def test_sample_gradient_matches_finite_differences_with_replayed_noise():
    gp = trainable(P_INIT, 4)
    gp.logits.data = gp.logits.data + np.random.default_rng(6).normal(0, 0.3, size=(4, 3))
    g = sample_gumbel(np.random.default_rng(7), (4, 3))
    w = Tensor(np.random.default_rng(8).normal(size=(4, 3)))

    def f():
        return ops.sum(gsm_sample(gp, 0.8, gumbel=g).z * w)

    assert max(check_gradients(f, [gp.logits])) < 1e-4
    backward(f())
    assert np.abs(gp.logits.grad).max() > 0


def test_frozen_sampling_respects_hard_zeros():
    gp = GroupingParams(fixed=np.array([[1.0, 0.0, 0.0], [0.0, 0.0, 1.0]]))
    z = gsm_sample(gp, 0.5, np.random.default_rng(9)).z
    np.testing.assert_array_equal(z.data, [[1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])
    assert not z.requires_grad


def test_gsm_requires_positive_tau_and_noise_source():
    gp = trainable(P_INIT)
    with pytest.raises(ValueError):
        gsm_sample(gp, 0.0, np.random.default_rng(0))
    with pytest.raises(ValueError):
        gsm_sample(gp, 1.0)


def test_gumbel_noise_is_finite_at_clamped_extremes():
    g = sample_gumbel(np.random.default_rng(10), (100_000,))
    assert np.all(np.isfinite(g))


def test_temperature_schedule_values():
    s = TempSchedule(1e-5)
    assert temperature(s, 0) == 1.0
    assert temperature(s, 50_000) == pytest.approx(0.60653066, abs=1e-8)
    floor_step = math.ceil(math.log(10.0) * 1e5)
    assert floor_step == 230259
    assert temperature(s, floor_step) == 0.10
    assert temperature(s, floor_step - 1) > 0.10
    assert temperature(s, 10**7) == 0.10
    with pytest.raises(ValueError):
        temperature(s, -1)


@given(st.integers(0, 10**6))
def test_temperature_is_monotone(t):
    s = TempSchedule(1e-5)
    assert temperature(s, t + 1) <= temperature(s, t)
    assert temperature(s, t) == max(0.10, math.exp(-1e-5 * t))


@pytest.mark.parametrize("p, expected", [
    ([1 / 3, 1 / 3, 1 / 3], math.log(3.0)),
    ([0.2, 0.6, 0.2], -(0.4 * math.log(0.2) + 0.6 * math.log(0.6))),
])
def test_entropy_values(p, expected):
    assert entropy(trainable(np.array(p))).item() == pytest.approx(expected, abs=1e-10)
    assert entropy(GroupingParams(fixed=np.array([p]))).item() == pytest.approx(expected, abs=1e-12)


def test_entropy_of_one_hot_is_zero():
    assert entropy(GroupingParams(fixed=np.array([[0.0, 1.0, 0.0]]))).item() == 0.0
    # trainable logits approach one-hot only in the limit
    assert entropy(trainable(np.array([0.0, 1.0, 0.0]))).item() < 1e-9


def test_logits_for_probs_floors_zeros():
    lg = logits_for_probs(np.array([[0.0, 1.0, 0.0]]))
    assert np.all(np.isfinite(lg))
