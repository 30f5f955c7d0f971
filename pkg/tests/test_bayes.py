import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bayes_deeponet.bayes import (
    EnergySpec,
    VarianceTracker,
    energy,
    energy_grad,
    energy_terms,
    estimator_variance,
    swap_probability,
    update_estimator_variance,
    update_variance,
)
from bayes_deeponet.deeponet import deeponet_forward, deeponet_forward_pass
from bayes_deeponet.errors import ConfigurationError, PreconditionError
from bayes_deeponet.nn_core import finite_diff_grad


def test_energy_spec_validation():
    with pytest.raises(ConfigurationError):
        EnergySpec(noise_sigma=0.0, N=10, n=5)
    with pytest.raises(ConfigurationError):
        EnergySpec(noise_sigma=0.1, N=10, n=11)
    with pytest.raises(ConfigurationError):
        EnergySpec(noise_sigma=0.1, N=10, n=0)
    with pytest.raises(ConfigurationError):
        EnergySpec(noise_sigma=0.1, N=10, n=5, prior="laplace")


def test_likelihood_scale():
    spec = EnergySpec(noise_sigma=0.5, N=100, n=10)
    assert spec.likelihood_scale(10, full=True) == 2.0
    assert spec.likelihood_scale(10) == 20.0


def test_full_energy_against_hand_sum(tiny_model, tiny_dataset):
    spec = EnergySpec(noise_sigma=0.1, N=tiny_dataset.N, n=tiny_dataset.N)
    batch = tiny_dataset.batch()
    expected = 0.0
    for u, y, target in zip(batch.u_disc, batch.y, batch.targets):
        expected += (deeponet_forward(tiny_model, u, y) - target) ** 2 / (2 * 0.01)
    assert energy(tiny_model, batch, spec, full=True) == pytest.approx(expected, rel=1e-12)


def test_minibatch_estimates_average_to_full_energy(tiny_model, tiny_dataset):
    n = 8
    spec = EnergySpec(noise_sigma=0.1, N=tiny_dataset.N, n=n)
    perm = np.random.default_rng(0).permutation(tiny_dataset.N)
    estimates = [energy(tiny_model, tiny_dataset.batch(perm[j : j + n]), spec) for j in range(0, tiny_dataset.N, n)]
    full = energy(tiny_model, tiny_dataset.batch(), spec, full=True)
    assert np.mean(estimates) == pytest.approx(full, rel=1e-12)


def test_full_batch_estimate_equals_energy(tiny_model, tiny_dataset):
    spec = EnergySpec(noise_sigma=0.1, N=tiny_dataset.N, n=tiny_dataset.N)
    batch = tiny_dataset.batch()
    assert energy(tiny_model, batch, spec) == energy(tiny_model, batch, spec, full=True)


def test_empty_batch_rejected(tiny_model, tiny_dataset):
    spec = EnergySpec(noise_sigma=0.1, N=tiny_dataset.N, n=4)
    empty = tiny_dataset.batch(np.array([], dtype=int))
    with pytest.raises(PreconditionError):
        energy(tiny_model, empty, spec)
    with pytest.raises(PreconditionError):
        energy_grad(tiny_model, empty, spec)


@pytest.mark.parametrize("prior", ["none", "gaussian"])
def test_energy_grad_matches_finite_differences(tiny_model, tiny_dataset, prior):
    spec = EnergySpec(noise_sigma=0.5, N=tiny_dataset.N, n=10, prior=prior, prior_sigma=2.0)
    batch = tiny_dataset.batch(np.arange(10))
    theta = tiny_model.params()
    numeric = finite_diff_grad(lambda t: energy(tiny_model.with_params(t), batch, spec), theta)
    analytic = energy_grad(tiny_model, batch, spec)
    assert np.max(np.abs(analytic - numeric)) / np.max(np.abs(numeric)) < 1e-6
    for part in ("branch", "trunk"):
        np.testing.assert_allclose(
            energy_grad(tiny_model, batch, spec, part), analytic[tiny_model.part_slice(part)], rtol=1e-12, atol=1e-14
        )


def test_gaussian_prior_term():
    spec = EnergySpec(noise_sigma=1.0, N=1, n=1, prior="gaussian", prior_sigma=2.0)
    theta = np.array([2.0, 0.0, -2.0])
    assert spec.prior_term(theta) == 1.0
    np.testing.assert_array_equal(spec.prior_grad(theta), [0.5, 0.0, -0.5])
    assert EnergySpec(noise_sigma=1.0, N=1, n=1).prior_grad(theta) is None


def test_swap_probability_examples():
    assert swap_probability(3.0, 3.0, 5.0, 5.0, 1.0, 2.0) == 1.0
    assert swap_probability(2.0, 0.0, 2.0, 0.0, 1.0, 2.0) == pytest.approx(math.e, rel=1e-15)
    assert swap_probability(7.0, 1.0, 4.0, 9.0, 0.3, 0.3) == 1.0
    # (a1σ1 + a2σ2)²·τ_δ = 0.5，指数 = 0.5·(0 − 0.5)
    assert swap_probability(0.0, 0.0, 0.0, 0.0, 1.0, 2.0, sigma1=1.0, sigma2=1.0) == pytest.approx(math.exp(-0.25))


def test_swap_probability_overflow_and_underflow():
    assert swap_probability(1e6, 0.0, 1e6, 0.0, 1e-3, 1.0) == math.inf
    assert swap_probability(0.0, 1e6, 0.0, 1e6, 1e-3, 1.0) == 0.0


def test_swap_probability_weights():
    # a1 = 1 时只看 Û₁
    almost_one = 1.0 - 1e-13
    r = swap_probability(1.0, 0.0, 100.0, 100.0, 1.0, 2.0, a1=almost_one, a2=1.0 - almost_one)
    assert r == pytest.approx(math.exp(0.5), rel=1e-10)


def test_swap_probability_rejects_bad_arguments():
    with pytest.raises(ConfigurationError):
        swap_probability(0, 0, 0, 0, 2.0, 1.0)
    with pytest.raises(ConfigurationError):
        swap_probability(0, 0, 0, 0, 0.0, 1.0)
    with pytest.raises(ConfigurationError):
        swap_probability(0, 0, 0, 0, 1.0, 2.0, a1=0.6, a2=0.6)
    with pytest.raises(ConfigurationError):
        swap_probability(0, 0, 0, 0, 1.0, 2.0, sigma1=-1.0)


@settings(max_examples=100, deadline=None)
@given(
    st.floats(-50, 50),
    st.floats(-50, 50),
    st.floats(0.01, 1.0),
    st.floats(1.0, 10.0),
    st.floats(0.0, 3.0),
)
def test_swap_probability_monotone_in_variance(d1, d2, tau1, tau2, sigma):
    lower = swap_probability(d1, 0.0, d2, 0.0, tau1, tau2, sigma1=sigma, sigma2=sigma)
    higher = swap_probability(d1, 0.0, d2, 0.0, tau1, tau2, sigma1=sigma + 0.5, sigma2=sigma + 0.5)
    assert 0.0 <= higher <= lower


def test_variance_tracker_example():
    tracker = VarianceTracker(decay=0.9)
    tracker = update_variance(tracker, 0.0)
    assert (tracker.ema_mean, tracker.ema_var, tracker.count) == (0.0, 0.0, 1)
    tracker = update_variance(tracker, 1.0)
    assert tracker.ema_mean == pytest.approx(0.1, abs=1e-15)
    assert tracker.ema_var == pytest.approx(0.09, abs=1e-15)
    assert tracker.std == pytest.approx(0.3, abs=1e-15)


def test_variance_tracker_constant_stream():
    tracker = VarianceTracker()
    for _ in range(50):
        tracker = update_variance(tracker, 4.2)
    assert tracker.ema_mean == 4.2 and tracker.ema_var == 0.0


def test_variance_tracker_converges_to_stream_variance():
    rng = np.random.default_rng(0)
    tracker = VarianceTracker(decay=0.999)
    for x in rng.normal(3.0, 2.0, 20_000):
        tracker = update_variance(tracker, x)
    assert tracker.ema_mean == pytest.approx(3.0, abs=0.3)
    assert tracker.std == pytest.approx(2.0, rel=0.15)


def test_variance_tracker_is_immutable():
    tracker = VarianceTracker()
    update_variance(tracker, 1.0)
    assert tracker.count == 0
    with pytest.raises(ConfigurationError):
        update_variance(VarianceTracker(decay=1.0), 1.0)


def test_energy_terms_sum_to_estimate(tiny_model, tiny_dataset):
    spec = EnergySpec(noise_sigma=0.1, N=tiny_dataset.N, n=8)
    batch = tiny_dataset.batch(np.arange(8))
    terms = energy_terms(batch, spec, deeponet_forward_pass(tiny_model, batch))
    assert terms.shape == (8,)
    assert spec.N / 8 * terms.sum() == pytest.approx(energy(tiny_model, batch, spec), rel=1e-12)


def test_estimator_variance_is_unbiased_over_all_batches():
    # 枚举所有无放回批次：估计方差的平均等于 Û 在批次间的真实方差
    terms = np.array([0.3, 2.0, 0.1, 1.4, 0.8, 5.0])
    N, n = terms.size, 2
    batches = [terms[list(idx)] for idx in itertools.combinations(range(N), n)]
    estimates = np.array([N / n * b.sum() for b in batches])
    mean_estimate = np.mean([estimator_variance(b, N) for b in batches])
    assert mean_estimate == pytest.approx(np.var(estimates), rel=1e-12)


def test_estimator_variance_hand_value_and_edges():
    # N²/n · s² · (1 − n/N) = 100/2 · 2 · 0.8
    assert estimator_variance(np.array([1.0, 3.0]), 10) == pytest.approx(80.0, rel=1e-15)
    assert estimator_variance(np.array([1.0, 3.0, 7.0]), 3) == 0.0
    assert estimator_variance(np.array([5.0]), 10) == 0.0
    with pytest.raises(PreconditionError):
        estimator_variance(np.ones(4), 3)


def test_update_estimator_variance_example():
    tracker = update_estimator_variance(VarianceTracker(decay=0.9), 4.0)
    assert (tracker.ema_var, tracker.count) == (4.0, 1)
    tracker = update_estimator_variance(tracker, 2.0)
    assert tracker.ema_var == pytest.approx(3.8, abs=1e-15)
    assert tracker.std == pytest.approx(math.sqrt(3.8), abs=1e-15)
    with pytest.raises(PreconditionError):
        update_estimator_variance(tracker, -1.0)
