import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from filterbench.errors import InvalidSpecError
from filterbench.hmm_discrete import DiscreteHMM, forward_filter, simulate_hmm
from filterbench.markov_core import MarkovSpec, invariant_distribution
from filterbench.stability import (
    CYCLIC_H,
    FilterCocycle,
    batch_means,
    cocycle_from_hmm,
    counterexample_run,
    empirical_exponent,
    ergodic_average,
    exponent_bounds,
    initial_weights,
    log_norm_trace,
    lyapunov_spectrum,
    pair_log_distance,
    propagate_unnormalized,
    wedge_norm,
)
from oracles import random_hmm, random_stochastic, tv

seeds = st.integers(0, 2**32 - 1)
LAM = np.array([[0.8, 0.2], [0.3, 0.7]])


def two_state(gamma=0.7, lam=LAM):
    return DiscreteHMM(MarkovSpec.one_step([0.0, 1.0], lam), np.array([0.0, 1.0]), gamma, np.array([0.5, 0.5]))


def test_diagonal_cocycle_exponents():
    c = FilterCocycle.constant(np.diag([2.0, 1.0]), 2000)
    with pytest.warns(RuntimeWarning):
        est = lyapunov_spectrum(c)
    assert est.v1 == pytest.approx(np.log(2), abs=1e-10)
    assert est.v2 == pytest.approx(0.0, abs=1e-10)


def test_spectrum_needs_two_states():
    with pytest.raises(InvalidSpecError):
        lyapunov_spectrum(FilterCocycle.constant([[1.0]], 10))


@settings(max_examples=100, deadline=None)
@given(seeds, st.integers(2, 6))
def test_wedge_identity(seed, d):
    rng = np.random.default_rng(seed)
    a, b = rng.normal(size=d), rng.normal(size=d)
    # the area is the product of the norms of a and of b's component orthogonal to a
    perp = b - (a @ b) / (a @ a) * a
    assert wedge_norm(a, b) == pytest.approx(np.linalg.norm(a) * np.linalg.norm(perp), rel=1e-9, abs=1e-12)
    assert wedge_norm(a, b) ** 2 == pytest.approx((a @ a) * (b @ b) - (a @ b) ** 2, rel=1e-9, abs=1e-12)
    assert wedge_norm(a, 2.5 * a) == pytest.approx(0.0, abs=1e-6 * (a @ a))


def test_no_observations_gives_prediction():
    c = FilterCocycle.constant(LAM.T, 7)
    nu = np.array([0.9, 0.1])
    direction, _ = propagate_unnormalized(c, nu)
    pred = nu @ np.linalg.matrix_power(LAM, 7)
    np.testing.assert_allclose(direction / direction.sum(), pred, atol=1e-14)


@pytest.mark.parametrize("seed", range(5))
def test_propagation_matches_forward_filter(seed):
    hmm = random_hmm(np.random.default_rng(seed), 3)
    _, obs = simulate_hmm(hmm, 60, seed=seed)
    c = cocycle_from_hmm(hmm, obs)
    nu = initial_weights(hmm, obs[0], hmm.p0)
    pi = forward_filter(hmm, obs).pi
    for n in (1, 10, 59):
        direction, _ = propagate_unnormalized(c, nu, n)
        assert abs(np.linalg.norm(direction) - 1) < 1e-14
        assert tv(direction / direction.sum(), pi[n]) < 1e-10


def test_log_norm_matches_likelihood():
    # the l1 norm of the unnormalized filter is the data likelihood
    hmm = random_hmm(np.random.default_rng(4), 3)
    _, obs = simulate_hmm(hmm, 30, seed=4)
    c = cocycle_from_hmm(hmm, obs)
    logpsi0 = hmm.log_emission(obs[:1])[0]
    direction, lognorm = propagate_unnormalized(c, initial_weights(hmm, obs[0], hmm.p0))
    total = lognorm + np.log(direction.sum()) + logpsi0.max()
    assert total == pytest.approx(forward_filter(hmm, obs).loglik, abs=1e-9)
    trace = log_norm_trace(c, initial_weights(hmm, obs[0], hmm.p0))
    assert trace[-1] == pytest.approx(lognorm, abs=1e-9)


def test_long_run_without_underflow():
    hmm = two_state(gamma=0.05)
    _, obs = simulate_hmm(hmm, 10_001, seed=1)
    c = cocycle_from_hmm(hmm, obs)
    direction, lognorm = propagate_unnormalized(c, initial_weights(hmm, obs[0], hmm.p0))
    assert np.isfinite(lognorm)
    assert np.all(np.isfinite(direction)) and abs(np.linalg.norm(direction) - 1) < 1e-12


def test_equal_priors_collapse():
    est = empirical_exponent(two_state(), [0.3, 0.7], [0.3, 0.7], 500, seed=0)
    assert est.collapsed
    assert est.exponent == -np.inf
    assert np.all(est.log_distance == -np.inf)


def test_pair_distance_matches_direct_filters_early_on():
    hmm = two_state()
    _, obs = simulate_hmm(hmm, 40, seed=2)
    c = cocycle_from_hmm(hmm, obs)
    nu, nu_t = np.array([0.9, 0.1]), np.array([0.2, 0.8])
    logd = pair_log_distance(c, initial_weights(hmm, obs[0], nu), initial_weights(hmm, obs[0], nu_t))
    a = forward_filter(DiscreteHMM(hmm.chain, hmm.h, hmm.gamma, nu), obs).pi
    b = forward_filter(DiscreteHMM(hmm.chain, hmm.h, hmm.gamma, nu_t), obs).pi
    with np.errstate(divide="ignore"):
        direct = np.log(np.linalg.norm(a - b, axis=1))
    ok = direct > -25
    np.testing.assert_allclose(logd[ok], direct[ok], atol=1e-6)


def test_exponent_respects_coupling_bound_and_gap():
    hmm = two_state()
    est = empirical_exponent(hmm, [1.0, 0.0], [0.0, 1.0], 20_000, seed=3)
    bound = exponent_bounds(LAM, hmm.h, invariant_distribution(hmm.chain)).coupling_bound
    assert est.exponent <= bound + 0.05
    assert est.gap + 3 * est.gap_se < 0
    assert est.agrees_with_gap


def test_spectral_gap_negative_on_random_positive_chains():
    for seed in range(3):
        rng = np.random.default_rng(seed)
        hmm = random_hmm(rng, 3)
        _, obs = simulate_hmm(hmm, 5001, seed=seed)
        est = lyapunov_spectrum(cocycle_from_hmm(hmm, obs), seed=seed)
        assert est.gap + 3 * est.gap_se < 0


def test_bounds_examples():
    b = exponent_bounds([[0.5, 0.5], [0.5, 0.5]], [0.0, 1.0], [0.5, 0.5])
    assert b.coupling_bound == pytest.approx(-1.0, abs=1e-15)
    flat = exponent_bounds(LAM, [2.0, 2.0], [0.6, 0.4])
    assert flat.low_noise_upper == 0.0 and flat.low_noise_lower == 0.0
    assert b.at_noise(0.5) == (b.low_noise_upper / 0.25, b.low_noise_lower / 0.25)


def test_low_noise_lower_below_upper():
    rng = np.random.default_rng(0)
    for _ in range(100):
        d = int(rng.integers(2, 6))
        lam = random_stochastic(rng, d, floor=0.01)
        mu = invariant_distribution(MarkovSpec.one_step(range(d), lam))
        b = exponent_bounds(lam, rng.normal(size=d), mu)
        assert b.low_noise_lower <= b.low_noise_upper <= 0
        assert b.coupling_bound <= 0


def test_counterexample_equal_priors():
    res = counterexample_run(500, seed=0, split=0.5)
    np.testing.assert_array_equal(res.distance, 0.0)


def test_counterexample_keeps_prior_ratio():
    res = counterexample_run(2000, seed=1, split=0.8)
    # two states carry mass at every step and their weights never change
    for pi in res.pi_tilde[::50]:
        np.testing.assert_allclose(np.sort(pi[pi > 0]), [0.2, 0.8], atol=1e-12)
    np.testing.assert_array_equal(CYCLIC_H[res.pi.argmax(axis=1)], res.observations)


def test_counterexample_never_forgets():
    res = counterexample_run(10_000, seed=2)
    tail = res.distance[5000:]
    assert tail.min() > 0.01
    assert not res.log_slope + 3 * res.log_slope_se < 0


def test_counterexample_rejects_large_step():
    with pytest.raises(InvalidSpecError):
        counterexample_run(10, seed=0, dt=1.5)


def test_ergodic_average_constant():
    np.testing.assert_array_equal(ergodic_average(two_state(), lambda x, pi: 1.0, 200, seed=0), 1.0)


def state_average(seed, n=20_000):
    hmm = two_state()
    avg = ergodic_average(hmm, lambda x, pi: x, n, seed=seed)
    idx, _ = simulate_hmm(hmm, n, seed)
    _, se = batch_means(hmm.chain.states[idx])
    return avg, se


def test_ergodic_average_law_of_large_numbers():
    avg, se = state_average(5)
    mu = invariant_distribution(two_state().chain)
    assert abs(avg[-1] - mu @ np.array([0.0, 1.0])) < 3 * se
    late = avg[-len(avg) // 4 :]
    assert late.max() - late.min() < 0.05


def test_ergodic_average_agrees_across_seeds():
    a, se_a = state_average(6)
    b, se_b = state_average(7)
    assert abs(a[-1] - b[-1]) < 3 * np.hypot(se_a, se_b)


def test_batch_means_of_iid_noise():
    x = np.random.default_rng(0).normal(size=20_000)
    mean, se = batch_means(x)
    assert se == pytest.approx(1 / np.sqrt(x.size), rel=0.5)
    assert abs(mean) < 4 * se
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        batch_means(np.arange(5.0))


def test_gap_stays_finite_at_low_noise():
    # one step shrinks the area by about exp(-5); the squared form rounds it to zero
    est = empirical_exponent(two_state(gamma=0.3), [1.0, 0.0], [0.0, 1.0], 5000, seed=0)
    assert np.isfinite(est.gap) and np.isfinite(est.gap_se)
    assert est.agrees_with_gap
