import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.linalg import expm

from filterbench.continuous_filters import (
    ObsIncrementSeries,
    UnnormalizedMass,
    bayes_filter,
    endpoint_likelihood,
    ks_filter,
    ks_step,
    mc_approx_filter,
    sde_chain_approx,
    simulate_observations,
    smooth_alpha,
    sparse_obs_filter,
    zakai_filter,
    zakai_step,
)
from filterbench.errors import InvalidSpecError
from filterbench.hmm_discrete import DiscreteHMM, smooth
from filterbench.markov_core import MarkovSpec, semigroup
from oracles import random_generator, tv

seeds = st.integers(0, 2**32 - 1)
Q2 = np.array([[-1.0, 1.0], [1.0, -1.0]])
H2 = np.array([0.0, 1.0])


def two_state_chain(rate=1.0):
    return MarkovSpec.generator([0.0, 1.0], rate * Q2)


def test_zakai_without_signal_is_forward_equation():
    p = UnnormalizedMass(np.array([0.2, 0.3, 0.5]))
    Q = random_generator(np.random.default_rng(0), 3)
    out = zakai_step(Q, np.zeros(3), 1.0, p, 0.7, 0.01)
    expected = p.mass + Q.T @ p.mass * 0.01
    np.testing.assert_allclose(out.mass * np.exp(out.logscale), expected, atol=1e-15)


def test_zakai_single_state_stays_at_one():
    p = UnnormalizedMass(np.array([1.0]))
    for dy in (0.03, -0.05, 0.01):
        p = zakai_step(np.zeros((1, 1)), [2.0], 0.5, p, dy, 0.01)
        assert p.normalized[0] == 1.0


def test_ks_constant_signal_only_propagates():
    Q = random_generator(np.random.default_rng(1), 3)
    pi = np.array([0.6, 0.3, 0.1])
    out = ks_step(Q, np.full(3, 1.7), 0.4, pi, 2.5, 0.01)
    np.testing.assert_allclose(out, pi + Q.T @ pi * 0.01, atol=1e-15)


@settings(max_examples=30, deadline=None)
@given(seeds)
def test_ks_stays_on_simplex(seed):
    rng = np.random.default_rng(seed)
    Q = random_generator(rng, 3)
    _, obs = simulate_observations(MarkovSpec.generator(range(3), Q), rng.normal(size=3), 0.5, 0.5, 0.001, seed)
    traj = ks_filter(Q, rng.normal(size=3), 0.5, [1 / 3] * 3, obs)
    assert np.all(traj >= 0)
    np.testing.assert_allclose(traj.sum(axis=1), 1.0, atol=1e-12)


def test_step_size_guard():
    with pytest.raises(InvalidSpecError):
        zakai_step(Q2 * 50, H2, 1.0, UnnormalizedMass(np.array([0.5, 0.5])), 0.0, 0.1)


def test_filters_agree_with_vectorized_steps():
    _, obs = simulate_observations(two_state_chain(), H2, 0.5, 0.2, 0.001, seed=3)
    traj, scales, _ = zakai_filter(Q2, H2, 0.5, [0.5, 0.5], obs)
    ks = ks_filter(Q2, H2, 0.5, [0.5, 0.5], obs)
    p, pi = UnnormalizedMass(np.array([0.5, 0.5])), np.array([0.5, 0.5])
    for k, dy in enumerate(obs.dy):
        p = zakai_step(Q2, H2, 0.5, p, dy, obs.dt)
        pi = ks_step(Q2, H2, 0.5, pi, dy, obs.dt)
    np.testing.assert_allclose(p.normalized, traj[-1], atol=1e-13)
    assert p.logscale == pytest.approx(scales[-1], abs=1e-10)
    np.testing.assert_allclose(pi, ks[-1], atol=1e-13)


def test_zakai_and_ks_converge_together_as_dt_shrinks():
    dists = {f: [] for f in (40, 10, 1)}
    for seed in range(5):
        _, fine = simulate_observations(two_state_chain(), H2, 0.5, 1.0, 1e-4, seed=seed)
        for f in dists:
            obs = fine.coarsen(f)
            z, _, _ = zakai_filter(Q2, H2, 0.5, [0.5, 0.5], obs)
            dists[f].append(tv(z, ks_filter(Q2, H2, 0.5, [0.5, 0.5], obs)))
    med = [np.median(dists[f]) for f in (40, 10, 1)]
    assert med[0] > med[1] > med[2]


def test_bayes_filter_is_discrete_hmm_on_grid():
    # the grid-sampled chain with Girsanov weights is a discrete HMM with the same posterior
    _, obs = simulate_observations(two_state_chain(), H2, 0.5, 0.05, 0.001, seed=4)
    pi = bayes_filter(Q2, H2, 0.5, [0.5, 0.5], obs)
    assert np.all(np.isfinite(pi))
    np.testing.assert_allclose(pi.sum(axis=1), 1.0, atol=1e-12)
    flat = bayes_filter(Q2, np.zeros(2), 0.5, [0.9, 0.1], obs)
    K = semigroup(two_state_chain(), obs.dt)
    np.testing.assert_allclose(flat[-1], np.array([0.9, 0.1]) @ np.linalg.matrix_power(K, obs.dy.size), atol=1e-12)


def test_smooth_alpha_terminal_and_flat():
    _, obs = simulate_observations(two_state_chain(), H2, 0.5, 0.5, 0.01, seed=1)
    res = smooth_alpha(Q2, H2, 0.5, obs, 30, [0.5, 0.5])
    np.testing.assert_array_equal(res.alpha[-1], 1.0)
    np.testing.assert_allclose(res.smoothed[-1], res.filtered[-1], atol=1e-15)
    flat = smooth_alpha(Q2, np.zeros(2), 0.5, obs, 30, [0.5, 0.5])
    np.testing.assert_allclose(flat.alpha, 1.0, atol=1e-14)


def test_smooth_alpha_tracks_discrete_smoother():
    dt = 0.01
    _, obs = simulate_observations(two_state_chain(), H2, 0.5, 0.2, dt, seed=2)
    res = smooth_alpha(Q2, H2, 0.5, obs, 20, [0.5, 0.5])
    # discrete HMM with kernel I + Q dt and increment emissions matching the Euler step
    hmm = DiscreteHMM(MarkovSpec.one_step([0.0, 1.0], np.eye(2) + Q2 * dt), H2 * dt, 0.5 * np.sqrt(dt), np.array([0.5, 0.5]))
    ref = smooth(hmm, np.concatenate([[0.0], obs.dy[:20]]))
    assert tv(res.smoothed, ref.posterior) < 0.05


def test_smooth_alpha_rejects_bad_index():
    _, obs = simulate_observations(two_state_chain(), H2, 0.5, 0.1, 0.01, seed=1)
    with pytest.raises(InvalidSpecError):
        smooth_alpha(Q2, H2, 0.5, obs, 11, [0.5, 0.5])


def test_mc_approx_constant_g_is_one():
    _, obs = simulate_observations(two_state_chain(), H2, 0.5, 0.2, 0.01, seed=0)
    est = mc_approx_filter(two_state_chain(), 4, obs, lambda s: np.ones(s.shape), 0, H2, 0.5, copies=500)
    np.testing.assert_array_equal(est, 1.0)


def test_mc_approx_without_information_gives_prior_mean():
    chain = two_state_chain(3.0)
    obs = ObsIncrementSeries(0.01, np.zeros(50))
    n, t = 4, 0.5
    est = mc_approx_filter(chain, n, obs, lambda s: (s == 1).astype(float), 1, H2, 1e6, p0=[1.0, 0.0], copies=20000)
    # law of the jump approximation: Poisson(n t) applications of exp(Q / n)
    K = semigroup(chain, 1.0 / n)
    law = np.array([1.0, 0.0]) @ expm(n * t * (K - np.eye(2)))
    se = np.sqrt(law[1] * law[0] / 20000)
    assert abs(est[-1] - law[1]) < 4 * se


def test_sde_chain_approx_driftless_is_symmetric():
    approx = sde_chain_approx(lambda x: 0.0, lambda x: 1.0, 10, 0.0, 1.0)
    np.testing.assert_allclose(approx.up, 0.5)
    np.testing.assert_allclose(approx.down, 0.5)
    assert approx.spec.d == 11


def test_sde_chain_approx_local_moments():
    n = 20
    drift, vol = (lambda x: 1.0 - 2.0 * x), (lambda x: 1.0 + 0.5 * x)
    approx = sde_chain_approx(drift, vol, n, -1.0, 1.0)
    x = approx.spec.states
    interior = slice(1, -1)
    mean_inc = (approx.up - approx.down) / n
    second = (approx.up + approx.down) / n**2
    a = np.array([drift(v) for v in x])
    s2 = np.array([vol(v) ** 2 for v in x])
    np.testing.assert_allclose(mean_inc[interior], (a * approx.holding_dt)[interior], rtol=1e-12)
    np.testing.assert_allclose(second[interior], (s2 * approx.holding_dt)[interior], rtol=1e-12)


def test_sde_chain_approx_consistency_errors():
    with pytest.raises(InvalidSpecError, match="x="):
        sde_chain_approx(lambda x: 30.0, lambda x: 1.0, 10, 0.0, 1.0)
    with pytest.raises(InvalidSpecError):
        sde_chain_approx(lambda x: 0.0, lambda x: 1.0, 10, 0.0, 0.05)


def test_sparse_single_rectangle():
    chain = two_state_chain()
    el = endpoint_likelihood(chain, 1, H2, 0.4, 0.5)
    for v in range(2):
        np.testing.assert_allclose(el.value[v], np.exp(-((0.4 - H2[v]) ** 2) / (2 * 0.25)), rtol=1e-12)


def test_sparse_constant_signal_is_prior_propagation():
    chain = two_state_chain()
    pi0 = np.array([0.8, 0.2])
    post = sparse_obs_filter(chain, 4, 0.0, 1.3, 0.5, np.full(2, 0.7), pi0)
    np.testing.assert_allclose(post, pi0 @ semigroup(chain, 1.0), atol=1e-12)


def test_sparse_exact_and_bridge_agree():
    chain = MarkovSpec.generator([0, 1, 2], random_generator(np.random.default_rng(2), 3))
    h = np.array([-1.0, 0.0, 1.0])
    exact = endpoint_likelihood(chain, 5, h, 0.3, 0.6, method="exact")
    bridge = endpoint_likelihood(chain, 5, h, 0.3, 0.6, method="bridge", paths=20000, seed=1)
    assert np.all(np.abs(exact.value - bridge.value) <= 3.5 * bridge.stderr + 1e-12)


def test_sparse_rule_validation():
    with pytest.raises(InvalidSpecError):
        endpoint_likelihood(two_state_chain(), 2, H2, 0.1, 0.5, rule="middle")
