import numpy as np
import pytest
from scipy import integrate, stats

from filterbench.errors import DataError, InvalidSpecError
from filterbench.heston_sv import (
    HestonParams,
    OptionCurve,
    VarianceGrid,
    cir_density,
    expected_rv_and_premium,
    geometric_grid,
    predicted_rv,
    realized_variance,
    regime_filter,
    return_log_likelihood,
    simulate_heston,
    simulate_regime_rv,
    stationary_grid,
    sv_filter,
    sv_filter_step,
    vix_replication,
)
from filterbench.markov_core import MarkovSpec

BASE = HestonParams(mu=0.05, kappa=2.0, xbar=0.04, gamma=0.3, rho=-0.5)


def black_scholes_curves(forward, sigma, r, T, lo=0.2, hi=5.0, count=2000):
    strikes = np.linspace(lo * forward, hi * forward, count)
    sd = sigma * np.sqrt(T)
    d1 = (np.log(forward / strikes) + 0.5 * sd**2) / sd
    d2 = d1 - sd
    disc = np.exp(-r * T)
    calls = disc * (forward * stats.norm.cdf(d1) - strikes * stats.norm.cdf(d2))
    puts = disc * (strikes * stats.norm.cdf(-d2) - forward * stats.norm.cdf(-d1))
    # clip tiny negative rounding so the curves stay valid prices
    return OptionCurve(strikes, np.maximum(puts, 0.0), "put"), OptionCurve(strikes, np.maximum(calls, 0.0), "call")


def test_params_validation_and_feller():
    with pytest.raises(InvalidSpecError):
        HestonParams(0.0, -1.0, 0.04, 0.3, 0.0)
    with pytest.raises(InvalidSpecError):
        HestonParams(0.0, 1.0, 0.04, 0.3, 1.5)
    assert BASE.feller
    rough = HestonParams(0.0, 1.0, 0.04, 0.5, 0.0)
    assert not rough.feller
    with pytest.raises(InvalidSpecError, match="Feller"):
        simulate_heston(rough, 0.01, 10, seed=0)
    with pytest.raises(InvalidSpecError):
        simulate_heston(BASE, 1.0, 10, seed=0)


def test_noiseless_limit_is_deterministic_reversion():
    p = HestonParams(0.0, 2.0, 0.04, 1e-9, 0.0)
    dt = 0.01
    x, _ = simulate_heston(p, dt, 300, seed=1, x0=0.2)
    expected = [0.2]
    for _ in range(300):
        expected.append(expected[-1] + p.kappa * (p.xbar - expected[-1]) * dt)
    np.testing.assert_allclose(x, expected, rtol=1e-7)


def test_simulated_mean_matches_formula():
    dt, n, paths = 1 / 252, 252, 1000
    x, _ = simulate_heston(BASE, dt, n, seed=3, x0=0.1, paths=paths)
    t = dt * np.arange(n + 1)
    exact = BASE.mean_variance(0.1, t)
    se = x.std(axis=0, ddof=1) / np.sqrt(paths)
    checkpoints = [63, 126, 252]
    assert np.all(np.abs(x.mean(axis=0)[checkpoints] - exact[checkpoints]) < 3 * se[checkpoints])


def test_single_and_batched_path_shapes():
    x, _ = simulate_heston(BASE, 1 / 252, 50, seed=5)
    assert x.shape == (51,)
    xs, ys = simulate_heston(BASE, 1 / 252, 50, seed=5, paths=4)
    assert xs.shape == ys.shape == (4, 51)
    assert np.all(xs > 0)


def test_positivity_long_path():
    x, y = simulate_heston(BASE, 1 / 252, 100_000, seed=7)
    assert x.min() > 0
    assert np.all(np.isfinite(y))


def test_cir_density_matches_noncentral_chi_square():
    dt, v = 0.1, 0.05
    x = np.linspace(0.001, 0.2, 50)
    c = 2 * BASE.kappa / (BASE.gamma**2 * (1 - np.exp(-BASE.kappa * dt)))
    df = 4 * BASE.kappa * BASE.xbar / BASE.gamma**2
    nc = 2 * c * v * np.exp(-BASE.kappa * dt)
    np.testing.assert_allclose(cir_density(BASE, v, x, dt), 2 * c * stats.ncx2.pdf(2 * c * x, df, nc), rtol=1e-9)


@pytest.mark.parametrize("v,dt", [(0.04, 1 / 252), (0.01, 0.1), (0.2, 1.0), (0.0, 0.5)])
def test_cir_density_normalization_and_mean(v, dt):
    def dens(x):
        return float(cir_density(BASE, v, x, dt))

    mass = integrate.quad(dens, 0, np.inf, points=None, limit=500, epsabs=1e-12)[0]
    mean = integrate.quad(lambda x: x * dens(x), 0, np.inf, limit=500, epsabs=1e-12)[0]
    assert mass == pytest.approx(1.0, abs=1e-6)
    assert mean == pytest.approx(v * np.exp(-BASE.kappa * dt) + BASE.xbar * (1 - np.exp(-BASE.kappa * dt)), abs=1e-6)


def test_cir_density_large_time_is_stationary_gamma():
    x = np.linspace(1e-6, 0.5, 200_001)
    dens = cir_density(BASE, 0.15, x, 20.0)
    cdf = integrate.cumulative_trapezoid(dens, x, initial=0.0)
    target = stats.gamma.cdf(x, BASE.stationary_shape, scale=1 / BASE.stationary_rate)
    assert np.max(np.abs(cdf - target)) < 0.01


def test_cir_density_far_tail_is_finite():
    out = cir_density(HestonParams(0.0, 50.0, 0.04, 0.05, 0.0), 0.5, np.array([0.45, 1e-4]), 1e-4)
    assert np.all(np.isfinite(out)) and np.all(out >= 0)


def test_return_likelihood_without_correlation_is_plain_gaussian():
    p = HestonParams(0.05, 2.0, 0.04, 0.3, 0.0)
    nodes = geometric_grid(p, 20)
    dt, dY = 1 / 252, 0.013
    ll = return_log_likelihood(p, nodes, dY, dt)
    v = nodes
    plain = -0.5 * np.log(v * dt) - (dY - (p.mu - 0.5 * v) * dt) ** 2 / (2 * v * dt)
    np.testing.assert_allclose(ll, np.broadcast_to(plain, ll.shape), rtol=1e-12)


def test_large_return_raises_posterior_mean():
    grid = stationary_grid(BASE)
    calm = sv_filter_step(BASE, grid, 0.0, 1 / 252)
    wild = sv_filter_step(BASE, grid, 0.05, 1 / 252)
    assert wild.mean > grid.mean > calm.mean
    np.testing.assert_allclose(wild.mass.sum(), 1.0, atol=1e-12)


def test_filter_stable_under_grid_refinement():
    _, y = simulate_heston(BASE, 1 / 252, 100, seed=2)
    coarse = sv_filter(BASE, y, 1 / 252, stationary_grid(BASE, 200))
    fine = sv_filter(BASE, y, 1 / 252, stationary_grid(BASE, 400))
    assert np.max(np.abs(coarse - fine) / fine) < 0.01


def test_filter_beats_prior_predictor():
    dt = 1 / 252
    gains = []
    for seed in range(5):
        x, y = simulate_heston(BASE, dt, 250, seed=seed)
        est = sv_filter(BASE, y, dt)
        prior = np.full_like(x, BASE.xbar)
        gains.append(np.sqrt(np.mean((prior - x) ** 2)) - np.sqrt(np.mean((est - x) ** 2)))
    assert np.median(gains) > 0


def test_variance_grid_validation():
    with pytest.raises(InvalidSpecError):
        VarianceGrid(np.array([0.1, 0.05]), np.array([0.5, 0.5]))


def test_realized_variance_examples():
    assert realized_variance(np.full(10, 3.0), 1.0) == 0.0
    rng = np.random.default_rng(0)
    n, gamma = 10_000, 0.3
    w = np.concatenate([[0.0], np.cumsum(rng.normal(scale=np.sqrt(1 / n), size=n))])
    assert realized_variance(gamma * w, 1.0) == pytest.approx(gamma**2, rel=0.05)
    with pytest.raises(DataError):
        realized_variance([1.0], 1.0)


def test_realized_variance_tracks_integrated_variance():
    dt, n = 1 / 2520, 2520
    x, y = simulate_heston(BASE, dt, n, seed=4)
    integrated = np.sum(x[:-1]) * dt / (n * dt)
    assert realized_variance(y, n * dt) == pytest.approx(integrated, rel=0.1)


def test_expected_rv_limits():
    erv, _ = expected_rv_and_premium(BASE, 0.09, 1e-9, 0.0)
    assert erv == pytest.approx(0.09, rel=1e-8)
    erv, _ = expected_rv_and_premium(BASE, 0.09, 1e6, 0.0)
    assert erv == pytest.approx(BASE.xbar, rel=1e-5)
    erv, prem = expected_rv_and_premium(BASE, 0.09, 0.5, 0.0)
    assert expected_rv_and_premium(BASE, 0.09, 0.5, erv)[1] == 0.0
    assert prem == -erv


def test_expected_rv_matches_quadrature():
    T = 0.75
    erv, _ = expected_rv_and_premium(BASE, 0.09, T, 0.0)
    integral = integrate.quad(lambda t: BASE.mean_variance(0.09, t), 0, T, epsabs=1e-14, epsrel=1e-14)[0]
    assert erv == pytest.approx(integral / T, abs=1e-10)


def test_vix_zero_prices():
    k = np.linspace(50, 150, 21)
    assert vix_replication(OptionCurve(k, np.zeros(21), "put"), OptionCurve(k, np.zeros(21), "call"), 100.0, 0.01, 0.25) == 0.0


def test_vix_black_scholes_oracle_and_refinement():
    puts, calls = black_scholes_curves(100.0, 0.2, 0.01, 0.25)
    v = vix_replication(puts, calls, 100.0, 0.01, 0.25)
    assert v == pytest.approx(0.04, rel=0.01)
    fine_p, fine_c = black_scholes_curves(100.0, 0.2, 0.01, 0.25, count=3999)
    assert abs(vix_replication(fine_p, fine_c, 100.0, 0.01, 0.25) / v - 1) < 0.002


def test_vix_currency_invariance():
    puts, calls = black_scholes_curves(100.0, 0.25, 0.02, 0.5, count=500)
    v = vix_replication(puts, calls, 100.0, 0.02, 0.5)
    scale = 7.3
    scaled = vix_replication(
        OptionCurve(puts.strikes * scale, puts.prices * scale, "put"),
        OptionCurve(calls.strikes * scale, calls.prices * scale, "call"),
        100.0 * scale,
        0.02,
        0.5,
    )
    assert scaled == pytest.approx(v, rel=1e-12)


def test_vix_coverage_and_curve_checks():
    k = np.array([110.0, 120.0])
    with pytest.raises(DataError):
        vix_replication(OptionCurve(k, [1.0, 2.0], "put"), OptionCurve(k, [2.0, 1.0], "call"), 100.0, 0.0, 1.0)
    with pytest.warns(RuntimeWarning, match="monotone"):
        OptionCurve(k, [2.0, 1.0], "put")
    with pytest.raises(DataError):
        OptionCurve(k, [-1.0, 1.0], "put")


def test_regime_filter_single_regime():
    regimes = MarkovSpec.generator([0.04], [[0.0]])
    z = np.random.default_rng(0).normal(0.04, 0.01, 20)
    res = regime_filter(regimes, z, 1 / 52)
    np.testing.assert_array_equal(res.posterior, 1.0)
    np.testing.assert_allclose(res.rv_prediction, 0.04, rtol=1e-12)


def test_frozen_regime_prediction_is_its_level():
    regimes = MarkovSpec.generator([0.02, 0.18], np.zeros((2, 2)))
    assert predicted_rv(regimes, [0.0, 1.0], 0.5) == pytest.approx(0.18, rel=1e-14)


def test_regime_filter_classifies_separated_levels():
    regimes = MarkovSpec.generator([0.02, 0.18], [[-2.0, 2.0], [2.0, -2.0]])
    p = HestonParams(0.0, 100.0, 0.02, 1.0, -0.5)
    accuracy = []
    for seed in range(5):
        idx, z = simulate_regime_rv(regimes, p, 156, 1 / 52, 100, seed=seed)
        res = regime_filter(regimes, z, 1 / 52)
        accuracy.append(np.mean(res.posterior.argmax(axis=1) == idx))
        np.testing.assert_allclose(res.posterior.sum(axis=1), 1.0, atol=1e-12)
    assert np.median(accuracy) > 0.9
