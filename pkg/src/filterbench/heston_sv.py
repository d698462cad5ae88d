"""Heston stochastic volatility: simulation, CIR transition density, a grid
filter for the latent variance, realized variance, VIX replication and a
regime filter for the long-run variance level.

Variance ``X`` follows ``dX = kappa (xbar - X) dt + gamma sqrt(X) dB`` and
the log price ``Y`` follows ``dY = (mu - X/2) dt + sqrt(X) (rho dB + sqrt(1 - rho^2) dW)``.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np
from scipy.linalg import expm
from scipy.special import gammaln, ive

from .errors import DataError, InvalidSpecError, NumericalError
from .markov_core import GENERATOR, MarkovSpec, as_distribution, semigroup


@dataclass(frozen=True)
class HestonParams:
    mu: float
    kappa: float
    xbar: float
    gamma: float
    rho: float

    def __post_init__(self):
        if not (self.kappa > 0 and self.xbar > 0 and self.gamma > 0):
            raise InvalidSpecError("kappa, xbar and gamma must be positive")
        if not -1.0 <= self.rho <= 1.0:
            raise InvalidSpecError("rho must lie in [-1, 1]")

    @property
    def feller(self) -> bool:
        return self.gamma**2 <= 2.0 * self.kappa * self.xbar

    @property
    def stationary_shape(self) -> float:
        return 2.0 * self.kappa * self.xbar / self.gamma**2

    @property
    def stationary_rate(self) -> float:
        return 2.0 * self.kappa / self.gamma**2

    def mean_variance(self, x0_mean: float, t) -> np.ndarray:
        """``E X_t`` started from mean ``x0_mean``."""
        decay = np.exp(-self.kappa * np.asarray(t, dtype=float))
        return x0_mean * decay + self.xbar * (1.0 - decay)


def _check_scheme(p: HestonParams, dt: float):
    if not p.feller:
        raise InvalidSpecError("Feller condition gamma^2 <= 2 kappa xbar fails")
    if not 0 < dt <= 1.0 / p.kappa:
        raise InvalidSpecError("need 0 < dt <= 1/kappa")


def _variance_step(x, db, p: HestonParams, dt: float, xbar=None):
    xbar = p.xbar if xbar is None else xbar
    D = (1.0 - p.kappa * dt) * x + (p.kappa * xbar - 0.5 * p.gamma**2) * dt
    root = 0.5 * (p.gamma * db + np.sqrt(p.gamma**2 * db**2 + 4.0 * D))
    return root**2


def simulate_heston(
    p: HestonParams, dt: float, n: int, seed: int, x0=None, y0: float = 0.0, paths: int | None = None, xbar_path=None
) -> tuple[np.ndarray, np.ndarray]:
    """Implicit, positivity-preserving scheme for the variance plus Euler log returns.

    ``sqrt(X_{k+1})`` is the positive root of
    ``z^2 - gamma dB z - D = 0`` with ``D = (1 - kappa dt) X_k + (kappa xbar - gamma^2/2) dt``.
    With ``paths`` set, arrays have shape ``(paths, n + 1)``. ``x0``
    defaults to a draw from the stationary Gamma law. ``xbar_path``
    (length ``n``) overrides the long-run level step by step.
    """
    _check_scheme(p, dt)
    rng = np.random.default_rng(seed)
    shape = () if paths is None else (paths,)
    if x0 is None:
        x0 = rng.gamma(p.stationary_shape, 1.0 / p.stationary_rate, size=shape)
    z = rng.standard_normal((n, 2) + shape) * np.sqrt(dt)
    levels = np.full(n, p.xbar) if xbar_path is None else np.asarray(xbar_path, dtype=float)
    if levels.size != n:
        raise InvalidSpecError("xbar_path needs one level per step")
    if np.any(p.gamma**2 > 2.0 * p.kappa * levels):
        raise InvalidSpecError("Feller condition fails for some level in xbar_path")
    if paths is None:
        return _simulate_scalar(p, dt, float(x0), y0, z, levels)
    x = np.empty(shape + (n + 1,))
    y = np.empty(shape + (n + 1,))
    x[..., 0] = x0
    y[..., 0] = y0
    rho_c = np.sqrt(1.0 - p.rho**2)
    for k in range(n):
        db, dw = z[k]
        xk = x[..., k]
        x[..., k + 1] = _variance_step(xk, db, p, dt, levels[k])
        y[..., k + 1] = y[..., k] + (p.mu - 0.5 * xk) * dt + np.sqrt(xk) * (p.rho * db + rho_c * dw)
    return x, y


def _simulate_scalar(p: HestonParams, dt: float, x0: float, y0: float, z: np.ndarray, levels: np.ndarray):
    # same recursion as the vector branch on Python floats, which is much faster for one long path
    n = z.shape[0]
    x = [0.0] * (n + 1)
    y = [0.0] * (n + 1)
    x[0], y[0] = x0, y0
    g, k_dt, rho = p.gamma, p.kappa * dt, p.rho
    rho_c = math.sqrt(1.0 - rho**2)
    half_g2_dt = 0.5 * g * g * dt
    lv = levels.tolist()
    for k, (db, dw) in enumerate(z.tolist()):
        xk = x[k]
        D = (1.0 - k_dt) * xk + lv[k] * k_dt - half_g2_dt
        root = 0.5 * (g * db + math.sqrt(g * g * db * db + 4.0 * D))
        x[k + 1] = root * root
        y[k + 1] = y[k] + (p.mu - 0.5 * xk) * dt + math.sqrt(xk) * (rho * db + rho_c * dw)
    return np.array(x), np.array(y)


def cir_log_density(p: HestonParams, v, x, dt: float) -> np.ndarray:
    """Log transition density of the variance from ``v`` to ``x`` over ``dt``.

    Non-central chi-square form with an exponentially scaled Bessel
    function, so large arguments do not overflow.
    """
    v = np.asarray(v, dtype=float)
    x = np.asarray(x, dtype=float)
    if dt <= 0:
        raise InvalidSpecError("dt must be positive")
    decay = np.exp(-p.kappa * dt)
    c = 2.0 * p.kappa / (p.gamma**2 * (1.0 - decay))
    q = p.stationary_shape - 1.0
    u = c * v * decay
    w = c * x
    with np.errstate(divide="ignore", invalid="ignore"):
        z = 2.0 * np.sqrt(u * w)
        log_bessel = np.log(ive(q, z)) + z
        general = np.log(c) - u - w + 0.5 * q * (np.log(w) - np.log(u)) + log_bessel
        # v = 0: Gamma(q + 1, c) density
        at_zero = np.log(c) + q * np.log(w) - w - gammaln(q + 1.0)
    out = np.where(u > 0, general, at_zero)
    return np.where(x > 0, out, -np.inf)


def cir_density(p: HestonParams, v, x, dt: float) -> np.ndarray:
    return np.exp(cir_log_density(p, v, x, dt))


@dataclass(frozen=True)
class VarianceGrid:
    """Quadrature nodes for the variance with trapezoid weights and a mass vector."""

    nodes: np.ndarray
    mass: np.ndarray

    def __post_init__(self):
        nodes = np.asarray(self.nodes, dtype=float)
        if np.any(nodes <= 0) or np.any(np.diff(nodes) <= 0):
            raise InvalidSpecError("nodes must be positive and increasing")
        object.__setattr__(self, "nodes", nodes)
        object.__setattr__(self, "mass", as_distribution(self.mass, atol=1e-9))

    @property
    def widths(self) -> np.ndarray:
        return trapezoid_weights(self.nodes)

    @property
    def mean(self) -> float:
        return float(self.nodes @ self.mass)


def trapezoid_weights(nodes: np.ndarray) -> np.ndarray:
    gaps = np.diff(nodes)
    w = np.zeros_like(nodes)
    w[:-1] += 0.5 * gaps
    w[1:] += 0.5 * gaps
    return w


def geometric_grid(p: HestonParams, size: int = 200, span: float = 50.0) -> np.ndarray:
    return np.geomspace(p.xbar / span, p.xbar * span, size)


def stationary_grid(p: HestonParams, size: int = 200, span: float = 50.0) -> VarianceGrid:
    """Grid carrying the stationary Gamma law of the variance."""
    nodes = geometric_grid(p, size, span)
    k, r = p.stationary_shape, p.stationary_rate
    logd = k * np.log(r) + (k - 1.0) * np.log(nodes) - r * nodes - gammaln(k)
    m = np.exp(logd - logd.max()) * trapezoid_weights(nodes)
    return VarianceGrid(nodes, m / m.sum())


def return_log_likelihood(p: HestonParams, nodes: np.ndarray, dY: float, dt: float) -> np.ndarray:
    """``log psi(x, v)`` for the log return ``dY``; rows index the end variance ``x``.

    The Brownian increment driving the variance is recovered from the
    Euler step ``x = v + kappa (xbar - v) dt + gamma sqrt(v) dB``, and the
    return is Gaussian given that increment.
    """
    if abs(p.rho) >= 1.0:
        raise InvalidSpecError("the return likelihood needs |rho| < 1")
    x = nodes[:, None]
    v = nodes[None, :]
    db = (x - v - p.kappa * (p.xbar - v) * dt) / (p.gamma * np.sqrt(v))
    var = v * (1.0 - p.rho**2) * dt
    resid = dY - (p.mu - 0.5 * v) * dt - np.sqrt(v) * p.rho * db
    return -0.5 * np.log(var) - resid**2 / (2.0 * var)


def transition_matrix(p: HestonParams, nodes: np.ndarray, dt: float) -> np.ndarray:
    """``log cir_density(v -> x)`` on the grid, rows index ``x``."""
    return cir_log_density(p, nodes[None, :], nodes[:, None], dt)


def sv_filter_step(p: HestonParams, grid: VarianceGrid, dY: float, dt: float, log_kernel=None) -> VarianceGrid:
    """One update of the gridded variance filter with the log return ``dY``.

    ``log_kernel`` may carry a precomputed :func:`transition_matrix`.
    """
    nodes = grid.nodes
    if log_kernel is None:
        log_kernel = transition_matrix(p, nodes, dt)
    with np.errstate(divide="ignore"):
        log_mass = np.log(grid.mass)
    log_terms = log_kernel + return_log_likelihood(p, nodes, dY, dt) + log_mass[None, :]
    top = np.max(log_terms)
    if not np.isfinite(top):
        raise NumericalError("variance filter mass vanished")
    new = np.exp(log_terms - top).sum(axis=1) * grid.widths
    total = new.sum()
    if not total > 0:
        raise NumericalError("variance filter mass vanished")
    return VarianceGrid(nodes, new / total)


def sv_filter(p: HestonParams, y, dt: float, grid: VarianceGrid | None = None) -> np.ndarray:
    """Posterior mean of the variance after each log-price observation."""
    y = np.asarray(y, dtype=float)
    grid = stationary_grid(p) if grid is None else grid
    log_kernel = transition_matrix(p, grid.nodes, dt)
    means = np.empty(y.size)
    means[0] = grid.mean
    for k in range(1, y.size):
        grid = sv_filter_step(p, grid, y[k] - y[k - 1], dt, log_kernel)
        means[k] = grid.mean
    return means


def realized_variance(y, horizon: float) -> float:
    """``(1/T) sum (dY)^2`` over the log-price samples ``y``."""
    y = np.asarray(y, dtype=float)
    if y.size < 2:
        raise DataError("need at least two samples")
    return float(np.sum(np.diff(y) ** 2) / horizon)


def expected_rv_and_premium(p: HestonParams, x0_mean: float, T: float, market_variance: float) -> tuple[float, float]:
    """Expected realized variance over ``[0, T]`` and the variance risk premium."""
    if not T > 0:
        raise InvalidSpecError("T must be positive")
    kt = p.kappa * T
    ratio = -np.expm1(-kt) / kt
    erv = p.xbar - (p.xbar - x0_mean) * ratio
    return float(erv), float(market_variance - erv)


@dataclass(frozen=True)
class OptionCurve:
    strikes: np.ndarray
    prices: np.ndarray
    side: str

    def __post_init__(self):
        k = np.asarray(self.strikes, dtype=float)
        c = np.asarray(self.prices, dtype=float)
        if self.side not in ("put", "call"):
            raise InvalidSpecError("side must be 'put' or 'call'")
        if k.size != c.size or k.size == 0:
            raise DataError("strikes and prices must be nonempty and the same length")
        if np.any(k <= 0) or np.any(np.diff(k) <= 0):
            raise DataError("strikes must be positive and increasing")
        if np.any(c < 0):
            raise DataError("option prices must be nonnegative")
        slope = np.diff(c)
        if (self.side == "put" and np.any(slope < 0)) or (self.side == "call" and np.any(slope > 0)):
            warnings.warn(f"{self.side} prices are not monotone in strike", RuntimeWarning)
        object.__setattr__(self, "strikes", k)
        object.__setattr__(self, "prices", c)


def vix_replication(puts: OptionCurve, calls: OptionCurve, forward: float, r: float, T: float) -> float:
    """Model-free variance from out-of-the-money puts and calls.

    Uses puts at strikes below the forward, calls above, the average of
    both at the forward, and the trapezoid rule in strike over the merged
    strike set with weight ``1/K^2``.
    """
    if puts.side != "put" or calls.side != "call":
        raise DataError("curves passed on the wrong sides")
    below = puts.strikes <= forward
    above = calls.strikes >= forward
    if not below.any() or not above.any():
        raise DataError("strikes must cover both sides of the forward")
    otm: dict[float, list[float]] = {}
    for k, c in zip(puts.strikes[below], puts.prices[below]):
        otm.setdefault(float(k), []).append(float(c))
    for k, c in zip(calls.strikes[above], calls.prices[above]):
        otm.setdefault(float(k), []).append(float(c))
    strikes = np.array(sorted(otm))
    prices = np.array([np.mean(otm[k]) for k in strikes])
    integrand = prices / strikes**2
    integral = np.sum(0.5 * (integrand[1:] + integrand[:-1]) * np.diff(strikes))
    return float(2.0 * np.exp(r * T) / T * integral)


@dataclass(frozen=True)
class RegimeFilterResult:
    posterior: np.ndarray
    rv_prediction: np.ndarray
    eps_std: float


def _pair_means(Q: np.ndarray, levels: np.ndarray, dt: float) -> tuple[np.ndarray, np.ndarray]:
    """Kernel ``exp(Q dt)`` and the mean time-average of the level given both endpoints."""
    d = levels.size
    block = np.zeros((2 * d, 2 * d))
    block[:d, :d] = Q
    block[:d, d:] = np.diag(levels)
    block[d:, d:] = Q
    big = expm(block * dt)
    K = big[:d, :d]
    integral = big[:d, d:]
    with np.errstate(invalid="ignore", divide="ignore"):
        means = np.where(K > 1e-300, integral / (dt * np.where(K > 1e-300, K, 1.0)), levels[None, :])
    return np.clip(K, 0.0, None), means


def _rv_weights(regimes: MarkovSpec, horizon: float, order: int = 32) -> np.ndarray:
    """Row vector ``w`` with ``w @ pi`` equal to the averaged level over ``horizon``."""
    nodes, weights = np.polynomial.legendre.leggauss(order)
    s = 0.5 * horizon * (nodes + 1.0)
    levels = np.array([semigroup(regimes, si) @ regimes.states for si in s])
    return 0.5 * weights @ levels


def predicted_rv(regimes: MarkovSpec, pi, horizon: float, order: int = 32) -> float:
    """``(1/T) int_0^T sum_i x_i P(regime_s = i) ds`` by Gauss-Legendre quadrature."""
    return float(_rv_weights(regimes, horizon, order) @ np.asarray(pi, dtype=float))


def regime_filter(
    regimes: MarkovSpec, z, dt: float, eps_std: float | None = None, p0=None, horizon: float | None = None
) -> RegimeFilterResult:
    """Forward filter for the long-run variance level from weekly realized variance ``z``.

    ``z[n]`` is the realized variance over week ``n`` (length ``dt``),
    modelled as the average level over the week plus Gaussian noise of
    std ``eps_std``. The emission mean uses the exact conditional
    time-average given the regimes at both ends of the week. When
    ``eps_std`` is None it defaults to the sample std of ``z``, i.e. the
    residual std under a single-regime fit. Predictions average the level
    over the following ``horizon`` (default ``dt``).
    """
    if regimes.kind != GENERATOR:
        raise InvalidSpecError("regimes need a generator")
    z = np.asarray(z, dtype=float).reshape(-1)
    if eps_std is None:
        eps_std = float(np.std(z, ddof=1)) if z.size > 1 else 1.0
    if not eps_std > 0:
        raise InvalidSpecError("eps_std must be positive")
    horizon = dt if horizon is None else horizon
    d = regimes.d
    pi = np.full(d, 1.0 / d) if p0 is None else as_distribution(p0, atol=1e-9).copy()
    K, means = _pair_means(regimes.matrix, regimes.states, dt)
    rv_weights = _rv_weights(regimes, horizon)
    post = np.empty((z.size, d))
    pred = np.empty(z.size)
    for n, zn in enumerate(z):
        logl = -((zn - means) ** 2) / (2.0 * eps_std**2)
        joint = pi[:, None] * K * np.exp(logl - logl.max())
        pi = joint.sum(axis=0)
        total = pi.sum()
        if not total > 0:
            raise NumericalError(f"regime posterior vanished in week {n}")
        pi = pi / total
        post[n] = pi
        pred[n] = rv_weights @ pi
    return RegimeFilterResult(post, pred, eps_std)


def simulate_regime_rv(
    regimes: MarkovSpec,
    p: HestonParams,
    weeks: int,
    week: float,
    steps_per_week: int,
    seed: int,
) -> tuple[np.ndarray, np.ndarray]:
    """Heston paths whose long-run level switches with a Markov regime.

    Returns the regime index at the end of each week and the weekly
    realized variance.
    """
    dt = week / steps_per_week
    n = weeks * steps_per_week
    rng = np.random.default_rng(seed)
    cum = np.cumsum(semigroup(regimes, dt), axis=1)
    idx = np.empty(n + 1, dtype=np.int64)
    idx[0] = rng.integers(regimes.d)
    u = rng.random(n)
    for k in range(n):
        idx[k + 1] = min(int(np.searchsorted(cum[idx[k]], u[k], side="right")), regimes.d - 1)
    levels = regimes.states[idx[:-1]]
    _, y = simulate_heston(p, dt, n, int(rng.integers(2**63)), x0=float(levels[0]), xbar_path=levels)
    z = np.array([realized_variance(y[w * steps_per_week : (w + 1) * steps_per_week + 1], week) for w in range(weeks)])
    return idx[steps_per_week::steps_per_week], z
