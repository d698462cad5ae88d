"""Filter stability diagnostics.

The unnormalized filter evolves as ``p_k = T_k p_{k-1}`` with
``T_k = diag(psi_k) Lambda'``. Its top two Lyapunov exponents V1 > V2 are
estimated from the growth of one vector and of the area ``|a ^ b|``
spanned by two vectors; the gap V2 - V1 is the rate at which filters
started from different priors merge.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import InvalidSpecError
from .hmm_discrete import DiscreteHMM, forward_filter, simulate_hmm
from .markov_core import MarkovSpec, as_distribution, is_primitive, sample_indices


@dataclass(frozen=True)
class FilterCocycle:
    """Steps ``T_k = diag(psi[k-1]) @ lambda_T`` for ``k = 1..n``.

    ``psi`` rows are scaled so their largest entry is 1; ``log_scale[k]``
    holds the removed log factor.
    """

    lambda_T: np.ndarray
    psi: np.ndarray
    log_scale: np.ndarray

    def __post_init__(self):
        if np.any(self.psi < 0) or not np.all(np.isfinite(self.log_scale)):
            raise InvalidSpecError("likelihood entries must be nonnegative with finite scales")

    @property
    def steps(self) -> int:
        return self.psi.shape[0]

    @property
    def d(self) -> int:
        return self.lambda_T.shape[0]

    @classmethod
    def constant(cls, matrix, n: int) -> "FilterCocycle":
        """Cocycle repeating one matrix (``psi = 1``)."""
        m = np.asarray(matrix, dtype=float)
        return cls(m, np.ones((n, m.shape[0])), np.zeros(n))


def cocycle_from_hmm(hmm: DiscreteHMM, obs) -> FilterCocycle:
    """Cocycle driven by ``obs[1:]``; ``obs[0]`` belongs to the initial law."""
    logpsi = hmm.log_emission(np.asarray(obs, dtype=float)[1:])
    top = logpsi.max(axis=1)
    return FilterCocycle(hmm.transition.T.copy(), np.exp(logpsi - top[:, None]), top)


def _apply(c: FilterCocycle, k: int, v: np.ndarray) -> np.ndarray:
    return c.psi[k] * (c.lambda_T @ v)


def propagate_unnormalized(c: FilterCocycle, nu, n: int | None = None) -> tuple[np.ndarray, float]:
    """Unit direction of ``p_n = T_n ... T_1 nu`` and ``log |p_n|`` (Euclidean)."""
    n = c.steps if n is None else n
    if not 1 <= n <= c.steps:
        raise InvalidSpecError(f"n must be in 1..{c.steps}")
    p = np.asarray(nu, dtype=float)
    lognorm = float(np.log(np.linalg.norm(p)))
    p = p / np.linalg.norm(p)
    for k in range(n):
        p = _apply(c, k, p)
        s = np.linalg.norm(p)
        lognorm += np.log(s) + c.log_scale[k]
        p = p / s
    return p, lognorm


def wedge_norm(a, b) -> float:
    """Area spanned by ``a`` and ``b``: ``sqrt(|a|^2 |b|^2 - <a,b>^2)``.

    Computed as ``|a|`` times the norm of ``b`` orthogonal to ``a``; the
    squared form cancels to zero once the two are nearly parallel.
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    na = np.linalg.norm(a)
    if na == 0.0:
        return 0.0
    u = a / na
    return float(na * np.linalg.norm(b - np.dot(b, u) * u))


def batch_means(x: np.ndarray, batches: int = 20) -> tuple[float, float]:
    """Mean of ``x`` and its batch-means standard error."""
    x = np.asarray(x, dtype=float)
    if x.size < 2 * batches:
        batches = max(2, x.size // 2)
    usable = x[: (x.size // batches) * batches]
    means = usable.reshape(batches, -1).mean(axis=1)
    return float(x.mean()), float(means.std(ddof=1) / np.sqrt(batches))


@dataclass(frozen=True)
class LyapunovEstimate:
    v1: float
    v2: float
    v1_se: float
    v2_se: float
    gap: float
    gap_se: float


def _pair_increments(c: FilterCocycle, u: np.ndarray, q: np.ndarray, reortho_every: int):
    """Per-block log growth of the top vector and of the spanned area."""
    steps = c.steps
    top, area, lengths = [], [], []
    k = 0
    while k < steps:
        block = min(reortho_every, steps - k)
        a, b = u, q
        scale = 0.0
        for j in range(k, k + block):
            a, b = _apply(c, j, a), _apply(c, j, b)
            scale += c.log_scale[j]
        na = np.linalg.norm(a)
        top.append(np.log(na) + scale)
        area.append(np.log(wedge_norm(a, b)) + 2.0 * scale)
        u = a / na
        q = b - np.dot(b, u) * u
        q = q / np.linalg.norm(q)
        lengths.append(block)
        k += block
    return np.array(top), np.array(area), np.array(lengths)


def lyapunov_spectrum(c: FilterCocycle, seed: int = 0, reortho_every: int = 1, tail: float = 0.5) -> LyapunovEstimate:
    """Top two Lyapunov exponents over the last ``tail`` fraction of steps.

    The pair is re-orthonormalized every ``reortho_every`` steps. Keep this
    small when the gap is large: within a block the second vector
    collapses onto the first at rate ``exp(V2 - V1)``.
    """
    if c.d < 2:
        raise InvalidSpecError("need at least two states")
    if not is_primitive(c.lambda_T.T):
        warnings.warn("transition matrix is not primitive; exponent estimates may be meaningless", RuntimeWarning)
    rng = np.random.default_rng(seed)
    u = rng.random(c.d) + 0.1
    u /= np.linalg.norm(u)
    q = rng.standard_normal(c.d)
    q -= np.dot(q, u) * u
    q /= np.linalg.norm(q)
    top, area, lengths = _pair_increments(c, u, q, reortho_every)
    start = int(len(top) * (1.0 - tail))
    top, area, lengths = top[start:], area[start:], lengths[start:]
    rate1 = top / lengths
    rate_gap = (area - 2.0 * top) / lengths
    v1, v1_se = batch_means(rate1)
    gap, gap_se = batch_means(rate_gap)
    v2, v2_se = batch_means(rate1 + rate_gap)
    return LyapunovEstimate(v1, v2, v1_se, v2_se, gap, gap_se)


@dataclass(frozen=True)
class ExponentEstimate:
    exponent: float
    stderr: float
    log_distance: np.ndarray
    collapsed: bool
    gap: float
    gap_se: float

    @property
    def agrees_with_gap(self) -> bool:
        return abs(self.exponent - self.gap) <= 2.0 * np.hypot(self.stderr, self.gap_se)


def pair_log_distance(c: FilterCocycle, p_nu, p_nu_tilde) -> np.ndarray:
    """``log |pi_k - pi~_k|`` for two filters run through the same cocycle.

    The second filter is tracked as ``A u + B q`` against an orthonormal
    frame ``(u, q)`` with ``log B`` kept separately, so the distance is
    resolved far below machine epsilon. Entry 0 is the starting distance;
    returns ``-inf`` everywhere when the two directions coincide.
    """
    p = np.asarray(p_nu, dtype=float)
    w = np.asarray(p_nu_tilde, dtype=float)
    norm = np.linalg.norm(p)
    u = p / norm
    w = w / norm
    A = float(np.dot(w, u))
    r = w - A * u
    B = np.linalg.norm(r)
    out = np.full(c.steps + 1, -np.inf)
    if B <= 1e-15 * np.linalg.norm(w):
        return out
    q = r / B
    logB = np.log(B)
    ones = np.ones(c.d)

    def logdist(u, q, A, logB):
        sig, tau = u @ ones, q @ ones
        denom = abs(A * sig + np.exp(logB) * tau)
        return logB + np.log(np.linalg.norm(tau * u - sig * q)) - np.log(abs(sig)) - np.log(denom)

    out[0] = logdist(u, q, A, logB)
    for k in range(c.steps):
        a, b = _apply(c, k, u), _apply(c, k, q)
        r11 = np.linalg.norm(a)
        u = a / r11
        r12 = np.dot(b, u)
        b = b - r12 * u
        r22 = np.linalg.norm(b)
        if r22 == 0.0:
            out[k + 1 :] = -np.inf
            break
        q = b / r22
        A = A + np.exp(logB) * r12 / r11
        logB = logB + np.log(r22) - np.log(r11)
        out[k + 1] = logdist(u, q, A, logB)
    return out


def log_norm_trace(c: FilterCocycle, nu) -> np.ndarray:
    """``log |p_k|`` for ``k = 0..steps`` starting from ``p_0 = nu``."""
    p = np.asarray(nu, dtype=float)
    out = np.empty(c.steps + 1)
    out[0] = np.log(np.linalg.norm(p))
    p = p / np.linalg.norm(p)
    for k in range(c.steps):
        p = _apply(c, k, p)
        s = np.linalg.norm(p)
        out[k + 1] = out[k] + np.log(s) + c.log_scale[k]
        p = p / s
    return out


def initial_weights(hmm: DiscreteHMM, y0: float, nu) -> np.ndarray:
    """``psi_0 * nu`` scaled so the largest likelihood entry is 1."""
    logpsi = hmm.log_emission([y0])[0]
    return np.exp(logpsi - logpsi.max()) * as_distribution(nu, atol=1e-9)


def exponent_from_obs(hmm: DiscreteHMM, obs, nu, nu_tilde, seed: int = 0, tail: float = 0.5) -> ExponentEstimate:
    """Forgetting rate of the filter from two priors on a given stream.

    Returns the tail slope of ``log |pi_k - pi~_k|`` with a batch-means
    error, the log-distance trace, and the Lyapunov gap on the same stream.
    """
    obs = np.asarray(obs, dtype=float)
    n = obs.size - 1
    c = cocycle_from_hmm(hmm, obs)
    logd = pair_log_distance(c, initial_weights(hmm, obs[0], nu), initial_weights(hmm, obs[0], nu_tilde))
    lyap = lyapunov_spectrum(c, seed=seed, tail=tail)
    if not np.all(np.isfinite(logd)):
        return ExponentEstimate(-np.inf, 0.0, logd, True, lyap.gap, lyap.gap_se)
    start = int(n * (1.0 - tail))
    rate, se = batch_means(np.diff(logd[start:]))
    return ExponentEstimate(rate, se, logd, False, lyap.gap, lyap.gap_se)


def empirical_exponent(hmm: DiscreteHMM, nu, nu_tilde, n: int, seed: int, tail: float = 0.5) -> ExponentEstimate:
    """``exponent_from_obs`` on ``n`` steps of a stream simulated from ``hmm``."""
    _, obs = simulate_hmm(hmm, n + 1, seed)
    return exponent_from_obs(hmm, obs, nu, nu_tilde, seed=seed, tail=tail)


@dataclass(frozen=True)
class ExponentBounds:
    coupling_bound: float
    low_noise_upper: float
    low_noise_lower: float

    def at_noise(self, gamma: float) -> tuple[float, float]:
        """Low-noise bounds divided by ``gamma^2`` (exponent units)."""
        return self.low_noise_upper / gamma**2, self.low_noise_lower / gamma**2


def exponent_bounds(lam, h, mu) -> ExponentBounds:
    """Coupling bound and the two low-noise bounds (in units of gamma^2 times the exponent)."""
    lam = np.asarray(lam, dtype=float)
    h = np.asarray(h, dtype=float)
    mu = as_distribution(mu, atol=1e-8)
    d = lam.shape[0]
    off = ~np.eye(d, dtype=bool)
    coupling = -2.0 * np.sqrt((lam * lam.T)[off]).min() if d > 1 else 0.0
    sq = (h[:, None] - h[None, :]) ** 2
    nearest = np.where(off, sq, np.inf).min(axis=1) if d > 1 else np.zeros(1)
    upper = -0.5 * float(mu @ nearest)
    lower = -0.5 * float(mu @ sq.sum(axis=1))
    return ExponentBounds(float(coupling), upper, lower)


CYCLIC_GENERATOR = np.array(
    [[-1.0, 1.0, 0.0, 0.0], [0.0, -1.0, 1.0, 0.0], [0.0, 0.0, -1.0, 1.0], [1.0, 0.0, 0.0, -1.0]]
)
CYCLIC_H = np.array([1.0, 0.0, 1.0, 0.0])


@dataclass(frozen=True)
class CounterexampleResult:
    distance: np.ndarray
    observations: np.ndarray
    pi: np.ndarray
    pi_tilde: np.ndarray
    log_slope: float
    log_slope_se: float


def _indicator_filter(lam_t: np.ndarray, h: np.ndarray, y: np.ndarray, prior: np.ndarray) -> np.ndarray:
    out = np.empty((y.size, prior.size))
    p = prior * (h == y[0])
    out[0] = p / p.sum()
    for k in range(1, y.size):
        p = (h == y[k]) * (lam_t @ out[k - 1])
        out[k] = p / p.sum()
    return out


def counterexample_run(n: int, seed: int, dt: float = 0.1, split: float = 0.8, nu=None, nu_tilde=None) -> CounterexampleResult:
    """Noiselessly observed cyclic chain whose filter never forgets its prior.

    The chain cycles 1 -> 2 -> 3 -> 4 -> 1 at unit rate and is sampled
    with the one-jump-per-step kernel ``I + Q dt``, so every move flips
    the observed ``h``. Starting priors default to the correct
    conditional law given ``Y_0`` (``nu``) and a ``split`` vs ``1 - split``
    mix on the same two states (``nu_tilde``).
    """
    lam = np.eye(4) + CYCLIC_GENERATOR * dt
    if np.any(lam < 0):
        raise InvalidSpecError("dt must be at most 1")
    rng = np.random.default_rng(seed)
    x = sample_indices(lam, n, rng, int(rng.integers(4)))
    y = CYCLIC_H[x]
    match = CYCLIC_H == y[0]
    if nu is None:
        nu = match / match.sum()
    if nu_tilde is None:
        first, second = np.flatnonzero(match)
        nu_tilde = np.zeros(4)
        nu_tilde[first], nu_tilde[second] = split, 1.0 - split
    pi = _indicator_filter(lam.T, CYCLIC_H, y, np.asarray(nu, dtype=float))
    pi_t = _indicator_filter(lam.T, CYCLIC_H, y, np.asarray(nu_tilde, dtype=float))
    dist = np.linalg.norm(pi - pi_t, axis=1)
    half = dist[n // 2 :]
    slope, se = np.nan, np.nan
    if np.all(half > 0):
        t = np.arange(half.size, dtype=float)
        logd = np.log(half)
        design = np.column_stack([np.ones_like(t), t])
        coef, *_ = np.linalg.lstsq(design, logd, rcond=None)
        resid = logd - design @ coef
        dof = max(half.size - 2, 1)
        sigma2 = resid @ resid / dof
        slope = float(coef[1])
        se = float(np.sqrt(sigma2 / np.sum((t - t.mean()) ** 2)))
    return CounterexampleResult(dist, y, pi, pi_t, slope, se)


def ergodic_average(hmm: DiscreteHMM, g: Callable[[float, np.ndarray], float], n: int, seed: int) -> np.ndarray:
    """Running average ``(1/k) sum_{j<k} g(X_j, pi_j)`` along a simulated stream."""
    idx, obs = simulate_hmm(hmm, n, seed)
    pi = forward_filter(hmm, obs).pi
    x = hmm.chain.states[idx]
    vals = np.array([g(x[k], pi[k]) for k in range(n)], dtype=float)
    return np.cumsum(vals) / np.arange(1, n + 1)


def cyclic_chain() -> MarkovSpec:
    return MarkovSpec.generator([1.0, 2.0, 3.0, 4.0], CYCLIC_GENERATOR)
