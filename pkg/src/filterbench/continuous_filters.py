"""Finite-state continuous-time filtering on a time grid.

The hidden chain has generator ``Q`` and the observation is
``dY = h(X) dt + gamma dW``. Filters consume only the increments
(:class:`ObsIncrementSeries`), never the latent path.
"""

from __future__ import annotations

import itertools
import warnings
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import DegenerateLikelihoodError, InvalidSpecError
from .markov_core import GENERATOR, MarkovSpec, as_distribution, semigroup

CLIP_WARN_FRACTION = 0.01


@dataclass(frozen=True)
class UnnormalizedMass:
    """Nonnegative mass with a log scale: the true mass is ``mass * exp(logscale)``."""

    mass: np.ndarray
    logscale: float = 0.0
    clips: int = 0

    @property
    def normalized(self) -> np.ndarray:
        return self.mass / self.mass.sum()


@dataclass(frozen=True)
class ObsIncrementSeries:
    """Observation increments ``dy[k] = Y(t_{k+1}) - Y(t_k)`` on a uniform grid."""

    dt: float
    dy: np.ndarray

    def __post_init__(self):
        dy = np.asarray(self.dy, dtype=float).reshape(-1)
        if not self.dt > 0:
            raise InvalidSpecError("dt must be positive")
        if not np.all(np.isfinite(dy)):
            raise InvalidSpecError("increments must be finite")
        object.__setattr__(self, "dy", dy)

    @property
    def times(self) -> np.ndarray:
        return self.dt * np.arange(self.dy.size + 1)

    def coarsen(self, factor: int) -> "ObsIncrementSeries":
        """Sum blocks of ``factor`` increments (same path, coarser grid)."""
        if self.dy.size % factor:
            raise InvalidSpecError("series length is not a multiple of the factor")
        return ObsIncrementSeries(self.dt * factor, self.dy.reshape(-1, factor).sum(axis=1))


def _rates(Q) -> np.ndarray:
    if isinstance(Q, MarkovSpec):
        if Q.kind != GENERATOR:
            raise InvalidSpecError("expected a generator")
        return Q.matrix
    return np.asarray(Q, dtype=float)


def _check_step(Q: np.ndarray, dt: float):
    if 1.0 + np.min(np.diag(Q)) * dt < 0:
        raise InvalidSpecError("dt too large: I + Q' dt has negative entries")


def _clip(p: np.ndarray) -> tuple[np.ndarray, bool]:
    if np.any(p < 0):
        return np.clip(p, 0.0, None), True
    return p, False


def zakai_step(Q, h, gamma: float, p: UnnormalizedMass, dy: float, dt: float) -> UnnormalizedMass:
    """One Euler-Maruyama step of the unnormalized (Zakai) filter."""
    Q = _rates(Q)
    _check_step(Q, dt)
    h = np.asarray(h, dtype=float)
    m = p.mass
    new = m + (Q.T @ m) * dt + (h / gamma**2) * m * dy
    new, clipped = _clip(new)
    total = new.sum()
    if not total > 0:
        raise DegenerateLikelihoodError("Zakai mass vanished")
    return UnnormalizedMass(new / total, p.logscale + float(np.log(total)), p.clips + int(clipped))


def ks_step(Q, h, gamma: float, pi, dy: float, dt: float) -> np.ndarray:
    """One Euler-Maruyama step of the normalized (Kushner-Stratonovich) filter."""
    Q = _rates(Q)
    _check_step(Q, dt)
    h = np.asarray(h, dtype=float)
    pi = np.asarray(pi, dtype=float)
    hbar = h @ pi
    new = pi + (Q.T @ pi) * dt + ((h - hbar) / gamma**2) * pi * (dy - hbar * dt)
    new, _ = _clip(new)
    total = new.sum()
    if not total > 0:
        raise DegenerateLikelihoodError("filter mass vanished")
    return new / total


def _warn_clips(clips: int, steps: int):
    if steps and clips > CLIP_WARN_FRACTION * steps:
        warnings.warn(f"negative mass clipped on {clips} of {steps} steps; reduce dt", RuntimeWarning)


def zakai_filter(Q, h, gamma: float, p0, obs: ObsIncrementSeries) -> tuple[np.ndarray, np.ndarray, int]:
    """Normalized Zakai trajectory (K+1, d), cumulative log-scales and clip count.

    Same arithmetic as repeated :func:`zakai_step`, inlined for speed.
    """
    Q = _rates(Q)
    _check_step(Q, obs.dt)
    drift = Q.T * obs.dt
    coef = np.asarray(h, dtype=float) / gamma**2
    m = as_distribution(p0, atol=1e-9).copy()
    out = np.empty((obs.dy.size + 1, m.size))
    scales = np.zeros(obs.dy.size + 1)
    out[0] = m / m.sum()
    logscale, clips = 0.0, 0
    for k, dy in enumerate(obs.dy):
        m = m + drift @ m + coef * m * dy
        if (m < 0).any():
            m = np.clip(m, 0.0, None)
            clips += 1
        total = m.sum()
        if not total > 0:
            raise DegenerateLikelihoodError("Zakai mass vanished")
        m = m / total
        logscale += np.log(total)
        out[k + 1], scales[k + 1] = m, logscale
    _warn_clips(clips, obs.dy.size)
    return out, scales, clips


def ks_filter(Q, h, gamma: float, p0, obs: ObsIncrementSeries) -> np.ndarray:
    """Kushner-Stratonovich trajectory; same arithmetic as repeated :func:`ks_step`."""
    Q = _rates(Q)
    _check_step(Q, obs.dt)
    drift = Q.T * obs.dt
    h = np.asarray(h, dtype=float)
    g2 = gamma**2
    pi = as_distribution(p0, atol=1e-9).copy()
    out = np.empty((obs.dy.size + 1, pi.size))
    out[0] = pi
    for k, dy in enumerate(obs.dy):
        hbar = h @ pi
        pi = pi + drift @ pi + ((h - hbar) / g2) * pi * (dy - hbar * obs.dt)
        if (pi < 0).any():
            pi = np.clip(pi, 0.0, None)
        total = pi.sum()
        if not total > 0:
            raise DegenerateLikelihoodError("filter mass vanished")
        pi = pi / total
        out[k + 1] = pi
    return out


def bayes_filter(Q, h, gamma: float, p0, obs: ObsIncrementSeries) -> np.ndarray:
    """Exact filter of the grid-sampled chain.

    Each increment is weighted by ``exp(h dy / gamma^2 - h^2 dt / (2 gamma^2))``
    at the state occupied at the start of the interval, then the law is
    moved by ``exp(Q dt)``.
    """
    Q = _rates(Q)
    h = np.asarray(h, dtype=float)
    kernel_t = semigroup(MarkovSpec(np.arange(h.size, dtype=float), GENERATOR, Q), obs.dt).T
    pi = as_distribution(p0, atol=1e-9).copy()
    out = np.empty((obs.dy.size + 1, pi.size))
    out[0] = pi
    for k, dy in enumerate(obs.dy):
        logw = h * dy / gamma**2 - h**2 * obs.dt / (2.0 * gamma**2)
        w = pi * np.exp(logw - logw.max())
        pi = kernel_t @ (w / w.sum())
        pi /= pi.sum()
        out[k + 1] = pi
    return out


@dataclass(frozen=True)
class SmoothingResult:
    alpha: np.ndarray
    smoothed: np.ndarray
    filtered: np.ndarray


def smooth_alpha(Q, h, gamma: float, obs: ObsIncrementSeries, t_index: int, p0) -> SmoothingResult:
    """Backward factor ``alpha(tau, t)`` for grid points ``tau <= t`` and the smoothed laws.

    The backward recursion is the exact adjoint of the Euler Zakai step,
    ``alpha_k = alpha_{k+1} + Q alpha_{k+1} dt + (h / gamma^2) alpha_{k+1} dy_k``,
    so ``<p_k, alpha_k>`` is the same at every ``k`` and the smoothed law at
    ``tau = t`` is the filter itself. Rows of ``alpha`` are rescaled to
    unit sum (only ratios matter).
    """
    Q = _rates(Q)
    _check_step(Q, obs.dt)
    h = np.asarray(h, dtype=float)
    if not 0 <= t_index <= obs.dy.size:
        raise InvalidSpecError("t_index outside the observation grid")
    filt, _, _ = zakai_filter(Q, h, gamma, p0, ObsIncrementSeries(obs.dt, obs.dy[:t_index]))
    d = h.size
    alpha = np.empty((t_index + 1, d))
    alpha[t_index] = 1.0 / d
    clips = 0
    for k in range(t_index - 1, -1, -1):
        nxt = alpha[k + 1]
        a = nxt + (Q @ nxt) * obs.dt + (h / gamma**2) * nxt * obs.dy[k]
        a, clipped = _clip(a)
        clips += int(clipped)
        s = a.sum()
        if not s > 0:
            raise DegenerateLikelihoodError("backward factor vanished")
        alpha[k] = a / s
    _warn_clips(clips, t_index)
    sm = filt * alpha
    sm /= sm.sum(axis=1, keepdims=True)
    alpha_out = alpha * d  # alpha(t, t) is identically 1
    return SmoothingResult(alpha_out, sm, filt)


def simulate_observations(
    chain: MarkovSpec, h, gamma: float, T: float, dt: float, seed: int, p0=None
) -> tuple[np.ndarray, ObsIncrementSeries]:
    """Sample the chain on a grid and synthesize ``dy = h(X) dt + gamma sqrt(dt) xi``."""
    h = np.asarray(h, dtype=float)
    steps = int(round(T / dt))
    rng = np.random.default_rng(seed)
    p0 = np.full(chain.d, 1.0 / chain.d) if p0 is None else as_distribution(p0, atol=1e-9)
    cum = np.cumsum(semigroup(chain, dt), axis=1)
    idx = np.empty(steps + 1, dtype=np.int64)
    idx[0] = min(int(np.searchsorted(np.cumsum(p0), rng.random(), side="right")), chain.d - 1)
    u = rng.random(steps)
    for k in range(steps):
        idx[k + 1] = min(int(np.searchsorted(cum[idx[k]], u[k], side="right")), chain.d - 1)
    dy = h[idx[:-1]] * dt + gamma * np.sqrt(dt) * rng.standard_normal(steps)
    return idx, ObsIncrementSeries(dt, dy)


def mc_approx_filter(
    chain: MarkovSpec,
    n: int,
    obs: ObsIncrementSeries,
    g: Callable[[np.ndarray], np.ndarray],
    seed: int,
    h,
    gamma: float,
    p0=None,
    copies: int = 20000,
    min_ess: float = 5.0,
) -> np.ndarray:
    """Monte Carlo filter built on the fidelity-``n`` jump approximation of the chain.

    The approximating process holds for exponential(1)/n times and then
    moves with kernel ``exp(Q/n)``. Independent copies are weighted by
    ``exp(sum h dy / gamma^2 - sum h^2 dt / (2 gamma^2))`` along the
    observation grid, and the estimate is the weighted average of ``g``.
    ``g`` maps an array of state indices to values.
    """
    if chain.kind != GENERATOR:
        raise InvalidSpecError("mc_approx_filter needs a generator")
    if n < 1:
        raise InvalidSpecError("fidelity n must be at least 1")
    h = np.asarray(h, dtype=float)
    rng = np.random.default_rng(seed)
    p0 = np.full(chain.d, 1.0 / chain.d) if p0 is None else as_distribution(p0, atol=1e-9)
    step = 1.0 / n
    cum = np.cumsum(semigroup(chain, step), axis=1)
    state = np.minimum(np.searchsorted(np.cumsum(p0), rng.random(copies), side="right"), chain.d - 1)
    next_jump = rng.exponential(1.0, copies) * step
    logw = np.zeros(copies)
    out = np.empty(obs.dy.size + 1)

    def estimate(k):
        w = np.exp(logw - logw.max())
        ess = w.sum() ** 2 / np.dot(w, w)
        if ess < min_ess:
            raise DegenerateLikelihoodError(f"importance weights degenerated at grid point {k} (ESS {ess:.2f})")
        return float(np.sum(w * g(state)) / np.sum(w))

    out[0] = estimate(0)
    for k, dy in enumerate(obs.dy):
        hk = h[state]
        logw += hk * dy / gamma**2 - hk**2 * obs.dt / (2.0 * gamma**2)
        t_next = (k + 1) * obs.dt
        due = np.flatnonzero(next_jump <= t_next)
        while due.size:
            u = rng.random(due.size)
            state[due] = np.minimum((cum[state[due]] <= u[:, None]).sum(axis=1), chain.d - 1)
            next_jump[due] += rng.exponential(1.0, due.size) * step
            due = due[next_jump[due] <= t_next]
        out[k + 1] = estimate(k + 1)
    return out


@dataclass(frozen=True)
class ChainApproximation:
    """Nearest-neighbour walk on ``{k/n}`` matching drift and diffusion locally."""

    spec: MarkovSpec
    holding_dt: np.ndarray
    up: np.ndarray
    down: np.ndarray


def sde_chain_approx(drift: Callable, diffusion: Callable, n: int, lo: float, hi: float) -> ChainApproximation:
    """Birth-death chain for ``dX = a(X) dt + sigma(X) dB`` on the grid ``{k/n}`` in ``[lo, hi]``.

    From ``x`` the walk moves to ``x +/- 1/n`` with probabilities
    ``(sigma^2 +/- a/n) / (2 sigma^2)`` after a time step ``1/(n^2 sigma^2)``.
    At the two ends a move that would leave the range becomes a hold.
    """
    ks = np.arange(int(np.ceil(lo * n - 1e-9)), int(np.floor(hi * n + 1e-9)) + 1)
    x = ks / n
    if x.size < 2:
        raise InvalidSpecError("range holds fewer than two grid points")
    a = np.array([drift(v) for v in x], dtype=float)
    s2 = np.array([diffusion(v) ** 2 for v in x], dtype=float)
    for xi, ai, si in zip(x, a, s2):
        if not si > 0 or si < abs(ai) / n:
            raise InvalidSpecError(f"local consistency fails at x={xi!r}: sigma^2={si!r}, |a|/n={abs(ai) / n!r}")
    up = (s2 + a / n) / (2.0 * s2)
    down = (s2 - a / n) / (2.0 * s2)
    m = x.size
    P = np.zeros((m, m))
    for i in range(m):
        P[i, min(i + 1, m - 1)] += up[i]
        P[i, max(i - 1, 0)] += down[i]
    return ChainApproximation(MarkovSpec.one_step(x, P), 1.0 / (n**2 * s2), up, down)


@dataclass(frozen=True)
class EndpointLikelihood:
    """``value[v, x]`` estimates E[L | X_0 = v, X_n = x]; ``stderr`` is 0 when exact."""

    value: np.ndarray
    stderr: np.ndarray
    bridge_prob: np.ndarray


def _riemann(hpath: np.ndarray, rule: str) -> np.ndarray:
    if rule == "left":
        return hpath[..., :-1].mean(axis=-1)
    if rule == "right":
        return hpath[..., 1:].mean(axis=-1)
    raise InvalidSpecError("endpoint rule must be 'left' or 'right'")


def endpoint_likelihood(
    chain: MarkovSpec,
    n: int,
    h,
    dy: float,
    gamma: float,
    method: str = "auto",
    paths: int = 20000,
    seed: int = 0,
    rule: str = "left",
    max_enumeration: int = 1_000_000,
) -> EndpointLikelihood:
    """Expected Gaussian likelihood of ``dy`` given the endpoints of the fidelity-``n`` chain.

    The integral of ``h`` over ``[0, 1]`` is replaced by the Riemann sum of
    ``h`` along the discrete chain with kernel ``exp(Q/n)``; ``rule="left"``
    averages ``h(X_0..X_{n-1})`` and ``rule="right"`` averages
    ``h(X_1..X_n)``. ``method`` is ``"exact"`` (path enumeration),
    ``"bridge"`` (Monte Carlo from the endpoint-conditioned chain) or
    ``"auto"``.
    """
    if n < 1:
        raise InvalidSpecError("n must be at least 1")
    h = np.asarray(h, dtype=float)
    d = chain.d
    K = semigroup(chain, 1.0 / n)
    powers = [np.eye(d)]
    for _ in range(n):
        powers.append(powers[-1] @ K)
    Kn = powers[n]
    if method == "auto":
        method = "exact" if d ** (n + 1) <= max_enumeration else "bridge"

    def lik(avg):
        return np.exp(-((dy - avg) ** 2) / (2.0 * gamma**2))

    value = np.zeros((d, d))
    stderr = np.zeros((d, d))
    if method == "exact":
        paths_idx = np.array(list(itertools.product(range(d), repeat=n + 1)))
        with np.errstate(divide="ignore"):
            logp = np.log(K[paths_idx[:, :-1], paths_idx[:, 1:]]).sum(axis=1)
        weight = np.exp(logp) * lik(_riemann(h[paths_idx], rule))
        np.add.at(value, (paths_idx[:, 0], paths_idx[:, -1]), weight)
        with np.errstate(invalid="ignore", divide="ignore"):
            value = np.where(Kn > 0, value / np.where(Kn > 0, Kn, 1.0), 0.0)
    elif method == "bridge":
        rng = np.random.default_rng(seed)
        for v in range(d):
            for x in range(d):
                if Kn[v, x] <= 0:
                    continue
                cur = np.full(paths, v)
                hpath = np.empty((paths, n + 1))
                hpath[:, 0] = h[v]
                for k in range(n):
                    remaining = powers[n - k - 1][:, x]
                    probs = K[cur] * remaining[None, :]
                    probs /= probs.sum(axis=1, keepdims=True)
                    cum = np.cumsum(probs, axis=1)
                    cur = np.minimum((cum <= rng.random(paths)[:, None]).sum(axis=1), d - 1)
                    hpath[:, k + 1] = h[cur]
                vals = lik(_riemann(hpath, rule))
                value[v, x] = vals.mean()
                stderr[v, x] = vals.std(ddof=1) / np.sqrt(paths)
    else:
        raise InvalidSpecError(f"unknown method {method!r}")
    return EndpointLikelihood(value, stderr, Kn)


def sparse_obs_filter(
    chain: MarkovSpec,
    n: int,
    y0: float,
    y1: float,
    gamma: float,
    h,
    pi0,
    method: str = "auto",
    paths: int = 20000,
    seed: int = 0,
    rule: str = "left",
) -> np.ndarray:
    """Filter at time 1 from observations at times 0 and 1 only."""
    pi0 = as_distribution(pi0, atol=1e-9)
    el = endpoint_likelihood(chain, n, h, y1 - y0, gamma, method, paths, seed, rule)
    mass = (pi0[:, None] * el.bridge_prob * el.value).sum(axis=0)
    total = mass.sum()
    if not total > 0:
        raise DegenerateLikelihoodError("posterior mass vanished")
    return mass / total
