"""Exact inference for discrete-time HMMs with Gaussian emissions.

Observations are ``Y_n = h(X_n) + gamma * W_n`` with iid standard normal
``W_n``. All recursions run on max-shifted logarithms so that long
sequences never underflow.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, replace

import numpy as np
from scipy.optimize import brentq
from scipy.special import logsumexp

from .errors import DegenerateLikelihoodError, InvalidSpecError
from .markov_core import ONE_STEP, MarkovSpec, as_distribution, sample_indices

_LOG_2PI = np.log(2.0 * np.pi)


@dataclass(frozen=True)
class DiscreteHMM:
    """Chain ``X`` with one-step kernel plus emission levels ``h`` and noise ``gamma``."""

    chain: MarkovSpec
    h: np.ndarray
    gamma: float
    p0: np.ndarray

    def __post_init__(self):
        if self.chain.kind != ONE_STEP:
            raise InvalidSpecError("an HMM needs a one-step chain")
        h = np.asarray(self.h, dtype=float).reshape(-1)
        if h.size != self.chain.d:
            raise InvalidSpecError("h must have one level per state")
        if not self.gamma > 0:
            raise InvalidSpecError("gamma must be positive")
        object.__setattr__(self, "h", h)
        object.__setattr__(self, "gamma", float(self.gamma))
        object.__setattr__(self, "p0", as_distribution(self.p0, atol=1e-9))

    @property
    def d(self) -> int:
        return self.chain.d

    @property
    def transition(self) -> np.ndarray:
        return self.chain.matrix

    def log_emission(self, obs) -> np.ndarray:
        """Gaussian log-densities, shape ``(len(obs), d)``."""
        y = np.asarray(obs, dtype=float).reshape(-1, 1)
        g2 = self.gamma**2
        return -((y - self.h) ** 2) / (2.0 * g2) - 0.5 * (_LOG_2PI + np.log(g2))

    def with_transition(self, matrix) -> "DiscreteHMM":
        return replace(self, chain=MarkovSpec.one_step(self.chain.states, matrix))


@dataclass(frozen=True)
class FilterTrace:
    """Filtered distributions ``pi[n]`` and log normalizers ``logc[n]``."""

    pi: np.ndarray
    logc: np.ndarray

    @property
    def loglik(self) -> float:
        return float(self.logc.sum())


@dataclass(frozen=True)
class SmoothResult:
    """Smoothed marginals ``posterior[n]`` and backward factors ``alpha[n]``."""

    posterior: np.ndarray
    alpha: np.ndarray


def simulate_hmm(hmm: DiscreteHMM, n_obs: int, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Draw a state index path and observations of length ``n_obs``."""
    rng = np.random.default_rng(seed)
    start = int(rng.choice(hmm.d, p=hmm.p0))
    idx = sample_indices(hmm.transition, n_obs - 1, rng, start)
    obs = hmm.h[idx] + hmm.gamma * rng.standard_normal(n_obs)
    return idx, obs


def _check_obs(obs) -> np.ndarray:
    y = np.asarray(obs, dtype=float).reshape(-1)
    if y.size == 0:
        raise InvalidSpecError("observation sequence is empty")
    return y


def _normalize_log(logu: np.ndarray, n: int) -> tuple[np.ndarray, float]:
    top = logu.max()
    if not np.isfinite(top):
        raise DegenerateLikelihoodError(f"all filter mass vanished at step {n}")
    u = np.exp(logu - top)
    s = u.sum()
    return u / s, float(top + np.log(s))


def _log(x: np.ndarray) -> np.ndarray:
    with np.errstate(divide="ignore"):
        return np.log(x)


def forward_filter(hmm: DiscreteHMM, obs) -> FilterTrace:
    """Filtered laws of ``X_n`` given ``Y_0..Y_n``.

    ``logc[n]`` is the log predictive density of ``Y_n``; the sum over
    ``n`` is the log-likelihood of the whole sequence.
    """
    y = _check_obs(obs)
    logpsi = hmm.log_emission(y)
    # likelihoods scaled per step so the largest entry is 1
    top = logpsi.max(axis=1)
    psi = np.exp(logpsi - top[:, None])
    lam_t = hmm.transition.T
    pi = np.empty((y.size, hmm.d))
    logc = np.empty(y.size)
    prior = hmm.p0
    for n in range(y.size):
        if n > 0:
            prior = lam_t @ pi[n - 1]
        u = psi[n] * prior
        total = u.sum()
        if total > 1e-300:
            pi[n] = u / total
            logc[n] = top[n] + np.log(total)
        else:
            pi[n], logc[n] = _normalize_log(logpsi[n] + _log(prior), n)
    return FilterTrace(pi, logc)


def _backward(hmm: DiscreteHMM, logpsi: np.ndarray, trace: FilterTrace) -> np.ndarray:
    """Backward factors with ``alpha[N] = 1`` and ``pi_{n|N} = alpha[n] * pi[n]``."""
    n_obs, d = logpsi.shape
    alpha = np.ones((n_obs, d))
    lam = hmm.transition
    for n in range(n_obs - 1, 0, -1):
        # psi_n / c_n, evaluated without leaving the log domain
        scaled = np.exp(logpsi[n] - trace.logc[n])
        alpha[n - 1] = lam @ (scaled * alpha[n])
    return alpha


def smooth(hmm: DiscreteHMM, obs) -> SmoothResult:
    """Marginals of ``X_n`` given the whole observation sequence."""
    y = _check_obs(obs)
    logpsi = hmm.log_emission(y)
    trace = forward_filter(hmm, y)
    alpha = _backward(hmm, logpsi, trace)
    post = alpha * trace.pi
    post /= post.sum(axis=1, keepdims=True)
    return SmoothResult(post, alpha)


def predict(hmm: DiscreteHMM, pi_n, k: int) -> np.ndarray:
    """Propagate a filtered law ``k`` steps forward through the kernel."""
    if k < 0:
        raise InvalidSpecError("k must be nonnegative")
    p = np.asarray(pi_n, dtype=float).copy()
    lam_t = hmm.transition.T
    for _ in range(k):
        p = lam_t @ p
    return p


def path_log_score(hmm: DiscreteHMM, obs, path) -> float:
    """Log joint density of a state index path and the observations."""
    y = _check_obs(obs)
    path = np.asarray(path, dtype=np.int64)
    logpsi = hmm.log_emission(y)
    with np.errstate(divide="ignore"):
        score = np.log(hmm.p0[path[0]]) + logpsi[0, path[0]]
        for n in range(1, y.size):
            score += np.log(hmm.transition[path[n - 1], path[n]]) + logpsi[n, path[n]]
    return float(score)


def viterbi(hmm: DiscreteHMM, obs) -> np.ndarray:
    """MAP state index path; ties go to the lowest state index."""
    y = _check_obs(obs)
    logpsi = hmm.log_emission(y)
    log_lam = _log(hmm.transition)
    delta = _log(hmm.p0) + logpsi[0]
    back = np.zeros((y.size, hmm.d), dtype=np.int64)
    for n in range(1, y.size):
        cand = delta[:, None] + log_lam  # [from, to]
        back[n] = np.argmax(cand, axis=0)
        delta = cand[back[n], np.arange(hmm.d)] + logpsi[n]
    path = np.empty(y.size, dtype=np.int64)
    path[-1] = int(np.argmax(delta))
    for n in range(y.size - 1, 0, -1):
        path[n - 1] = back[n, path[n]]
    return path


def expected_transitions(hmm: DiscreteHMM, obs) -> tuple[np.ndarray, SmoothResult, float]:
    """Per-step two-slice posteriors ``xi[n-1, j, i] = P(X_{n-1}=j, X_n=i | Y)``.

    Returns the array of shape ``(N, d, d)``, the smoothing result and the
    log-likelihood.
    """
    y = _check_obs(obs)
    logpsi = hmm.log_emission(y)
    trace = forward_filter(hmm, y)
    alpha = _backward(hmm, logpsi, trace)
    lam = hmm.transition
    scaled = np.exp(logpsi[1:] - trace.logc[1:, None]) * alpha[1:]
    xi = trace.pi[:-1, :, None] * lam[None, :, :] * scaled[:, None, :]
    post = alpha * trace.pi
    post /= post.sum(axis=1, keepdims=True)
    return xi, SmoothResult(post, alpha), trace.loglik


def baum_welch_learn(
    hmm0: DiscreteHMM, obs, max_iters: int = 100, tol: float = 1e-8
) -> tuple[DiscreteHMM, list[float]]:
    """Re-estimate the transition matrix by EM, holding ``h``, ``gamma``, ``p0`` fixed.

    Returns the final model and the log-likelihood of each iterate,
    starting with ``hmm0``. Stops early once the gain drops below ``tol``.
    """
    if max_iters < 1:
        raise InvalidSpecError("max_iters must be at least 1")
    y = _check_obs(obs)
    hmm = hmm0
    logliks: list[float] = []
    for _ in range(max_iters):
        xi, _, ll = expected_transitions(hmm, y)
        if logliks and ll - logliks[-1] < tol:
            logliks.append(ll)
            break
        logliks.append(ll)
        counts = xi.sum(axis=0)
        rows = counts.sum(axis=1)
        new = hmm.transition.copy()
        for j in range(hmm.d):
            if rows[j] > 0:
                new[j] = counts[j] / rows[j]
            else:
                warnings.warn(f"no expected transitions out of state {j}; row kept", RuntimeWarning)
        hmm = hmm.with_transition(new)
    else:
        logliks.append(forward_filter(hmm, y).loglik)
    return hmm, logliks


@dataclass(frozen=True)
class JumpFamily:
    """Integer random walk on a window of ``width`` sites.

    Transition weights are ``exp(-theta * (i - j)**2)``, normalized per
    row inside the window. States are centered on 0 and observed as
    ``h(x) = x`` plus noise ``gamma``.
    """

    width: int
    gamma: float
    p0: np.ndarray | None = None

    @property
    def states(self) -> np.ndarray:
        return np.arange(self.width, dtype=float) - (self.width // 2)

    def squared_jumps(self) -> np.ndarray:
        s = self.states
        return (s[None, :] - s[:, None]) ** 2

    def transition(self, theta: float) -> np.ndarray:
        logw = -theta * self.squared_jumps()
        return np.exp(logw - logsumexp(logw, axis=1, keepdims=True))

    def expected_squared_jump(self, theta: float) -> np.ndarray:
        """Per starting state ``E[|X_1 - X_0|^2 | X_0 = j]``."""
        return (self.transition(theta) * self.squared_jumps()).sum(axis=1)

    def hmm(self, theta: float) -> DiscreteHMM:
        p0 = self.p0 if self.p0 is not None else np.full(self.width, 1.0 / self.width)
        return DiscreteHMM(MarkovSpec.one_step(self.states, self.transition(theta)), self.states, self.gamma, p0)


THETA_BOUNDS = (1e-3, 50.0)


def match_jump_moment(
    family: JumpFamily, start_weights, target: float, bounds=THETA_BOUNDS
) -> float:
    """Find theta whose model squared jump, averaged over ``start_weights``, hits ``target``.

    The model moment is decreasing in theta, so the root is unique when
    it exists. Outside ``bounds`` the nearer bound is returned with a
    warning.
    """
    w = np.asarray(start_weights, dtype=float)

    def gap(theta):
        return float(w @ family.expected_squared_jump(theta)) - target

    lo, hi = bounds
    g_lo, g_hi = gap(lo), gap(hi)
    if g_lo <= 0:
        if g_lo < 0:
            warnings.warn("jump moment above the model range; returning lower theta bound", RuntimeWarning)
        return lo
    if g_hi >= 0:
        if g_hi > 0:
            warnings.warn("jump moment below the model range; returning upper theta bound", RuntimeWarning)
        return hi
    return float(brentq(gap, lo, hi, xtol=1e-12, rtol=1e-12))


def learn_theta(
    obs, family: JumpFamily, theta0: float, max_iters: int = 1, tol: float = 1e-6
) -> float:
    """EM re-estimation of the jump-size parameter ``theta``.

    Each iteration matches the model's expected squared jump to the
    smoothed expected squared jump under the current ``theta``.
    """
    if not theta0 > 0:
        raise InvalidSpecError("theta0 must be positive")
    y = _check_obs(obs)
    theta = float(theta0)
    sq = family.squared_jumps()
    for _ in range(max_iters):
        xi, sm, _ = expected_transitions(family.hmm(theta), y)
        n_jumps = xi.shape[0]
        target = float((xi * sq).sum()) / n_jumps
        weights = sm.posterior[:-1].sum(axis=0) / n_jumps
        new = match_jump_moment(family, weights, target)
        done = abs(new - theta) <= tol * theta
        theta = new
        if done:
            break
    return theta
