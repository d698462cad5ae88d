"""Sequential Monte Carlo: importance weighting, multinomial resampling,
a generic bootstrap particle filter and a Rao-Blackwellized filter for
regime-switching linear Gaussian models.

Random numbers come from counter-based Philox streams keyed by the run
seed. Every (step, phase) pair owns a disjoint block of the counter
space and particle ``l`` consumes the ``l``-th draw(s) of that block, so
a particle's randomness is fixed by (seed, particle id, step) no matter
how the work is split.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Callable

import numpy as np
from scipy.special import logsumexp

from .errors import DegenerateLikelihoodError, InvalidSpecError, NumericalError
from .hmm_discrete import DiscreteHMM
from .markov_core import ONE_STEP, MarkovSpec, as_distribution

PHASE_INIT, PHASE_PROPAGATE, PHASE_RESAMPLE = 0, 1, 2

_KEY_MASK = (1 << 128) - 1


def stream(seed: int, step: int, phase: int) -> np.random.Generator:
    """Generator for one (step, phase) block of the seed's counter space."""
    counter = np.array([0, 0, step, phase], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=seed & _KEY_MASK, counter=counter))


@dataclass(frozen=True)
class ParticleEnsemble:
    """Particle values with unnormalized log-weights and stream ids."""

    values: np.ndarray
    logw: np.ndarray
    stream_ids: np.ndarray

    @classmethod
    def uniform(cls, values) -> "ParticleEnsemble":
        values = np.asarray(values)
        P = values.shape[0]
        return cls(values, np.full(P, -np.log(P)), np.arange(P))

    @property
    def size(self) -> int:
        return self.logw.size

    @property
    def weights(self) -> np.ndarray:
        w = np.exp(self.logw - logsumexp(self.logw))
        return w / w.sum()

    def mean(self, g: Callable | None = None) -> np.ndarray:
        vals = self.values if g is None else g(self.values)
        return np.tensordot(self.weights, np.asarray(vals, dtype=float), axes=1)


@dataclass(frozen=True)
class ParticleModel:
    """Prior sampler, transition sampler and observation log-likelihood.

    ``sample_initial(rng, P)`` draws the time-0 particles,
    ``propagate(values, rng)`` draws one step of the prior kernel and
    ``loglik(y, values)`` returns one log-likelihood per particle.
    """

    sample_initial: Callable[[np.random.Generator, int], np.ndarray]
    propagate: Callable[[np.ndarray, np.random.Generator], np.ndarray]
    loglik: Callable[[float, np.ndarray], np.ndarray]


def _categorical(cum: np.ndarray, u: np.ndarray) -> np.ndarray:
    return np.minimum(np.searchsorted(cum, u, side="right"), cum.shape[-1] - 1)


def hmm_particle_model(hmm: DiscreteHMM) -> ParticleModel:
    """Particles carry state indices of a finite-state HMM."""
    cum_rows = np.cumsum(hmm.transition, axis=1)
    cum_p0 = np.cumsum(hmm.p0)
    g2 = hmm.gamma**2

    def sample_initial(rng, P):
        return _categorical(cum_p0, rng.random(P))

    def propagate(values, rng):
        u = rng.random(values.size)
        rows = cum_rows[values]
        return np.minimum((rows <= u[:, None]).sum(axis=1), hmm.d - 1)

    def loglik(y, values):
        return -((y - hmm.h[values]) ** 2) / (2.0 * g2)

    return ParticleModel(sample_initial, propagate, loglik)


def ess(ens: ParticleEnsemble) -> float:
    """Effective sample size ``1 / sum(w**2)``."""
    w = ens.weights
    return float(1.0 / np.dot(w, w))


def reweight(ens: ParticleEnsemble, loglik: np.ndarray) -> ParticleEnsemble:
    logw = ens.logw + loglik
    top = logsumexp(logw)
    if not np.isfinite(top):
        raise DegenerateLikelihoodError("every particle has zero likelihood")
    return replace(ens, logw=logw - top)


def sis_step(model: ParticleModel, ens: ParticleEnsemble, y, rng: np.random.Generator) -> ParticleEnsemble:
    """Propagate through the prior kernel, then weight by the likelihood of ``y``."""
    values = model.propagate(ens.values, rng)
    moved = replace(ens, values=values)
    return reweight(moved, model.loglik(y, values))


def sir_resample(ens: ParticleEnsemble, rng: np.random.Generator) -> ParticleEnsemble:
    """Multinomial resampling; afterwards every weight is exactly ``1/P``."""
    P = ens.size
    cum = np.cumsum(ens.weights)
    cum[-1] = 1.0
    idx = _categorical(cum, rng.random(P))
    return ParticleEnsemble(ens.values[idx], np.full(P, -np.log(P)), ens.stream_ids.copy())


@dataclass(frozen=True)
class PFResult:
    estimate: np.ndarray
    ess: np.ndarray
    resampled: np.ndarray


def _threshold(P: int, ess_threshold) -> float:
    delta = P / 2.0 if ess_threshold is None else float(ess_threshold)
    if not 1.0 <= delta <= P:
        raise InvalidSpecError("ess threshold must lie in [1, P]")
    return delta


def _should_resample(ess_value: float, delta: float) -> bool:
    # delta = 1 means plain SIS; ESS <= 1 only holds for a fully collapsed ensemble
    return delta > 1.0 and ess_value <= delta


def particle_filter(
    model: ParticleModel,
    obs,
    P: int,
    seed: int,
    ess_threshold: float | None = None,
    g: Callable | None = None,
) -> PFResult:
    """Bootstrap filter estimating ``E[g(X_n) | Y_0..Y_n]`` at every step.

    Resampling happens after weighting whenever ESS <= ``ess_threshold``
    (default ``P/2``). Estimates use the weighted ensemble before
    resampling.
    """
    if P < 1:
        raise InvalidSpecError("need at least one particle")
    y = np.asarray(obs, dtype=float).reshape(-1)
    delta = _threshold(P, ess_threshold)
    ens = ParticleEnsemble.uniform(model.sample_initial(stream(seed, 0, PHASE_INIT), P))
    estimates, ess_trace, resampled = [], np.empty(y.size), np.zeros(y.size, dtype=bool)
    for n in range(y.size):
        if n == 0:
            ens = reweight(ens, model.loglik(y[0], ens.values))
        else:
            ens = sis_step(model, ens, y[n], stream(seed, n, PHASE_PROPAGATE))
        estimates.append(ens.mean(g))
        ess_trace[n] = ess(ens)
        if _should_resample(ess_trace[n], delta):
            ens = sir_resample(ens, stream(seed, n, PHASE_RESAMPLE))
            resampled[n] = True
    return PFResult(np.asarray(estimates), ess_trace, resampled)


@dataclass(frozen=True)
class RegimeSSM:
    """Scalar linear Gaussian model whose coefficients follow a Markov regime.

    ``X_n = a(th_n) X_{n-1} + sigma(th_n) B_n`` and
    ``Y_n = h(th_n) X_n + gamma(th_n) W_n``; ``X_{-1} ~ N(init_mean, init_var)``
    and ``th_0 ~ p0``.
    """

    regimes: MarkovSpec
    a: np.ndarray
    sigma: np.ndarray
    h: np.ndarray
    gamma: np.ndarray
    p0: np.ndarray
    init_mean: float = 0.0
    init_var: float = 1.0

    def __post_init__(self):
        if self.regimes.kind != ONE_STEP:
            raise InvalidSpecError("regimes need a one-step chain")
        d = self.regimes.d
        for name in ("a", "sigma", "h", "gamma"):
            arr = np.asarray(getattr(self, name), dtype=float).reshape(-1)
            if arr.size != d:
                raise InvalidSpecError(f"{name} needs one entry per regime")
            object.__setattr__(self, name, arr)
        if np.any(self.gamma <= 0):
            raise InvalidSpecError("gamma must be positive in every regime")
        if self.init_var < 0:
            raise InvalidSpecError("init_var must be nonnegative")
        object.__setattr__(self, "p0", as_distribution(self.p0, atol=1e-9))


def simulate_regime_ssm(model: RegimeSSM, n_obs: int, seed: int):
    """Return regime indices, states and observations."""
    rng = np.random.default_rng(seed)
    cum = np.cumsum(model.regimes.matrix, axis=1)
    th = np.empty(n_obs, dtype=np.int64)
    x = np.empty(n_obs)
    th[0] = _categorical(np.cumsum(model.p0), rng.random())
    prev = model.init_mean + np.sqrt(model.init_var) * rng.standard_normal()
    for n in range(n_obs):
        if n > 0:
            th[n] = _categorical(cum[th[n - 1]], rng.random())
        x[n] = model.a[th[n]] * prev + model.sigma[th[n]] * rng.standard_normal()
        prev = x[n]
    y = model.h[th] * x + model.gamma[th] * rng.standard_normal(n_obs)
    return th, x, y


def regime_particle_model(model: RegimeSSM) -> ParticleModel:
    """Plain particle model over the pair (regime index, state); values have shape (P, 2)."""
    cum_rows = np.cumsum(model.regimes.matrix, axis=1)
    cum_p0 = np.cumsum(model.p0)

    def sample_initial(rng, P):
        th = _categorical(cum_p0, rng.random(P))
        prev = model.init_mean + np.sqrt(model.init_var) * rng.standard_normal(P)
        x = model.a[th] * prev + model.sigma[th] * rng.standard_normal(P)
        return np.column_stack([th, x])

    def propagate(values, rng):
        th_prev = values[:, 0].astype(np.int64)
        u = rng.random(th_prev.size)
        th = np.minimum((cum_rows[th_prev] <= u[:, None]).sum(axis=1), model.regimes.d - 1)
        x = model.a[th] * values[:, 1] + model.sigma[th] * rng.standard_normal(th.size)
        return np.column_stack([th, x])

    def loglik(y, values):
        th = values[:, 0].astype(np.int64)
        g2 = model.gamma[th] ** 2
        return -((y - model.h[th] * values[:, 1]) ** 2) / (2.0 * g2) - 0.5 * np.log(g2)

    return ParticleModel(sample_initial, propagate, loglik)


@dataclass(frozen=True)
class RBPFResult:
    regime_posterior: np.ndarray
    state_mean: np.ndarray
    ess: np.ndarray
    resampled: np.ndarray


def rbpf(model: RegimeSSM, obs, P: int, seed: int, ess_threshold: float | None = None) -> RBPFResult:
    """Rao-Blackwellized filter: sampled regimes, exact Kalman filter for the state.

    Each particle carries a regime index and the mean/variance of its
    conditional Kalman filter; weights use the Gaussian one-step
    predictive density of the observation.
    """
    y = np.asarray(obs, dtype=float).reshape(-1)
    delta = _threshold(P, ess_threshold)
    d = model.regimes.d
    cum_rows = np.cumsum(model.regimes.matrix, axis=1)
    rng0 = stream(seed, 0, PHASE_INIT)
    th = _categorical(np.cumsum(model.p0), rng0.random(P))
    mean = np.full(P, model.init_mean, dtype=float)
    var = np.full(P, model.init_var, dtype=float)
    logw = np.full(P, -np.log(P))
    ids = np.arange(P)
    post = np.empty((y.size, d))
    xhat = np.empty(y.size)
    ess_trace = np.empty(y.size)
    resampled = np.zeros(y.size, dtype=bool)
    for n in range(y.size):
        if n > 0:
            u = stream(seed, n, PHASE_PROPAGATE).random(P)
            th = np.minimum((cum_rows[th] <= u[:, None]).sum(axis=1), d - 1)
        a, s, h, g = model.a[th], model.sigma[th], model.h[th], model.gamma[th]
        pred_var = a**2 * var + s**2
        mu = h * a * mean
        v = h**2 * pred_var + g**2
        if np.any(v <= 0):
            raise NumericalError(f"nonpositive predictive variance at step {n}")
        gain = h * pred_var / v
        mean = a * mean + gain * (y[n] - mu)
        var = pred_var - gain * h * pred_var
        logw = logw - 0.5 * ((y[n] - mu) ** 2 / v + np.log(v))
        top = logsumexp(logw)
        if not np.isfinite(top):
            raise DegenerateLikelihoodError(f"every particle has zero likelihood at step {n}")
        logw = logw - top
        w = np.exp(logw)
        w /= w.sum()
        post[n] = np.bincount(th, weights=w, minlength=d)
        xhat[n] = w @ mean
        ess_trace[n] = 1.0 / np.dot(w, w)
        if _should_resample(ess_trace[n], delta):
            ens = sir_resample(ParticleEnsemble(np.column_stack([th, mean, var]), logw, ids), stream(seed, n, PHASE_RESAMPLE))
            th = ens.values[:, 0].astype(np.int64)
            mean, var, logw = ens.values[:, 1].copy(), ens.values[:, 2].copy(), ens.logw
            resampled[n] = True
    return RBPFResult(post, xhat, ess_trace, resampled)
