"""Finite-state Markov chains: generators, kernels, invariants, spectra.

A chain is described by :class:`MarkovSpec`, which holds either a rate
matrix (``kind="generator"``) or a one-step transition matrix
(``kind="one-step"``) over an ordered list of real state values.
Distributions over the states are plain 1-d float arrays; use
:func:`as_distribution` to validate one.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy.linalg import expm

from .errors import InvalidSpecError, NoUniqueInvariantError, NotPrimitiveError

GENERATOR = "generator"
ONE_STEP = "one-step"

_ROW_TOL = 1e-10


@dataclass(frozen=True)
class MarkovSpec:
    """Finite-state chain over ordered real ``states``.

    ``matrix`` holds rates when ``kind == "generator"`` and transition
    probabilities (rows indexed by the current state) when
    ``kind == "one-step"``.
    """

    states: np.ndarray
    kind: str
    matrix: np.ndarray

    def __post_init__(self):
        states = np.asarray(self.states, dtype=float).reshape(-1)
        matrix = np.asarray(self.matrix, dtype=float)
        d = states.size
        if d < 1:
            raise InvalidSpecError("a chain needs at least one state")
        if matrix.shape != (d, d):
            raise InvalidSpecError(f"matrix shape {matrix.shape} does not match {d} states")
        if not np.all(np.isfinite(matrix)):
            raise InvalidSpecError("matrix has non-finite entries")
        if self.kind == GENERATOR:
            off = matrix - np.diag(np.diag(matrix))
            if np.any(off < 0):
                raise InvalidSpecError("generator has negative off-diagonal rates")
            if np.max(np.abs(matrix.sum(axis=1))) > _ROW_TOL * max(1.0, np.abs(matrix).max()):
                raise InvalidSpecError("generator rows must sum to 0")
        elif self.kind == ONE_STEP:
            if np.any(matrix < 0) or np.any(matrix > 1):
                raise InvalidSpecError("transition probabilities must lie in [0, 1]")
            if np.max(np.abs(matrix.sum(axis=1) - 1.0)) > _ROW_TOL:
                raise InvalidSpecError("transition rows must sum to 1")
        else:
            raise InvalidSpecError(f"unknown chain kind {self.kind!r}")
        states.setflags(write=False)
        matrix = matrix.copy()
        matrix.setflags(write=False)
        object.__setattr__(self, "states", states)
        object.__setattr__(self, "matrix", matrix)

    @property
    def d(self) -> int:
        return self.states.size

    @classmethod
    def generator(cls, states: Sequence[float], rates) -> "MarkovSpec":
        return cls(np.asarray(states, dtype=float), GENERATOR, np.asarray(rates, dtype=float))

    @classmethod
    def one_step(cls, states: Sequence[float], probs) -> "MarkovSpec":
        return cls(np.asarray(states, dtype=float), ONE_STEP, np.asarray(probs, dtype=float))

    def kernel(self, dt: float = 1.0) -> np.ndarray:
        """Transition matrix over ``dt`` (time for generators, steps for kernels)."""
        if self.kind == GENERATOR:
            return semigroup(self, dt)
        steps = int(round(dt))
        if steps != dt or steps < 0:
            raise InvalidSpecError("one-step chains only advance by whole steps")
        return np.linalg.matrix_power(self.matrix, steps)


@dataclass(frozen=True)
class SdePath:
    """Sampled path: strictly increasing ``times`` and matching ``values``."""

    times: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        times = np.asarray(self.times, dtype=float).reshape(-1)
        values = np.asarray(self.values, dtype=float)
        if values.shape[0] != times.size:
            raise InvalidSpecError("times and values must have equal length")
        if times.size > 1 and np.any(np.diff(times) <= 0):
            raise InvalidSpecError("times must be strictly increasing")
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "values", values)

    def __len__(self):
        return self.times.size


def as_distribution(mass, atol: float = 1e-12) -> np.ndarray:
    """Validate a probability vector and return it as a float array."""
    p = np.asarray(mass, dtype=float).reshape(-1)
    if p.size == 0 or np.any(p < 0) or not np.all(np.isfinite(p)):
        raise InvalidSpecError("a distribution needs finite nonnegative entries")
    if abs(p.sum() - 1.0) > atol:
        raise InvalidSpecError(f"distribution sums to {p.sum()!r}, not 1")
    return p


def semigroup(spec: MarkovSpec, dt: float) -> np.ndarray:
    """Return ``exp(Q dt)`` for a generator, as a row-stochastic matrix."""
    if spec.kind != GENERATOR:
        raise InvalidSpecError("semigroup needs a generator")
    if dt < 0:
        raise InvalidSpecError("dt must be nonnegative")
    # expm is scaling-and-squaring with a Pade approximant
    kernel = expm(spec.matrix * dt)
    kernel = np.clip(kernel, 0.0, None)
    return kernel / kernel.sum(axis=1, keepdims=True)


def invariant_distribution(spec: MarkovSpec) -> np.ndarray:
    """Solve the balance equations with a normalization row appended."""
    d = spec.d
    if spec.kind == GENERATOR:
        balance = spec.matrix.T
    else:
        balance = spec.matrix.T - np.eye(d)
    system = np.vstack([balance, np.ones((1, d))])
    rhs = np.zeros(d + 1)
    rhs[-1] = 1.0
    if np.linalg.matrix_rank(system, tol=1e-10) < d:
        raise NoUniqueInvariantError("balance equations have no unique solution")
    mu, *_ = np.linalg.lstsq(system, rhs, rcond=None)
    mu = np.clip(mu, 0.0, None)
    return mu / mu.sum()


def is_primitive(matrix: np.ndarray) -> bool:
    """Wielandt test: some power up to (d-1)^2+1 is entrywise positive."""
    pattern = (np.asarray(matrix) > 0).astype(np.int64)
    d = pattern.shape[0]
    power = pattern.copy()
    for _ in range((d - 1) ** 2):
        power = np.minimum(power @ pattern, 1)
    return bool(np.all(power > 0))


def spectral_gap(spec: MarkovSpec) -> tuple[float, float]:
    """Second-largest eigenvalue modulus of a primitive kernel, and 1 minus it."""
    if spec.kind != ONE_STEP:
        raise InvalidSpecError("spectral_gap needs a one-step kernel")
    if not is_primitive(spec.matrix):
        raise NotPrimitiveError("kernel is not primitive")
    if spec.d == 1:
        return 0.0, 1.0
    eig = np.linalg.eigvals(spec.matrix)
    order = np.lexsort((-eig.real, -np.abs(eig)))
    beta2 = float(np.abs(eig[order[1]]))
    return beta2, 1.0 - beta2


def _draw_index(cum_row: np.ndarray, u: float) -> int:
    return min(int(np.searchsorted(cum_row, u, side="right")), cum_row.size - 1)


def _initial_index(spec: MarkovSpec, initial, rng: np.random.Generator) -> int:
    if initial is None:
        return 0
    if np.isscalar(initial):
        idx = int(initial)
        if not 0 <= idx < spec.d:
            raise InvalidSpecError(f"initial state index {idx} out of range")
        return idx
    p0 = as_distribution(initial, atol=1e-9)
    return _draw_index(np.cumsum(p0), rng.random())


def sample_indices(kernel: np.ndarray, n_steps: int, rng: np.random.Generator, start: int) -> np.ndarray:
    """Sample ``n_steps`` transitions of a fixed kernel from state ``start``."""
    cum = np.cumsum(kernel, axis=1)
    out = np.empty(n_steps + 1, dtype=np.int64)
    out[0] = start
    u = rng.random(n_steps)
    for k in range(n_steps):
        out[k + 1] = _draw_index(cum[out[k]], u[k])
    return out


def simulate_chain(spec: MarkovSpec, t_grid, seed: int, initial=None) -> SdePath:
    """Sample the chain at the times in ``t_grid``.

    For one-step chains the grid must hold integer step counts.
    ``initial`` is a state index, a distribution to draw from, or None
    (start in state 0). Values in the returned path are state values.
    """
    t_grid = np.asarray(t_grid, dtype=float).reshape(-1)
    rng = np.random.default_rng(seed)
    idx = np.empty(t_grid.size, dtype=np.int64)
    idx[0] = _initial_index(spec, initial, rng)
    cache: dict[float, np.ndarray] = {}
    u = rng.random(max(t_grid.size - 1, 0))
    for k in range(1, t_grid.size):
        step = float(t_grid[k] - t_grid[k - 1])
        if step not in cache:
            cache[step] = np.cumsum(spec.kernel(step), axis=1)
        idx[k] = _draw_index(cache[step][idx[k - 1]], u[k - 1])
    return SdePath(t_grid, spec.states[idx])


def simulate_sde(
    drift: Callable[[float], float],
    diffusion: Callable[[float], float],
    x0: float,
    dt: float,
    n: int,
    seed: int,
) -> SdePath:
    """Euler scheme for dX = a(X) dt + sigma(X) dB with ``n`` steps."""
    if dt <= 0:
        raise InvalidSpecError("dt must be positive")
    rng = np.random.default_rng(seed)
    noise = rng.standard_normal(n) * np.sqrt(dt)
    x = np.empty(n + 1)
    x[0] = x0
    for k in range(n):
        x[k + 1] = x[k] + drift(x[k]) * dt + diffusion(x[k]) * noise[k]
    return SdePath(dt * np.arange(n + 1), x)
