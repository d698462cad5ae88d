"""Orthonormal periodized discrete wavelet transform.

Haar is always available. Daubechies ``db-k`` filters are built by
spectral factorization when ``EXTENDED_WAVELETS`` is true. Symlets and
coiflets are not built.
"""

from __future__ import annotations

from functools import lru_cache
from math import comb

import numpy as np

from .errors import InvalidSpecError

EXTENDED_WAVELETS = True

_MAX_DB_ORDER = 10


@lru_cache(maxsize=None)
def _daubechies(order: int) -> tuple[float, ...]:
    """Minimum-phase Daubechies lowpass filter with ``order`` vanishing moments."""
    if order == 1:
        return (2**-0.5, 2**-0.5)
    # P(y) = sum_k C(order-1+k, k) y^k with y = sin^2(w/2); pick roots inside the unit circle
    p = [comb(order - 1 + k, k) for k in range(order)]
    y_roots = np.roots(p[::-1])
    z_roots = []
    for y in y_roots:
        # y = (2 - z - 1/z)/4  =>  z^2 - (2 - 4y) z + 1 = 0
        pair = np.roots([1.0, -(2.0 - 4.0 * y), 1.0])
        z_roots.append(pair[np.argmin(np.abs(pair))])
    poly = np.array([1.0])
    for _ in range(order):
        poly = np.convolve(poly, [1.0, 1.0])
    for z in z_roots:
        poly = np.convolve(poly, [1.0, -z])
    h = np.real(poly)
    h = h * (np.sqrt(2.0) / h.sum())
    return tuple(h[::-1])


def wavelet_filter(family: str) -> np.ndarray:
    """Lowpass analysis filter for ``"haar"`` or ``"db-k"``."""
    name = family.lower().replace("_", "-")
    if name in ("haar", "db-1", "db1"):
        return np.array(_daubechies(1))
    if name.startswith("db") and EXTENDED_WAVELETS:
        try:
            order = int(name[2:].lstrip("-"))
        except ValueError:
            raise InvalidSpecError(f"unknown wavelet family {family!r}") from None
        if not 1 <= order <= _MAX_DB_ORDER:
            raise InvalidSpecError(f"db order must be in 1..{_MAX_DB_ORDER}")
        return np.array(_daubechies(order))
    raise InvalidSpecError(f"unknown or unavailable wavelet family {family!r}")


def _highpass(h: np.ndarray) -> np.ndarray:
    L = h.size
    return np.array([(-1) ** m * h[L - 1 - m] for m in range(L)])


def _analysis_step(x: np.ndarray, h: np.ndarray, g: np.ndarray):
    n = x.size
    idx = (2 * np.arange(n // 2)[:, None] + np.arange(h.size)[None, :]) % n
    window = x[idx]
    return window @ h, window @ g


def _synthesis_step(a: np.ndarray, d: np.ndarray, h: np.ndarray, g: np.ndarray) -> np.ndarray:
    n = 2 * a.size
    idx = (2 * np.arange(a.size)[:, None] + np.arange(h.size)[None, :]) % n
    out = np.zeros(n)
    np.add.at(out, idx, a[:, None] * h[None, :] + d[:, None] * g[None, :])
    return out


def dwt(x, family: str = "haar", levels: int | None = None) -> tuple[np.ndarray, list[np.ndarray]]:
    """Multilevel transform of a length ``2**J`` signal.

    Returns the coarsest approximation and the detail bands, finest first
    (``details[0]`` is level 1).
    """
    x = np.asarray(x, dtype=float)
    n = x.size
    if n < 2 or n & (n - 1):
        raise InvalidSpecError("dwt needs a power-of-two length")
    max_levels = n.bit_length() - 1
    levels = max_levels if levels is None else levels
    if not 1 <= levels <= max_levels:
        raise InvalidSpecError(f"levels must be in 1..{max_levels}")
    h = wavelet_filter(family)
    g = _highpass(h)
    details = []
    a = x
    for _ in range(levels):
        a, d = _analysis_step(a, h, g)
        details.append(d)
    return a, details


def idwt(approx, details, family: str = "haar") -> np.ndarray:
    """Inverse of :func:`dwt`."""
    h = wavelet_filter(family)
    g = _highpass(h)
    a = np.asarray(approx, dtype=float)
    for d in reversed(details):
        a = _synthesis_step(a, np.asarray(d, dtype=float), h, g)
    return a
