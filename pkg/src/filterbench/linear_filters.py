"""Linear estimators: matched filter, FFT band filter, wavelet shrinkage,
Wiener smoother, discrete Kalman filter and the scalar Kalman-Bucy filter.

SNR convention used throughout: ``mean(X**2) / mean((X - Xhat)**2)``,
i.e. per-sample signal power over per-sample squared error.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_factor, cho_solve, lapack

from .errors import InvalidSpecError, NumericalError
from .wavelets import dwt, idwt

COND_WARN = 1e12


@dataclass(frozen=True)
class SignalEstimate:
    """An estimated signal with its error statistics against the truth.

    ``snr`` and ``mse`` are NaN when no truth was supplied.
    """

    estimate: np.ndarray
    snr: float
    mse: float

    @property
    def rmse(self) -> float:
        return float(np.sqrt(self.mse))


def snr_mse(truth, estimate) -> tuple[float, float]:
    x = np.asarray(truth, dtype=float)
    err = np.mean((x - np.asarray(estimate, dtype=float)) ** 2)
    power = np.mean(x**2)
    snr = np.inf if err == 0 else power / err
    return float(snr), float(err)


def _estimate(estimate, truth) -> SignalEstimate:
    if truth is None:
        return SignalEstimate(estimate, float("nan"), float("nan"))
    return SignalEstimate(estimate, *snr_mse(truth, estimate))


def reed_filter(R, X) -> tuple[np.ndarray, float]:
    """Matched filter ``H = R^{-1} X`` and the attained SNR ``X' R^{-1} X``."""
    R = np.asarray(R, dtype=float)
    X = np.asarray(X, dtype=float)
    try:
        factor = cho_factor(R)
    except np.linalg.LinAlgError:
        raise NumericalError("noise covariance is singular or not positive definite") from None
    H = cho_solve(factor, X)
    return H, float(X @ H)


def filter_snr(H, R, X) -> float:
    """SNR ``(H'X)^2 / (H'RH)`` of a linear filter against template ``X``."""
    H = np.asarray(H, dtype=float)
    return float((H @ X) ** 2 / (H @ np.asarray(R) @ H))


def _keep_mask(n: int, keep) -> np.ndarray:
    keep = np.asarray(keep)
    if keep.dtype == bool:
        if keep.size != n:
            raise InvalidSpecError("boolean keep mask has the wrong length")
        return keep.copy()
    mask = np.zeros(n, dtype=bool)
    idx = keep.astype(np.int64).reshape(-1)
    if np.any(idx < 0) or np.any(idx >= n):
        raise InvalidSpecError("frequency index out of range")
    mask[idx] = True
    return mask


def fft_bandpass(Y, keep, truth=None) -> SignalEstimate:
    """Zero every frequency outside ``keep`` and transform back.

    ``keep`` is an index set or boolean mask over ``0..N-1`` and must be
    closed under ``k -> (N - k) % N`` so the output is real.
    """
    y = np.asarray(Y, dtype=float)
    n = y.size
    mask = _keep_mask(n, keep)
    if not np.array_equal(mask, mask[(-np.arange(n)) % n]):
        raise InvalidSpecError("keep set is not closed under conjugate frequencies")
    # forward transform uses exp(+2 pi i k n / N), inverse exp(-...)
    coeffs = n * np.fft.ifft(y)
    xhat = np.fft.fft(np.where(mask, coeffs, 0.0)) / n
    if np.max(np.abs(xhat.imag), initial=0.0) > 1e-9 * max(1.0, np.abs(y).max()):
        raise NumericalError("band filter output is not real")
    return _estimate(xhat.real, truth)


def low_band(n: int, half_width: int) -> np.ndarray:
    """Indices of the lowest ``half_width`` frequencies and their conjugates (plus 0)."""
    k = np.arange(min(half_width, n - 1) + 1)
    return np.unique(np.concatenate([k, (-k) % n]))


def fft_lowpass(Y, half_width: int, reflect: bool = True, truth=None) -> SignalEstimate:
    """Low-band filter, optionally on the mirrored signal ``[Y, Y[::-1]]``.

    Mirroring removes the jump between the two ends that a periodic
    transform otherwise sees. ``half_width`` counts frequencies of the
    transformed (possibly doubled) signal.
    """
    y = np.asarray(Y, dtype=float)
    ext = np.concatenate([y, y[::-1]]) if reflect else y
    est = fft_bandpass(ext, low_band(ext.size, half_width)).estimate[: y.size]
    return _estimate(est, truth)


def wavelet_denoise(Y, family: str = "haar", levels: int | None = None, kill=(), truth=None) -> SignalEstimate:
    """Zero the detail bands listed in ``kill`` (1 = finest) and reconstruct.

    Signals whose length is not a power of two are mirror-padded to the
    next power of two and trimmed after synthesis.
    """
    y = np.asarray(Y, dtype=float)
    n = y.size
    size = 1 << max(1, (n - 1).bit_length())
    padded = y
    if size != n:
        pad = size - n
        padded = np.concatenate([y, y[::-1][:pad]]) if pad <= n else np.pad(y, (0, pad), mode="symmetric")
    approx, details = dwt(padded, family, levels)
    for level in kill:
        if not 1 <= level <= len(details):
            raise InvalidSpecError(f"cannot kill level {level}; have {len(details)}")
        details[level - 1] = np.zeros_like(details[level - 1])
    est = idwt(approx, details, family)[:n]
    return _estimate(est, truth)


def wiener_filter(Y, prior_mean, Qcov, Rcov, truth=None) -> SignalEstimate:
    """Linear MMSE estimate ``mean + Q (Q + R)^{-1} (Y - mean)`` via two solves."""
    y = np.asarray(Y, dtype=float)
    mean = np.broadcast_to(np.asarray(prior_mean, dtype=float), y.shape)
    Q = np.asarray(Qcov, dtype=float)
    S = Q + np.asarray(Rcov, dtype=float)
    try:
        factor = cho_factor(S)
    except np.linalg.LinAlgError:
        raise NumericalError("Q + R is not positive definite") from None
    rcond, info = lapack.dpocon(factor[0], np.linalg.norm(S, 1), uplo="L" if factor[1] else "U")
    if info == 0 and rcond * COND_WARN < 1.0:
        warnings.warn(f"Q + R is ill-conditioned (condition ~ {1.0 / max(rcond, 1e-300):.3g})", RuntimeWarning)
    z = cho_solve(factor, y - mean)
    return _estimate(mean + Q @ z, truth)


def _check_psd(name: str, m: np.ndarray):
    if not np.allclose(m, m.T, atol=1e-12):
        raise InvalidSpecError(f"{name} must be symmetric")
    if np.linalg.eigvalsh(m).min() < -1e-10:
        raise InvalidSpecError(f"{name} must be positive semidefinite")


@dataclass(frozen=True)
class GaussLinearSSM:
    """``X_n = A X_{n-1} + B_n``, ``Y_n = H X_n + W_n``.

    ``init_mean``/``init_cov`` describe ``X_{-1}``, so the first
    observation is processed after one prediction step.
    """

    A: np.ndarray
    H: np.ndarray
    Qcov: np.ndarray
    Rcov: np.ndarray
    init_mean: np.ndarray
    init_cov: np.ndarray

    def __post_init__(self):
        A = np.atleast_2d(np.asarray(self.A, dtype=float))
        H = np.atleast_2d(np.asarray(self.H, dtype=float))
        Q = np.atleast_2d(np.asarray(self.Qcov, dtype=float))
        R = np.atleast_2d(np.asarray(self.Rcov, dtype=float))
        m0 = np.asarray(self.init_mean, dtype=float).reshape(-1)
        P0 = np.atleast_2d(np.asarray(self.init_cov, dtype=float))
        nx, ny = A.shape[0], H.shape[0]
        if A.shape != (nx, nx) or H.shape != (ny, nx) or Q.shape != (nx, nx) or R.shape != (ny, ny):
            raise InvalidSpecError("inconsistent state-space dimensions")
        if m0.size != nx or P0.shape != (nx, nx):
            raise InvalidSpecError("initial mean/covariance have the wrong size")
        for name, m in (("Qcov", Q), ("Rcov", R), ("init_cov", P0)):
            _check_psd(name, m)
        for name, v in (("A", A), ("H", H), ("Qcov", Q), ("Rcov", R), ("init_mean", m0), ("init_cov", P0)):
            object.__setattr__(self, name, v)


@dataclass(frozen=True)
class KalmanResult:
    mean: np.ndarray
    cov: np.ndarray
    gain: np.ndarray
    innovation: np.ndarray
    innovation_cov: np.ndarray


def kalman_filter(model: GaussLinearSSM, obs) -> KalmanResult:
    """Filtered means and covariances for every observation."""
    y = np.asarray(obs, dtype=float)
    ny = model.H.shape[0]
    y = y.reshape(-1, ny)
    n_obs = y.shape[0]
    nx = model.A.shape[0]
    A, H, Q, R = model.A, model.H, model.Qcov, model.Rcov
    means = np.empty((n_obs, nx))
    covs = np.empty((n_obs, nx, nx))
    gains = np.empty((n_obs, nx, ny))
    innov = np.empty((n_obs, ny))
    innov_cov = np.empty((n_obs, ny, ny))
    x, P = model.init_mean, model.init_cov
    eye = np.eye(nx)
    for n in range(n_obs):
        x_pred = A @ x
        P_pred = A @ P @ A.T + Q
        S = H @ P_pred @ H.T + R
        try:
            G = np.linalg.solve(S.T, (P_pred @ H.T).T).T
        except np.linalg.LinAlgError:
            raise NumericalError(f"innovation covariance is singular at step {n}") from None
        v = y[n] - H @ x_pred
        x = x_pred + G @ v
        P = (eye - G @ H) @ P_pred
        P = 0.5 * (P + P.T)
        means[n], covs[n], gains[n], innov[n], innov_cov[n] = x, P, G, v, S
    return KalmanResult(means, covs, gains, innov, innov_cov)


@dataclass(frozen=True)
class KalmanBucyResult:
    times: np.ndarray
    closed_form: np.ndarray
    numeric: np.ndarray
    mean: np.ndarray | None
    divergent: bool


def riccati_closed_form(a, sigma, h, gamma, Sigma0, t) -> np.ndarray:
    """Solution of ``dS/dt = 2aS - (h/gamma)^2 S^2 + sigma^2`` from ``S(0) = Sigma0``."""
    t = np.asarray(t, dtype=float)
    if h == 0:
        if a == 0:
            return Sigma0 + sigma**2 * t
        c = sigma**2 / (2.0 * a)
        return (Sigma0 + c) * np.exp(2.0 * a * t) - c
    root = np.sqrt(a**2 * gamma**2 + h**2 * sigma**2)
    lo = (a * gamma**2 - gamma * root) / h**2
    hi = (a * gamma**2 + gamma * root) / h**2
    if Sigma0 == hi:
        return np.full_like(t, hi)
    K = (Sigma0 - lo) / (Sigma0 - hi)
    # (S - lo)/(S - hi) = K exp(2 beta t); written with exp(-2 beta t) to avoid overflow
    decay = np.exp(-(h**2 / gamma**2) * (hi - lo) * t)
    return (lo * decay - K * hi) / (decay - K)


def riccati_limits(a, sigma, h, gamma) -> tuple[float, float, float]:
    """Return the two Riccati equilibria and the merge rate ``beta``."""
    root = np.sqrt(a**2 * gamma**2 + h**2 * sigma**2)
    if h == 0:
        raise InvalidSpecError("equilibria need h != 0")
    return (a * gamma**2 - gamma * root) / h**2, (a * gamma**2 + gamma * root) / h**2, root / gamma


def _rk4_riccati(a, sigma, h, gamma, Sigma0, t_grid, max_step) -> np.ndarray:
    def f(s):
        return 2.0 * a * s - (h**2 / gamma**2) * s**2 + sigma**2

    out = np.empty(t_grid.size)
    s = float(Sigma0)
    out[0] = s
    for k in range(1, t_grid.size):
        span = t_grid[k] - t_grid[k - 1]
        m = max(1, int(np.ceil(span / max_step)))
        dt = span / m
        for _ in range(m):
            k1 = f(s)
            k2 = f(s + 0.5 * dt * k1)
            k3 = f(s + 0.5 * dt * k2)
            k4 = f(s + dt * k3)
            s += dt * (k1 + 2 * k2 + 2 * k3 + k4) / 6.0
        out[k] = s
    return out


def kalman_bucy(a, sigma, h, gamma, Sigma0, t_grid, dy=None, x0: float = 0.0, max_step: float = 1e-3) -> KalmanBucyResult:
    """Scalar continuous-time Kalman filter for ``dX = aX dt + sigma dB``, ``dY = hX dt + gamma dW``.

    Returns the Riccati solution in closed form and by RK4, and when
    observation increments ``dy`` (one per grid interval) are given the
    Euler-discretized filter mean started at ``x0``.
    """
    if not gamma > 0:
        raise InvalidSpecError("gamma must be positive")
    t = np.asarray(t_grid, dtype=float)
    closed = riccati_closed_form(a, sigma, h, gamma, Sigma0, t)
    numeric = _rk4_riccati(a, sigma, h, gamma, Sigma0, t, max_step)
    divergent = h == 0 and a > 0
    if divergent:
        warnings.warn("h = 0 with a > 0: the error variance grows without bound", RuntimeWarning)
    mean = None
    if dy is not None:
        dy = np.asarray(dy, dtype=float)
        if dy.size != t.size - 1:
            raise InvalidSpecError("need one observation increment per grid interval")
        mean = np.empty(t.size)
        mean[0] = x0
        for k in range(dy.size):
            dt = t[k + 1] - t[k]
            gain = closed[k] * h / gamma**2
            mean[k + 1] = mean[k] + a * mean[k] * dt + gain * (dy[k] - h * mean[k] * dt)
    return KalmanBucyResult(t, closed, numeric, mean, divergent)


@dataclass(frozen=True)
class RandomWalkData:
    truth: np.ndarray
    obs: np.ndarray
    step_var: float
    noise_var: float


def simulate_random_walk(seed: int, n: int = 1000, snr_y: float = 7.53) -> RandomWalkData:
    """Brownian motion on ``[0, 1]`` sampled at ``n`` points plus white noise.

    The noise is rescaled so the raw observations have exactly the
    requested SNR.
    """
    rng = np.random.default_rng(seed)
    q = 1.0 / n
    x = np.cumsum(np.sqrt(q) * rng.standard_normal(n))
    w = rng.standard_normal(n)
    noise_var = np.mean(x**2) / (snr_y * np.mean(w**2))
    return RandomWalkData(x, x + np.sqrt(noise_var) * w, q, float(noise_var))


def random_walk_covariance(n: int, step_var: float) -> np.ndarray:
    idx = np.arange(1, n + 1)
    return step_var * np.minimum.outer(idx, idx).astype(float)


# Settings tuned once for n = 1000 at SNR_Y ~ 7.5; see README.
RW_BAND_HALF_WIDTH = 35
RW_HAAR_KILL = (1, 2, 3, 4)


def random_walk_comparison(seed: int, n: int = 1000, snr_y: float = 7.53) -> dict[str, SignalEstimate]:
    """Run raw, bandpass, haar, wiener and kalman on one simulated random walk."""
    data = simulate_random_walk(seed, n, snr_y)
    x, y = data.truth, data.obs
    model = GaussLinearSSM([[1.0]], [[1.0]], [[data.step_var]], [[data.noise_var]], [0.0], [[0.0]])
    kf = kalman_filter(model, y)
    return {
        "raw": _estimate(y.copy(), x),
        "bandpass": fft_lowpass(y, RW_BAND_HALF_WIDTH, reflect=True, truth=x),
        "haar": wavelet_denoise(y, "haar", kill=RW_HAAR_KILL, truth=x),
        "wiener": wiener_filter(y, 0.0, random_walk_covariance(n, data.step_var), data.noise_var * np.eye(n), truth=x),
        "kalman": _estimate(kf.mean[:, 0], x),
    }
