"""Config-driven experiments: each kind maps (config, seed) to CSV series and a JSON summary."""

from __future__ import annotations

import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Mapping

import numpy as np

from . import continuous_filters as cf
from . import heston_sv as hs
from . import hmm_discrete as hd
from . import linear_filters as lf
from . import particle as pf
from . import stability as st
from .errors import DataError, InvalidSpecError
from .io import (
    config_hash,
    describe_version,
    emit_json,
    emit_results,
    hmm_from_dict,
    ingest_column,
    ingest_csv,
    load_hmm,
    load_json,
    substream_seed,
)
from .markov_core import MarkovSpec, invariant_distribution


@dataclass
class ExperimentConfig:
    kind: str
    seed: int | None = None
    out: Path | None = None
    params: dict[str, Any] = field(default_factory=dict)
    model: str | None = None
    base_dir: Path = field(default_factory=Path.cwd)

    @classmethod
    def from_mapping(cls, cfg: Mapping, base_dir=None) -> "ExperimentConfig":
        if "kind" not in cfg:
            raise InvalidSpecError("config needs a 'kind'")
        unknown = set(cfg) - {"kind", "seed", "out", "params", "model"}
        if unknown:
            raise InvalidSpecError(f"unknown config key(s): {', '.join(sorted(unknown))}")
        seed = cfg.get("seed")
        return cls(
            kind=str(cfg["kind"]),
            seed=None if seed is None else int(seed),
            out=None if cfg.get("out") is None else Path(cfg["out"]),
            params=dict(cfg.get("params") or {}),
            model=cfg.get("model"),
            base_dir=Path.cwd() if base_dir is None else Path(base_dir),
        )

    def as_dict(self) -> dict:
        return {"kind": self.kind, "seed": self.seed, "model": self.model, "params": self.params}

    def resolve(self, ref) -> Path:
        path = Path(ref)
        return path if path.is_absolute() else self.base_dir / path

    def require_seed(self) -> int:
        if self.seed is None:
            raise InvalidSpecError(f"kind {self.kind!r} is stochastic and needs a seed")
        return self.seed

    def seed_for(self, name: str) -> int:
        return substream_seed(self.require_seed(), name)


@dataclass
class Outcome:
    series: dict[str, Any]
    summary: dict[str, Any]
    extra: dict[str, dict[str, Any]] = field(default_factory=dict)


def max_workers() -> int:
    try:
        return max(1, int(os.environ.get("FILTERBENCH_THREADS", "1")))
    except ValueError:
        raise InvalidSpecError("FILTERBENCH_THREADS must be an integer") from None


def _hmm(cfg: ExperimentConfig) -> hd.DiscreteHMM:
    if cfg.model is not None:
        return load_hmm(cfg.resolve(cfg.model))
    if "hmm" in cfg.params:
        return hmm_from_dict(cfg.params["hmm"])
    raise InvalidSpecError(f"kind {cfg.kind!r} needs an HMM model file or params.hmm")


def _obs_or_simulate(cfg: ExperimentConfig, hmm: hd.DiscreteHMM, column: str = "y") -> np.ndarray:
    if "obs" in cfg.params:
        return ingest_column(cfg.resolve(cfg.params["obs"]), column)
    n = int(cfg.params.get("n_obs", 200))
    return hd.simulate_hmm(hmm, n, cfg.seed_for("observations"))[1]


def _columns(prefix: str, matrix: np.ndarray) -> dict[str, np.ndarray]:
    width = len(str(matrix.shape[1]))
    return {f"{prefix}_{i + 1:0{width}d}": matrix[:, i] for i in range(matrix.shape[1])}


def run_random_walk(cfg: ExperimentConfig) -> Outcome:
    n = int(cfg.params.get("n", 1000))
    snr_y = float(cfg.params.get("snr_y", 7.53))
    seed = cfg.seed_for("random-walk")
    data = lf.simulate_random_walk(seed, n, snr_y)
    results = lf.random_walk_comparison(seed, n, snr_y)
    series = {"n": np.arange(n), "truth": data.truth, "measurement": data.obs}
    series.update({name: r.estimate for name, r in results.items()})
    table = {
        "method": list(results),
        "snr": [r.snr for r in results.values()],
        "mse": [r.mse for r in results.values()],
    }
    summary = {name: {"snr": r.snr, "mse": r.mse} for name, r in results.items()}
    return Outcome(series, {"methods": summary}, {"methods": table})


def _linear_data(cfg: ExperimentConfig):
    p = cfg.params
    if "data" in p:
        path = cfg.resolve(p["data"])
        y = ingest_column(path, "measurement")
        try:
            x = ingest_column(path, "truth")
        except DataError:
            x = None
        if "noise_var" not in p and p["method"] in ("wiener", "kalman"):
            raise InvalidSpecError("noise_var is required with external data")
        return x, y, float(p.get("step_var", 1.0 / y.size)), float(p.get("noise_var", 1.0))
    data = lf.simulate_random_walk(cfg.seed_for("random-walk"), int(p.get("n", 1000)), float(p.get("snr_y", 7.53)))
    return data.truth, data.obs, float(p.get("step_var", data.step_var)), float(p.get("noise_var", data.noise_var))


def run_linear(cfg: ExperimentConfig) -> Outcome:
    p = cfg.params
    method = p.get("method")
    if method == "reed":
        R = np.asarray(p["R"], dtype=float)
        X = np.asarray(p["X"], dtype=float)
        H, snr = lf.reed_filter(R, X)
        return Outcome({"n": np.arange(X.size), "template": X, "filter": H}, {"snr_max": snr})
    if method == "kalman-bucy":
        return _run_kalman_bucy(cfg)
    if method not in ("bandpass", "wavelet", "wiener", "kalman"):
        raise InvalidSpecError(f"unknown linear method {method!r}")
    x, y, q, r = _linear_data(cfg)
    n = y.size
    if method == "bandpass":
        est = lf.fft_lowpass(y, int(p.get("half_width", lf.RW_BAND_HALF_WIDTH)), bool(p.get("reflect", True)), x)
    elif method == "wavelet":
        levels = p.get("levels")
        est = lf.wavelet_denoise(
            y, p.get("family", "haar"), None if levels is None else int(levels), tuple(p.get("kill", lf.RW_HAAR_KILL)), x
        )
    elif method == "wiener":
        est = lf.wiener_filter(y, 0.0, lf.random_walk_covariance(n, q), r * np.eye(n), x)
    else:
        model = lf.GaussLinearSSM([[1.0]], [[1.0]], [[q]], [[r]], [0.0], [[0.0]])
        estimate = lf.kalman_filter(model, y).mean[:, 0]
        stats = lf.snr_mse(x, estimate) if x is not None else (float("nan"), float("nan"))
        est = lf.SignalEstimate(estimate, *stats)
    series = {"n": np.arange(n), "measurement": y, "estimate": est.estimate}
    if x is not None:
        series["truth"] = x
    return Outcome(series, {"snr": est.snr, "mse": est.mse})


def _run_kalman_bucy(cfg: ExperimentConfig) -> Outcome:
    p = cfg.params
    a, sigma, h, gamma = (float(p.get(k, v)) for k, v in (("a", -1.0), ("sigma", 1.0), ("h", 1.0), ("gamma", 1.0)))
    sigma0 = float(p.get("Sigma0", 1.0))
    T, dt = float(p.get("T", 20.0)), float(p.get("dt", 1e-2))
    steps = int(round(T / dt))
    t = np.linspace(0.0, steps * dt, steps + 1)
    rng = np.random.default_rng(cfg.seed_for("kalman-bucy"))
    x = np.empty(steps + 1)
    x[0] = np.sqrt(sigma0) * rng.standard_normal()
    noise = rng.standard_normal((steps, 2)) * np.sqrt(dt)
    for k in range(steps):
        x[k + 1] = x[k] + a * x[k] * dt + sigma * noise[k, 0]
    dy = h * x[:-1] * dt + gamma * noise[:, 1]
    res = lf.kalman_bucy(a, sigma, h, gamma, sigma0, t, dy=dy)
    snr, mse = lf.snr_mse(x, res.mean)
    series = {
        "n": np.arange(steps + 1),
        "t": t,
        "truth": x,
        "measurement": np.concatenate([[0.0], np.cumsum(dy)]),
        "estimate": res.mean,
        "sigma_closed": res.closed_form,
        "sigma_numeric": res.numeric,
    }
    summary = {
        "snr": snr,
        "mse": mse,
        "riccati_max_gap": float(np.max(np.abs(res.closed_form - res.numeric))),
        "divergent": res.divergent,
    }
    return Outcome(series, summary)


def run_pf(cfg: ExperimentConfig) -> Outcome:
    hmm = _hmm(cfg)
    y = _obs_or_simulate(cfg, hmm)
    P = int(cfg.params.get("particles", 1000))
    frac = float(cfg.params.get("ess_frac", 0.5))
    threshold = min(max(frac * P, 1.0), float(P))
    states = hmm.chain.states
    model = pf.hmm_particle_model(hmm)
    res = pf.particle_filter(model, y, P, cfg.seed_for("particles"), threshold, g=lambda v: states[v])
    exact = hd.forward_filter(hmm, y).pi @ states
    series = {"n": np.arange(y.size), "estimate": res.estimate, "exact": exact, "ess": res.ess, "resampled": res.resampled}
    summary = {
        "rmse_vs_exact": float(np.sqrt(np.mean((res.estimate - exact) ** 2))),
        "resample_count": int(res.resampled.sum()),
        "particles": P,
    }
    return Outcome(series, summary)


def _cont_setup(cfg: ExperimentConfig):
    p = cfg.params
    Q = np.asarray(p.get("generator", [[-1.0, 1.0], [1.0, -1.0]]), dtype=float)
    d = Q.shape[0]
    chain = MarkovSpec.generator(p.get("states", list(range(d))), Q)
    h = np.asarray(p.get("h", chain.states), dtype=float)
    gamma = float(p.get("gamma", 0.5))
    p0 = np.asarray(p.get("p0", [1.0 / d] * d), dtype=float)
    return chain, h, gamma, p0


def _cont_obs(cfg: ExperimentConfig, chain, h, gamma, p0) -> cf.ObsIncrementSeries:
    p = cfg.params
    if "obs" in p:
        return cf.ObsIncrementSeries(float(p["dt"]), ingest_column(cfg.resolve(p["obs"]), "dy"))
    T, dt = float(p.get("T", 1.0)), float(p.get("dt", 1e-3))
    return cf.simulate_observations(chain, h, gamma, T, dt, cfg.seed_for("observations"), p0)[1]


def run_cont(cfg: ExperimentConfig) -> Outcome:
    p = cfg.params
    scheme = p.get("scheme")
    chain, h, gamma, p0 = _cont_setup(cfg)
    Q = chain.matrix
    if scheme == "sparse":
        post = cf.sparse_obs_filter(
            chain,
            int(p.get("n", 8)),
            float(p["y0"]),
            float(p["y1"]),
            gamma,
            h,
            p0,
            method=p.get("method", "auto"),
            paths=int(p.get("paths", 20000)),
            seed=cfg.seed_for("bridge") if cfg.seed is not None else 0,
            rule=p.get("rule", "left"),
        )
        return Outcome({"state": chain.states, "posterior": post}, {"posterior": post})
    if scheme not in ("zakai", "ks", "smooth", "mc-approx"):
        raise InvalidSpecError(f"unknown continuous scheme {scheme!r}")
    obs = _cont_obs(cfg, chain, h, gamma, p0)
    t = obs.times
    series: dict[str, Any] = {"t": t}
    summary: dict[str, Any] = {"steps": int(obs.dy.size), "dt": obs.dt}
    if scheme == "zakai":
        traj, scales, clips = cf.zakai_filter(Q, h, gamma, p0, obs)
        series.update(_columns("mass", traj))
        series["log_scale"] = scales
        summary["clips"] = clips
    elif scheme == "ks":
        series.update(_columns("pi", cf.ks_filter(Q, h, gamma, p0, obs)))
    elif scheme == "smooth":
        t_index = int(p.get("t_index", obs.dy.size // 2))
        res = cf.smooth_alpha(Q, h, gamma, obs, t_index, p0)
        series = {"t": t[: t_index + 1]}
        series.update(_columns("alpha", res.alpha))
        series.update(_columns("smoothed", res.smoothed))
        series.update(_columns("filtered", res.filtered))
    else:
        target = int(p.get("target", chain.d - 1))
        est = cf.mc_approx_filter(
            chain,
            int(p.get("n", 8)),
            obs,
            lambda s: (s == target).astype(float),
            cfg.seed_for("mc-approx"),
            h,
            gamma,
            p0,
            copies=int(p.get("copies", 20000)),
        )
        exact = cf.bayes_filter(Q, h, gamma, p0, obs)[:, target]
        series.update({"estimate": est, "exact": exact})
        summary["sup_error"] = float(np.max(np.abs(est - exact)))
    return Outcome(series, summary)


def _heston_params(cfg: ExperimentConfig) -> hs.HestonParams:
    raw = dict(cfg.params.get("heston", {}))
    if cfg.model is not None:
        raw = load_json(cfg.resolve(cfg.model))
    try:
        return hs.HestonParams(**{k: float(raw[k]) for k in ("mu", "kappa", "xbar", "gamma", "rho")})
    except KeyError as exc:
        raise InvalidSpecError(f"Heston parameters are missing {exc.args[0]!r}") from None


def run_sv_filter(cfg: ExperimentConfig) -> Outcome:
    p = cfg.params
    params = _heston_params(cfg)
    dt = float(p.get("dt", 1.0 / 252))
    truth = None
    if "prices" in p:
        close = ingest_column(cfg.resolve(p["prices"]), "close")
        if np.any(close <= 0):
            raise InvalidSpecError("prices must be positive")
        y = np.log(close)
    else:
        sim = hs.simulate_heston(params, dt, int(p.get("n", 1000)), cfg.seed_for("heston"))
        truth, y = sim
    grid = hs.stationary_grid(params, int(p.get("grid_size", 200)))
    means = hs.sv_filter(params, y, dt, grid)
    series = {"n": np.arange(y.size), "log_price": y, "variance_mean": means}
    summary = {
        "final_variance_mean": float(means[-1]),
        "realized_variance": hs.realized_variance(y, dt * (y.size - 1)),
    }
    if truth is not None:
        series["variance_truth"] = truth
        summary["rmse"] = float(np.sqrt(np.mean((means - truth) ** 2)))
        summary["prior_rmse"] = float(np.sqrt(np.mean((params.xbar - truth) ** 2)))
    return Outcome(series, summary)


def _curve(cfg: ExperimentConfig, key: str, side: str) -> hs.OptionCurve:
    cols = ingest_csv(cfg.resolve(cfg.params[key]), ("strike", "price"))
    return hs.OptionCurve(cols["strike"], cols["price"], side)


def run_vix(cfg: ExperimentConfig) -> Outcome:
    p = cfg.params
    for key in ("puts", "calls", "forward", "rate", "tenor"):
        if key not in p:
            raise InvalidSpecError(f"vix needs {key!r}")
    variance = hs.vix_replication(
        _curve(cfg, "puts", "put"), _curve(cfg, "calls", "call"), float(p["forward"]), float(p["rate"]), float(p["tenor"])
    )
    summary = {"variance": variance, "vix": 100.0 * float(np.sqrt(variance))}
    return Outcome({"variance": [variance], "vix": [summary["vix"]]}, summary)


def run_hmm(cfg: ExperimentConfig) -> Outcome:
    hmm = _hmm(cfg)
    y = _obs_or_simulate(cfg, hmm)
    task = cfg.params.get("task", "filter")
    n = np.arange(y.size)
    if task == "filter":
        tr = hd.forward_filter(hmm, y)
        series = {"n": n, "logc": tr.logc, **_columns("pi", tr.pi)}
        return Outcome(series, {"loglik": tr.loglik})
    if task == "smooth":
        sm = hd.smooth(hmm, y)
        return Outcome({"n": n, **_columns("post", sm.posterior)}, {})
    if task == "viterbi":
        path = hd.viterbi(hmm, y)
        return Outcome({"n": n, "state": path}, {"log_score": hd.path_log_score(hmm, y, path)})
    if task == "learn":
        learned, logliks = hd.baum_welch_learn(hmm, y, int(cfg.params.get("max_iters", 100)), float(cfg.params.get("tol", 1e-8)))
        series = {"iteration": np.arange(len(logliks)), "loglik": logliks}
        return Outcome(series, {"transition": learned.transition, "loglik": logliks[-1]})
    raise InvalidSpecError(f"unknown hmm task {task!r}")


def _priors(cfg: ExperimentConfig, d: int):
    nu = cfg.params.get("nu")
    nu_tilde = cfg.params.get("nu_tilde")
    nu = np.eye(d)[0] if nu is None else np.asarray(nu, dtype=float)
    nu_tilde = np.eye(d)[-1] if nu_tilde is None else np.asarray(nu_tilde, dtype=float)
    return nu, nu_tilde


def run_stability(cfg: ExperimentConfig) -> Outcome:
    hmm = _hmm(cfg)
    n = int(cfg.params.get("n", 10000))
    k = int(cfg.params.get("seeds", 1))
    nu, nu_tilde = _priors(cfg, hmm.d)

    def one(j: int):
        seed = cfg.seed_for(f"stability/{j}")
        _, obs = hd.simulate_hmm(hmm, n + 1, seed)
        est = st.exponent_from_obs(hmm, obs, nu, nu_tilde, seed=seed)
        norms = st.log_norm_trace(st.cocycle_from_hmm(hmm, obs), st.initial_weights(hmm, obs[0], nu))
        return est, norms

    with ThreadPoolExecutor(max_workers=max_workers()) as pool:
        runs = list(pool.map(one, range(k)))
    series: dict[str, Any] = {"n": np.arange(n + 1)}
    width = len(str(k - 1))
    for j, (est, norms) in enumerate(runs):
        series[f"log_distance_{j:0{width}d}"] = est.log_distance
        series[f"log_norm_{j:0{width}d}"] = norms
    bounds = st.exponent_bounds(hmm.transition, hmm.h, invariant_distribution(hmm.chain))
    summary = {
        "exponent": [e.exponent for e, _ in runs],
        "exponent_se": [e.stderr for e, _ in runs],
        "gap": [e.gap for e, _ in runs],
        "gap_se": [e.gap_se for e, _ in runs],
        "collapsed": [e.collapsed for e, _ in runs],
        "coupling_bound": bounds.coupling_bound,
        "low_noise_upper": bounds.low_noise_upper,
        "low_noise_lower": bounds.low_noise_lower,
    }
    return Outcome(series, summary)


def run_counterexample(cfg: ExperimentConfig) -> Outcome:
    p = cfg.params
    n = int(p.get("n", 10000))
    res = st.counterexample_run(n, cfg.seed_for("counterexample"), float(p.get("dt", 0.1)), float(p.get("split", 0.8)))
    tail = res.distance[n // 2 :]
    series = {"n": np.arange(res.distance.size), "y": res.observations, "distance": res.distance}
    summary = {
        "tail_min_distance": float(tail.min()),
        "tail_mean_distance": float(tail.mean()),
        "log_slope": res.log_slope,
        "log_slope_se": res.log_slope_se,
    }
    return Outcome(series, summary)


KINDS: dict[str, Callable[[ExperimentConfig], Outcome]] = {
    "random-walk-comparison": run_random_walk,
    "linear": run_linear,
    "pf": run_pf,
    "cont": run_cont,
    "sv-filter": run_sv_filter,
    "vix": run_vix,
    "hmm": run_hmm,
    "stability": run_stability,
    "stability-counterexample": run_counterexample,
}


def summary_path(out: Path) -> Path:
    return out.with_name(out.stem + ".summary.json")


def run_experiment(cfg: ExperimentConfig) -> dict[str, Any]:
    """Run one experiment, write its CSV files and summary, and return the summary."""
    runner = KINDS.get(cfg.kind)
    if runner is None:
        raise InvalidSpecError(f"unknown experiment kind {cfg.kind!r}; choose from {', '.join(sorted(KINDS))}")
    start = time.perf_counter()
    outcome = runner(cfg)
    summary = {
        "kind": cfg.kind,
        "seed": cfg.seed,
        "version": describe_version(),
        "config_hash": config_hash(cfg.as_dict()),
        "results": outcome.summary,
        "wall_time": time.perf_counter() - start,
    }
    if cfg.out is not None:
        out = cfg.resolve(cfg.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        emit_results(outcome.series, out)
        for name, table in outcome.extra.items():
            emit_results(table, out.with_name(f"{out.stem}.{name}.csv"))
        emit_json(summary, summary_path(out))
    return summary
