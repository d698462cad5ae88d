"""``filterbench`` command line: one subcommand per module plus ``run`` for config files.

Exit codes: 0 success, 2 usage, 3 data, 4 numerical.
"""

from __future__ import annotations

import argparse
import sys
import warnings
from pathlib import Path

from . import __version__
from .errors import DataError, InvalidSpecError, NumericalError
from .experiments import KINDS, ExperimentConfig, run_experiment
from .io import dump_json, load_config

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERICAL = 0, 2, 3, 4


def _params_file(path) -> dict:
    return load_config(path) if path else {}


def _cfg(kind: str, args, params: dict, model=None, base_dir=None) -> ExperimentConfig:
    return ExperimentConfig(
        kind=kind,
        seed=args.seed,
        out=args.out,
        params=params,
        model=None if model is None else str(model),
        base_dir=Path.cwd() if base_dir is None else base_dir,
    )


def _linear(args) -> ExperimentConfig:
    params = _params_file(args.config)
    params["method"] = args.method
    base = Path(args.config).parent if args.config else None
    return _cfg("linear", args, params, base_dir=base)


def _pf(args) -> ExperimentConfig:
    params = {"particles": args.particles, "ess_frac": args.ess_frac}
    if args.obs:
        params["obs"] = str(Path(args.obs).resolve())
    return _cfg("pf", args, params, model=Path(args.model).resolve())


def _cont(args) -> ExperimentConfig:
    params = _params_file(args.config)
    params["scheme"] = args.scheme
    base = Path(args.config).parent if args.config else None
    return _cfg("cont", args, params, base_dir=base)


def _sv_filter(args) -> ExperimentConfig:
    params = {"dt": args.dt, "grid_size": args.grid_size}
    if args.prices:
        params["prices"] = str(Path(args.prices).resolve())
    if args.n is not None:
        params["n"] = args.n
    return _cfg("sv-filter", args, params, model=Path(args.params).resolve())


def _vix(args) -> ExperimentConfig:
    params = {
        "puts": str(Path(args.puts).resolve()),
        "calls": str(Path(args.calls).resolve()),
        "forward": args.forward,
        "rate": args.rate,
        "tenor": args.tenor,
    }
    return _cfg("vix", args, params)


def _hmm(args) -> ExperimentConfig:
    params = {"task": args.task}
    if args.obs:
        params["obs"] = str(Path(args.obs).resolve())
    if args.n_obs is not None:
        params["n_obs"] = args.n_obs
    return _cfg("hmm", args, params, model=Path(args.hmm).resolve())


def _stability(args) -> ExperimentConfig:
    return _cfg("stability", args, {"n": args.n, "seeds": args.seeds}, model=Path(args.hmm).resolve())


def _run(args) -> ExperimentConfig:
    path = Path(args.config)
    cfg = ExperimentConfig.from_mapping(load_config(path), base_dir=path.parent)
    if args.seed is not None:
        cfg.seed = args.seed
    if args.out is not None:
        cfg.out = args.out
        cfg.base_dir = Path.cwd()
    return cfg


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="filterbench", description="Stochastic filtering experiments.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def command(name, builder, help_text, seed_required=False):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--seed", type=int, required=seed_required, help="master seed")
        p.add_argument("--out", type=Path, help="output CSV; the summary JSON is written alongside")
        p.set_defaults(build=builder)
        return p

    p = command("linear", _linear, "linear estimators on a random walk or a data file")
    p.add_argument("--method", required=True, choices=["reed", "bandpass", "wavelet", "wiener", "kalman", "kalman-bucy"])
    p.add_argument("--config", help="YAML parameter file")

    p = command("pf", _pf, "bootstrap particle filter on a finite-state HMM", seed_required=True)
    p.add_argument("--model", required=True, help="HMM JSON file")
    p.add_argument("--obs", help="CSV with column y; simulated when omitted")
    p.add_argument("--particles", type=int, default=1000)
    p.add_argument("--ess-frac", type=float, default=0.5, help="resample when ESS <= frac * P")

    p = command("cont", _cont, "continuous-time filter approximations")
    p.add_argument("--scheme", required=True, choices=["zakai", "ks", "smooth", "mc-approx", "sparse"])
    p.add_argument("--config", help="YAML parameter file")

    p = command("sv-filter", _sv_filter, "grid filter for Heston variance")
    p.add_argument("--params", required=True, help="JSON with mu, kappa, xbar, gamma, rho")
    p.add_argument("--prices", help="CSV with a close column; simulated when omitted")
    p.add_argument("--dt", type=float, default=1.0 / 252)
    p.add_argument("--n", type=int, help="steps to simulate when no prices are given")
    p.add_argument("--grid-size", type=int, default=200)

    p = command("vix", _vix, "model-free variance from an option strip")
    p.add_argument("--puts", required=True, help="CSV with strike, price")
    p.add_argument("--calls", required=True, help="CSV with strike, price")
    p.add_argument("--forward", type=float, required=True)
    p.add_argument("--rate", type=float, required=True)
    p.add_argument("--tenor", type=float, required=True)

    p = command("hmm", _hmm, "discrete HMM filter, smoother, Viterbi or Baum-Welch")
    p.add_argument("--hmm", required=True, help="HMM JSON file")
    p.add_argument("--obs", help="CSV with column y; simulated when omitted")
    p.add_argument("--n-obs", type=int, help="length of a simulated stream")
    p.add_argument("--task", choices=["filter", "smooth", "viterbi", "learn"], default="filter")

    p = command("stability", _stability, "forgetting rate and Lyapunov gap of an HMM filter", seed_required=True)
    p.add_argument("--hmm", required=True, help="HMM JSON file")
    p.add_argument("--n", type=int, default=10000)
    p.add_argument("--seeds", type=int, default=1)

    p = command("run", _run, f"run a YAML experiment config ({', '.join(sorted(KINDS))})")
    p.add_argument("--config", required=True)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("always")
            summary = run_experiment(args.build(args))
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except InvalidSpecError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except KeyError as exc:
        print(f"usage error: missing parameter {exc.args[0]!r}", file=sys.stderr)
        return EXIT_USAGE
    except NumericalError as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    sys.stdout.write(dump_json(summary))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
