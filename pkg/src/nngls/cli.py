"""Command-line interface: ``nngls {simulate,fit,predict,bootstrap,diagnose,benchmark}``.

Exit codes: 0 success, 2 input error, 3 numerical or convergence failure.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
import time
from datetime import datetime, timezone

import numpy as np
from threadpoolctl import threadpool_limits

from . import __version__
from .covariance import CovarianceParams
from .exceptions import NumericalError
from .experiments import (SimulationSpec, empirical_semivariogram, run_benchmark, simulate)
from .inference import bootstrap_ci, predict
from .io import (InputError, atomic_write_json, load_model_json, read_covariates_csv,
                 read_dataset_csv, read_json, read_query_csv, write_band_csv, write_csv,
                 write_dataset_csv, write_history_csv, write_predictions_csv, write_truth_csv)
from .network import forward
from .nngp import discrepancy_diagnostics
from .trainer import TrainConfig, fit_nngls

log = logging.getLogger("nngls")

EXIT_OK, EXIT_INPUT, EXIT_NUMERICAL = 0, 2, 3


def _threads(args) -> int:
    if args.threads is not None:
        return max(1, args.threads)
    env = os.environ.get("NNGLS_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise InputError(f"NNGLS_THREADS must be an integer, got {env!r}") from None
    return os.cpu_count() or 1


def _manifest(args, path, config, inputs, outputs, t0):
    atomic_write_json(path, {
        "command": args.command,
        "config": config,
        "inputs": inputs,
        "outputs": outputs,
        "seed": args.seed,
        "threads": args.resolved_threads,
        "started_at": datetime.fromtimestamp(t0, timezone.utc).isoformat(),
        "wall_clock_seconds": time.time() - t0,
        "version": __version__,
    })


def _ensure_dir(path):
    os.makedirs(path, exist_ok=True)
    return path


def _train_config(args) -> TrainConfig:
    d = read_json(args.config) if getattr(args, "config", None) else {}
    try:
        cfg = TrainConfig.from_dict(d)
    except (TypeError, ValueError) as exc:
        raise InputError(f"invalid config: {exc}") from None
    over = {}
    if args.seed is not None:
        over["seed"] = args.seed
    if getattr(args, "m", None) is not None:
        over["m"] = args.m
    return cfg.replace(**over) if over else cfg


# ---------------------------------------------------------------- commands

def cmd_simulate(args, t0):
    d = read_json(args.spec)
    if args.seed is not None:
        d["seed"] = args.seed
    try:
        spec = SimulationSpec.from_dict(d)
    except (TypeError, ValueError, KeyError) as exc:
        raise InputError(f"invalid simulation spec: {exc}") from None
    sim = simulate(spec)
    truth = args.truth or os.path.splitext(args.out)[0] + "_truth.csv"
    write_dataset_csv(args.out, sim.dataset)
    write_truth_csv(truth, sim.f_true, sim.effect)
    _manifest(args, args.out + ".manifest.json", spec.to_dict(), {"spec": args.spec},
              {"data": args.out, "truth": truth}, t0)


def cmd_fit(args, t0):
    ds = read_dataset_csv(args.data)
    cfg = _train_config(args)
    fit = fit_nngls(ds, cfg, nu=args.nu)
    out = _ensure_dir(args.out)
    model_path, hist_path = os.path.join(out, "model.json"), os.path.join(out, "history.csv")
    atomic_write_json(model_path, fit.to_dict())
    write_history_csv(hist_path, fit.history)
    _manifest(args, os.path.join(out, "manifest.json"), cfg.to_dict(), {"data": args.data},
              {"model": model_path, "history": hist_path}, t0)
    log.info("fit: theta %s, best epoch %d", fit.theta, fit.best_epoch)


def cmd_predict(args, t0):
    fit = load_model_json(args.model)
    ds = read_dataset_csv(args.data)
    X0, S0 = read_query_csv(args.query, fit.model.d)
    if X0.shape[0]:
        res = predict(fit, ds, X0, S0)
        write_predictions_csv(args.out, res, S0)
    else:
        write_csv(args.out, ("s1", "s2", "y_hat", "sigma0", "pi_lower", "pi_upper"), [])
    _manifest(args, args.out + ".manifest.json", {"m": fit.dag.get("m")},
              {"model": args.model, "data": args.data, "query": args.query}, {"predictions": args.out}, t0)


def cmd_bootstrap(args, t0):
    fit = load_model_json(args.model)
    ds = read_dataset_csv(args.data)
    X_new = read_covariates_csv(args.grid, fit.model.d) if args.grid else ds.X
    cfg = fit.config
    if args.seed is not None:
        cfg = cfg.replace(seed=args.seed)
    band = bootstrap_ci(ds, cfg, fit, B=args.B, level=args.level, X_new=X_new,
                        replace=args.with_replacement, freeze_theta=args.freeze_theta,
                        epoch_fraction=args.epoch_fraction, n_jobs=args.resolved_threads)
    write_band_csv(args.out, band)
    _manifest(args, args.out + ".manifest.json",
              {"B": args.B, "level": args.level, "freeze_theta": args.freeze_theta,
               "with_replacement": args.with_replacement, "epoch_fraction": args.epoch_fraction,
               "n_failed": band.n_failed},
              {"model": args.model, "data": args.data, "grid": args.grid}, {"band": args.out}, t0)


def _parse_m_list(text):
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise InputError(f"--m-list must be comma-separated integers, got {text!r}") from None


def cmd_diagnose(args, t0):
    ds = read_dataset_csv(args.data)
    resid = ds.Y
    if args.model:
        fit = load_model_json(args.model)
        theta = fit.theta
        resid = ds.Y - forward(fit.model, ds.X)
    else:
        try:
            theta = CovarianceParams(args.sigma2, args.phi, args.nu, args.tau2)
        except ValueError as exc:
            raise InputError(str(exc)) from None
    out = _ensure_dir(args.out)
    outputs = {}
    m_list = _parse_m_list(args.m_list) if args.m_list else []
    m_list = [ds.n - 1 if m < 0 else m for m in m_list]  # -1 means n - 1
    if m_list:
        try:
            diag = discrepancy_diagnostics(ds.S, theta, theta, m_list, args.ordering)
        except ValueError as exc:
            raise InputError(str(exc)) from None
        p = os.path.join(out, "discrepancy.csv")
        cols = ("m", "kld", "trace", "lambda_min", "lambda_max")
        write_csv(p, cols, np.column_stack([diag[c] for c in cols]))
        outputs["discrepancy"] = p
    vg = empirical_semivariogram(ds.S, resid, args.n_bins, args.max_dist)
    p = os.path.join(out, "semivariogram.csv")
    write_csv(p, ("bin_center", "semivariance", "count"), list(vg.rows()))
    outputs["semivariogram"] = p
    _manifest(args, os.path.join(out, "manifest.json"),
              {"theta": theta.to_dict(), "m_list": m_list, "n_bins": args.n_bins},
              {"data": args.data, "model": args.model}, outputs, t0)


def cmd_benchmark(args, t0):
    grid = read_json(args.grid)
    scenarios = grid["scenarios"] if isinstance(grid, dict) else grid
    if not isinstance(scenarios, list) or not scenarios:
        raise InputError(f"{args.grid}: expected a non-empty list of scenarios")
    reps = args.replicates if args.replicates is not None else (
        grid.get("replicates", 5) if isinstance(grid, dict) else 5)
    cfg = _train_config(args)
    try:
        report = run_benchmark(scenarios, replicates=reps, config=cfg, seed=cfg.seed)
    except (TypeError, KeyError) as exc:
        raise InputError(f"invalid scenario: {exc}") from None
    report.write_csv(args.out)
    print(report.summary())
    _manifest(args, args.out + ".manifest.json", {"replicates": reps, "train": cfg.to_dict()},
              {"grid": args.grid}, {"report": args.out}, t0)


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="nngls", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="run seed (all randomness derives from it)")
    common.add_argument("--threads", type=int, default=None,
                        help="worker/BLAS thread cap (default: NNGLS_THREADS or all cores)")
    common.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", parents=[common], help="simulate a dataset from a spec JSON")
    s.add_argument("--spec", required=True)
    s.add_argument("--out", required=True, help="dataset CSV")
    s.add_argument("--truth", help="ground-truth CSV (default: <out>_truth.csv)")
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("fit", parents=[common], help="fit NN-GLS to a dataset CSV")
    s.add_argument("--data", required=True)
    s.add_argument("--config", help="TrainConfig JSON")
    s.add_argument("--nu", type=float, default=0.5)
    s.add_argument("--m", type=int, default=None)
    s.add_argument("--out", required=True, help="output directory")
    s.set_defaults(func=cmd_fit)

    s = sub.add_parser("predict", parents=[common], help="kriging predictions at query rows")
    s.add_argument("--model", required=True)
    s.add_argument("--data", required=True, help="training dataset CSV used for the fit")
    s.add_argument("--query", required=True, help="CSV with x1..xd, s1, s2")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_predict)

    s = sub.add_parser("bootstrap", parents=[common], help="spatial-bootstrap band for the mean")
    s.add_argument("--model", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--grid", help="CSV with x1..xd (default: the dataset covariates)")
    s.add_argument("--B", type=int, default=100)
    s.add_argument("--level", type=float, default=0.95)
    s.add_argument("--freeze-theta", action="store_true")
    s.add_argument("--with-replacement", action="store_true")
    s.add_argument("--epoch-fraction", type=float, default=0.5)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_bootstrap)

    s = sub.add_parser("diagnose", parents=[common], help="NNGP discrepancy table and semivariogram")
    s.add_argument("--data", required=True)
    s.add_argument("--model", help="fitted model; supplies theta and residuals")
    for name, default in (("sigma2", 1.0), ("phi", 1.0), ("nu", 0.5), ("tau2", 0.0)):
        s.add_argument(f"--{name}", type=float, default=default)
    s.add_argument("--m-list", default="", help="comma-separated neighbor sizes (-1 for n-1)")
    s.add_argument("--ordering", default="coordinate_sum")
    s.add_argument("--n-bins", type=int, default=15)
    s.add_argument("--max-dist", type=float, default=None)
    s.add_argument("--out", required=True, help="output directory")
    s.set_defaults(func=cmd_diagnose)

    s = sub.add_parser("benchmark", parents=[common], help="simulation benchmark over a scenario grid")
    s.add_argument("--grid", required=True, help="scenario JSON")
    s.add_argument("--config", help="TrainConfig JSON")
    s.add_argument("--replicates", type=int, default=None)
    s.add_argument("--out", required=True, help="report CSV")
    s.set_defaults(func=cmd_benchmark)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    t0 = time.time()
    try:
        args.resolved_threads = _threads(args)
        with threadpool_limits(limits=args.resolved_threads):
            args.func(args, t0)
    except (NumericalError, np.linalg.LinAlgError) as exc:
        print(f"nngls {args.command}: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (InputError, ValueError, MemoryError, OSError) as exc:
        print(f"nngls {args.command}: input error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
