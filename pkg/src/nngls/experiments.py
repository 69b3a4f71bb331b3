"""Simulation designs, evaluation metrics, the empirical semivariogram and benchmarks."""

from __future__ import annotations

import csv
import math
import time
import warnings
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.spatial import cKDTree

from .covariance import CovarianceParams, cov_matrix, cov_full, matern
from .inference import predict
from .network import forward
from .nngp import compute_factors, correlate_back
from .spatial_core import SpatialDataset, build_dag
from .trainer import FitResult, ThetaNotImprovedWarning, TrainConfig, estimate_theta, fit_nngls

# above this many locations the spatial effect is drawn sequentially over an NNGP DAG
DENSE_SIMULATION_MAX_N = 5000
SIMULATION_M = 20


def f1_sine(X):
    X = np.asarray(X, dtype=np.float64)
    return 10.0 * np.sin(np.pi * X[:, 0])


def f2_friedman(X):
    X = np.asarray(X, dtype=np.float64)
    return (10.0 * np.sin(np.pi * X[:, 0] * X[:, 1]) + 20.0 * (X[:, 2] - 0.5) ** 2
            + 10.0 * X[:, 3] + 5.0 * X[:, 4]) / 6.0


def f2_rho(X, rho: float = 0.5):
    """Friedman variant weighting the interaction by ``rho``; ``rho = 0.5`` gives :func:`f2_friedman`."""
    if not 0.0 <= rho <= 1.0:
        raise ValueError(f"rho must lie in [0, 1], got {rho}")
    X = np.asarray(X, dtype=np.float64)
    inter = 10.0 / 3.0 * np.sin(np.pi * X[:, 0] * X[:, 1])
    rest = (20.0 * (X[:, 2] - 0.5) ** 2 + 10.0 * X[:, 3] + 5.0 * X[:, 4]) / 3.0
    return rho * inter + (1.0 - rho) * rest


def f3_15dim(X):
    X = np.asarray(X, dtype=np.float64)
    x = [None] + [X[:, k] for k in range(15)]  # 1-based access
    s = (10 * np.sin(np.pi * x[1] * x[2]) + 20 * (x[3] - 0.5) ** 2 + 10 * x[4] + 5 * x[5]
         + 3 / ((x[6] + 1) * (x[7] + 1)) + 4 * np.exp(x[8] ** 2) + 30 * x[9] ** 2 + x[10]
         + 5 * (np.exp(x[11]) * np.sin(np.pi * x[12]) + np.exp(x[12]) * np.sin(np.pi * x[11]))
         + 10 * x[13] ** 2 * np.cos(np.pi * x[14]) + 20 * x[15] ** 4)
    return s / 6.0


MEAN_FUNCTIONS = {"f1_sine": (f1_sine, 1), "f2_friedman": (f2_friedman, 5),
                  "f2_rho": (f2_rho, 5), "f3_15dim": (f3_15dim, 15)}
ERROR_MODELS = ("gp_plus_nugget", "fixed_surface")


@dataclass
class SimulationSpec:
    """One simulation design.

    ``f0`` names a mean function or is ``"custom"`` (then ``custom_f`` and
    ``d`` are required).  ``fixed_surface`` replaces the GP draw with a
    predictive-process surface kriged from ``n_knots`` parent values; the
    surface depends only on ``surface_seed`` so it stays fixed across
    replicates.  ``center_effect`` subtracts the sample mean of the spatial
    effect.
    """

    f0: str = "f1_sine"
    n: int = 1000
    theta_true: CovarianceParams = field(default_factory=lambda: CovarianceParams(1.0, 3 / math.sqrt(2), 0.5, 0.01))
    domain: float = 10.0
    seed: int = 0
    error_model: str = "gp_plus_nugget"
    rho: float = 0.5
    d: int | None = None
    custom_f: Callable | None = None
    n_knots: int = 100
    surface_seed: int = 0
    center_effect: bool = False

    def __post_init__(self):
        if isinstance(self.theta_true, dict):
            self.theta_true = CovarianceParams.from_dict(self.theta_true)
        if int(self.n) != self.n or self.n < 1:
            raise ValueError(f"n must be a positive integer, got {self.n}")
        self.n = int(self.n)
        if not self.domain > 0:
            raise ValueError("domain side must be positive")
        if not 0.0 <= self.rho <= 1.0:
            raise ValueError(f"rho must lie in [0, 1], got {self.rho}")
        if self.error_model not in ERROR_MODELS:
            raise ValueError(f"unknown error model {self.error_model!r}")
        if self.f0 == "custom":
            if self.custom_f is None or self.d is None:
                raise ValueError("custom mean function needs custom_f and d")
        elif self.f0 in MEAN_FUNCTIONS:
            implied = MEAN_FUNCTIONS[self.f0][1]
            if self.d is not None and self.d != implied:
                raise ValueError(f"{self.f0} has d={implied}, got d={self.d}")
            self.d = implied
        else:
            raise ValueError(f"unknown mean function {self.f0!r}")

    def mean_function(self) -> Callable:
        if self.f0 == "custom":
            return self.custom_f
        if self.f0 == "f2_rho":
            return lambda X: f2_rho(X, self.rho)
        return MEAN_FUNCTIONS[self.f0][0]

    def to_dict(self) -> dict:
        if self.f0 == "custom":
            raise ValueError("custom mean functions cannot be serialized")
        return {"f0": self.f0, "n": self.n, "theta_true": self.theta_true.to_dict(),
                "domain": self.domain, "seed": self.seed, "error_model": self.error_model,
                "rho": self.rho, "n_knots": self.n_knots, "surface_seed": self.surface_seed,
                "center_effect": self.center_effect}

    @classmethod
    def from_dict(cls, d: dict) -> "SimulationSpec":
        known = {"f0", "n", "theta_true", "domain", "seed", "error_model", "rho", "d",
                 "n_knots", "surface_seed", "center_effect"}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown simulation keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class Simulation:
    dataset: SpatialDataset
    f_true: np.ndarray
    effect: np.ndarray  # spatial effect plus nugget, Y - f_true

    def __iter__(self):
        return iter((self.dataset, self.f_true, self.effect))


def _spatial_field(S, theta: CovarianceParams, rng) -> np.ndarray:
    """Nugget-free GP draw: dense Cholesky up to the size limit, NNGP sequential beyond."""
    n = S.shape[0]
    latent = theta.replace(tau2=0.0)
    if n <= DENSE_SIMULATION_MAX_N:
        C = cov_matrix(S, S, latent)
        # tiny jitter keeps smooth kernels factorable on close point pairs
        C[np.diag_indices_from(C)] += 1e-10 * theta.sigma2
        return np.linalg.cholesky(C) @ rng.standard_normal(n)
    factors = compute_factors(build_dag(S, SIMULATION_M), S, latent.replace(tau2=1e-10 * theta.sigma2))
    return correlate_back(factors, rng.standard_normal(n))


def _fixed_surface(S, spec: SimulationSpec) -> np.ndarray:
    rng = np.random.default_rng(spec.surface_seed)
    knots = rng.uniform(0.0, spec.domain, size=(spec.n_knots, 2))
    latent = spec.theta_true.replace(tau2=0.0)
    Ck = cov_matrix(knots, knots, latent)
    Ck[np.diag_indices_from(Ck)] += 1e-10 * latent.sigma2
    wk = np.linalg.cholesky(Ck) @ rng.standard_normal(spec.n_knots)
    return cov_matrix(S, knots, latent) @ np.linalg.solve(Ck, wk)


def simulate(spec: SimulationSpec) -> Simulation:
    """Draw ``X ~ U[0,1]^d``, ``S ~ U[0, side]^2`` and ``Y = f0(X) + effect``.

    The spatial effect and the nugget are drawn from separate streams split
    off ``spec.seed``.
    """
    ss = np.random.SeedSequence(int(spec.seed)).spawn(4)
    rx, rs, rw, re = (np.random.default_rng(s) for s in ss)
    X = rx.uniform(0.0, 1.0, size=(spec.n, spec.d))
    S = rs.uniform(0.0, spec.domain, size=(spec.n, 2))
    if spec.error_model == "fixed_surface":
        w = _fixed_surface(S, spec)
    else:
        w = _spatial_field(S, spec.theta_true, rw)
    if spec.center_effect:
        w = w - w.mean()
    eps = w + math.sqrt(spec.theta_true.tau2) * re.standard_normal(spec.n)
    f = np.asarray(spec.mean_function()(X), dtype=np.float64)
    return Simulation(SpatialDataset(X, f + eps, S), f, eps)


# ---------------------------------------------------------------- metrics

def mise(f_hat, f_true, center: bool = False) -> float:
    """Mean squared difference over evaluation rows; ``center`` removes each curve's mean first."""
    a = np.asarray(f_hat, dtype=np.float64).reshape(-1)
    b = np.asarray(f_true, dtype=np.float64).reshape(-1)
    if a.shape != b.shape:
        raise ValueError("f_hat and f_true differ in length")
    if center:
        a, b = a - a.mean(), b - b.mean()
    return float(np.mean((a - b) ** 2))


def rmse_relative(y_hat, y_test) -> float:
    """Prediction MSE divided by the (population) variance of the test responses."""
    y_hat = np.asarray(y_hat, dtype=np.float64).reshape(-1)
    y_test = np.asarray(y_test, dtype=np.float64).reshape(-1)
    v = np.mean((y_test - y_test.mean()) ** 2)
    if v == 0:
        raise ValueError("test responses have zero variance")
    return float(np.mean((y_hat - y_test) ** 2) / v)


def interval_score(lower, upper, truth, alpha: float = 0.05) -> float:
    l, u, t = (np.asarray(a, dtype=np.float64).reshape(-1) for a in (lower, upper, truth))
    s = (u - l) + (2.0 / alpha) * ((l - t) * (l > t) + (t - u) * (u < t))
    return float(np.mean(s))


def coverage(lower, upper, truth) -> float:
    l, u, t = (np.asarray(a, dtype=np.float64).reshape(-1) for a in (lower, upper, truth))
    return float(np.mean((l <= t) & (t <= u)))


@dataclass
class MetricsReport:
    mise: float
    rmse: float
    coverage: float
    interval_score: float
    runtime_seconds: float
    mise_centered: float = float("nan")

    def as_dict(self) -> dict:
        return {"mise": self.mise, "mise_centered": self.mise_centered, "rmse": self.rmse,
                "coverage": self.coverage, "interval_score": self.interval_score,
                "runtime_seconds": self.runtime_seconds}


# ---------------------------------------------------------------- variogram

@dataclass
class Semivariogram:
    centers: np.ndarray
    gamma: np.ndarray
    counts: np.ndarray
    edges: np.ndarray

    def rows(self):
        return zip(self.centers, self.gamma, self.counts)


def empirical_semivariogram(S, residual, n_bins: int = 15, max_dist: float | None = None) -> Semivariogram:
    """Binned ``gamma(h) = sum (r_i - r_j)^2 / (2 |pairs|)`` over pairs closer than ``max_dist``.

    Pairs are enumerated with a k-d tree, so memory follows the number of
    pairs inside ``max_dist`` rather than ``n^2``.  Empty bins hold ``nan``.
    """
    S = np.asarray(S, dtype=np.float64)
    r = np.asarray(residual, dtype=np.float64).reshape(-1)
    if S.shape[0] != r.size:
        raise ValueError("S and residual differ in length")
    if n_bins < 1:
        raise ValueError("n_bins must be positive")
    if max_dist is None:
        max_dist = 0.5 * float(np.hypot(*(S.max(axis=0) - S.min(axis=0))))
    if not max_dist > 0:
        raise ValueError("max_dist must be positive")
    tree = cKDTree(S)
    pairs = tree.query_pairs(max_dist, output_type="ndarray")
    edges = np.linspace(0.0, max_dist, n_bins + 1)
    if pairs.size == 0:
        return Semivariogram(0.5 * (edges[1:] + edges[:-1]), np.full(n_bins, np.nan),
                             np.zeros(n_bins, dtype=int), edges)
    i, j = pairs[:, 0], pairs[:, 1]
    h = np.sqrt(np.sum((S[i] - S[j]) ** 2, axis=1))
    sq = (r[i] - r[j]) ** 2
    b = np.clip(np.searchsorted(edges, h, side="right") - 1, 0, n_bins - 1)
    counts = np.bincount(b, minlength=n_bins)
    sums = np.bincount(b, weights=sq, minlength=n_bins)
    with np.errstate(invalid="ignore", divide="ignore"):
        gamma = np.where(counts > 0, sums / (2.0 * counts), np.nan)
    return Semivariogram(0.5 * (edges[1:] + edges[:-1]), gamma, counts, edges)


def theoretical_semivariogram(h, theta: CovarianceParams):
    """``tau2 + sigma2 - C(h)`` for ``h > 0`` and 0 at ``h = 0``."""
    h = np.asarray(h, dtype=np.float64)
    return np.where(h > 0, theta.total_variance - matern(h, theta), 0.0)


# ---------------------------------------------------------------- benchmark

REPORT_COLUMNS = ("scenario_id", "method", "metric", "mean", "sd", "n_replicates")
METHODS = ("nngls", "nn_ols")


def _scenario_spec(sc: dict, seed: int) -> tuple:
    sc = dict(sc)
    sid = str(sc.pop("id", sc.pop("scenario_id", "scenario")))
    n_test = int(sc.pop("n_test", 0))
    sc.pop("replicates", None)
    theta = sc.pop("theta", sc.pop("theta_true", None))
    kw = {k: v for k, v in sc.items() if k in SimulationSpec.__dataclass_fields__}
    unknown = set(sc) - set(kw)
    if unknown:
        raise ValueError(f"unknown scenario keys: {sorted(unknown)}")
    if theta is not None:
        kw["theta_true"] = theta if isinstance(theta, CovarianceParams) else CovarianceParams.from_dict(
            {"nu": 0.5, "tau2": 0.0, **theta})
    n_fit = int(kw.pop("n", 1000))
    spec = SimulationSpec(n=n_fit + n_test, seed=seed, **kw)
    return sid, spec, n_fit, n_test


def baseline_fit(fit: FitResult, dataset: SpatialDataset) -> FitResult:
    """The non-spatial network with an ``m = 0`` (independent) working covariance.

    Its kriging step adds nothing to the network output and the prediction
    standard deviation is ``sqrt(sigma2 + tau2)`` estimated from the network's
    training residuals.
    """
    tr = fit.split["train"]
    S, resid = dataset.S[tr], dataset.Y[tr] - forward(fit.ols_model, dataset.X[tr])
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", ThetaNotImprovedWarning)
        theta = estimate_theta(build_dag(S, 0), S, resid,
                               CovarianceParams(0.5 * resid.var(), fit.theta.phi, fit.theta.nu,
                                                0.5 * resid.var()))
    return FitResult(fit.ols_model, theta, [{"epoch": 0}], fit.split, fit.config.replace(m=0),
                     {"m": 0, "ordering": fit.dag.get("ordering", "coordinate_sum")}, 0,
                     fit.ols_model, 1)


def evaluate_replicate(sim: Simulation, config: TrainConfig, nu: float = 0.5,
                       split: tuple | None = None) -> dict:
    """Fit both methods on one simulated dataset and score them on the test rows."""
    ds = sim.dataset
    t0 = time.perf_counter()
    fit = fit_nngls(ds, config, nu=nu, split=split)
    t_total = time.perf_counter() - t0
    n_ols = sum(1 for h in fit.history if h.get("phase") == "ols")
    t_ols = t_total * n_ols / max(len(fit.history), 1)
    base = baseline_fit(fit, ds)
    te = fit.split["test"]
    out = {}
    for name, f, t in (("nngls", fit, t_total), ("nn_ols", base, t_ols)):
        f_hat = forward(f.model, ds.X[te])
        pr = predict(f, ds, ds.X[te], ds.S[te])
        out[name] = MetricsReport(
            mise=mise(f_hat, sim.f_true[te]),
            mise_centered=mise(f_hat, sim.f_true[te], center=True),
            rmse=rmse_relative(pr.y_hat, ds.Y[te]),
            coverage=coverage(pr.pi_lower, pr.pi_upper, ds.Y[te]),
            interval_score=interval_score(pr.pi_lower, pr.pi_upper, ds.Y[te]),
            runtime_seconds=t,
        )
    out["fit"] = fit
    return out


@dataclass
class BenchmarkReport:
    rows: list  # summary rows keyed by REPORT_COLUMNS
    records: list  # one dict per scenario x replicate x method

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(REPORT_COLUMNS)
            for r in self.rows:
                w.writerow([r[c] for c in REPORT_COLUMNS])

    def summary(self) -> str:
        lines = []
        for r in self.rows:
            if r["metric"] in ("mise", "rmse", "coverage"):
                lines.append(f"{r['scenario_id']:>16s} {r['method']:>6s} {r['metric']:>9s} "
                             f"{r['mean']:.4g} (sd {r['sd']:.2g}, n={r['n_replicates']})")
        return "\n".join(lines)


def run_benchmark(scenarios, methods=METHODS, replicates: int = 5, config: TrainConfig | None = None,
                  seed: int = 0) -> BenchmarkReport:
    """Simulate, fit and score every scenario ``replicates`` times.

    A scenario is a dict of :class:`SimulationSpec` fields plus ``id``, an
    optional ``theta`` dict and an optional ``n_test`` (extra rows simulated
    and held out as the test set, with the first ``n`` rows split into
    training and validation).  Replicate ``r`` of scenario ``k`` uses the seed
    stream ``SeedSequence(seed).spawn`` for position ``(k, r)``.
    """
    methods = tuple(methods)
    bad = set(methods) - set(METHODS)
    if bad:
        raise ValueError(f"unknown methods {sorted(bad)}")
    config = config or TrainConfig()
    streams = np.random.SeedSequence(int(seed)).spawn(len(scenarios))
    records = []
    for sc, ss in zip(scenarios, streams):
        reps = int(sc.get("replicates", replicates))
        for r, rs in enumerate(ss.spawn(reps)):
            rep_seed = int(rs.generate_state(1, np.uint32)[0])
            sid, spec, n_fit, n_test = _scenario_spec(sc, rep_seed)
            sim = simulate(spec)
            split = None
            if n_test:
                fr = config.fractions
                tv = fr[0] + fr[1]
                a = int(round(n_fit * fr[0] / tv))
                split = (np.arange(a), np.arange(a, n_fit), np.arange(n_fit, n_fit + n_test))
            res = evaluate_replicate(sim, config.replace(seed=rep_seed), spec.theta_true.nu, split)
            for mth in methods:
                records.append({"scenario_id": sid, "replicate": r, "method": mth,
                                **res[mth].as_dict()})
    rows = []
    keys = []
    for rec in records:
        k = (rec["scenario_id"], rec["method"])
        if k not in keys:
            keys.append(k)
    for sid, mth in keys:
        sel = [r for r in records if r["scenario_id"] == sid and r["method"] == mth]
        for metric in ("mise", "mise_centered", "rmse", "coverage", "interval_score", "runtime_seconds"):
            v = np.array([r[metric] for r in sel])
            rows.append({"scenario_id": sid, "method": mth, "metric": metric,
                         "mean": float(v.mean()), "sd": float(v.std(ddof=1)) if v.size > 1 else 0.0,
                         "n_replicates": int(v.size)})
    return BenchmarkReport(rows, records)
