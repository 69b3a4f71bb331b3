"""Kriging predictions, spatial-bootstrap bands for the mean, and partial dependence."""

from __future__ import annotations

import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np

from .covariance import CovarianceParams, matern
from .exceptions import InsufficientDataError, NumericalError
from .network import MlpModel, forward
from .nngp import compute_factors, correlate_back, decorrelate, kriging_weights
from .spatial_core import SpatialDataset, build_dag, find_prediction_neighbors
from .trainer import FitResult, TrainConfig, derive_seeds, fit_nngls

log = logging.getLogger(__name__)

Z_975 = 1.959964
Z_025 = -1.959964

# agreement required between the two kriging routes before a prediction is returned
_ROUTE_ATOL = 1e-8


@dataclass
class PredictionResult:
    y_hat: np.ndarray
    sigma0: np.ndarray
    pi_lower: np.ndarray
    pi_upper: np.ndarray
    f_hat: np.ndarray

    def to_columns(self, S0) -> dict:
        S0 = np.asarray(S0, dtype=np.float64).reshape(-1, 2)
        return {"s1": S0[:, 0], "s2": S0[:, 1], "y_hat": self.y_hat, "sigma0": self.sigma0,
                "pi_lower": self.pi_lower, "pi_upper": self.pi_upper}


@dataclass
class BootstrapBand:
    lower: np.ndarray
    upper: np.ndarray
    B: int
    level: float
    n_failed: int = 0
    replicates: np.ndarray | None = None  # (B - n_failed, n_query) replicate curves


def _check_queries(model: MlpModel, X0, S0):
    X0 = np.asarray(X0, dtype=np.float64)
    if X0.ndim == 1:
        X0 = X0.reshape(-1, 1) if model.d == 1 else X0.reshape(1, -1)
    S0 = np.asarray(S0, dtype=np.float64)
    if S0.ndim == 1:
        S0 = S0.reshape(1, -1)
    if S0.ndim != 2 or S0.shape[1] != 2:
        raise ValueError(f"query coordinates must have shape (q, 2), got {S0.shape}")
    if X0.shape[1] != model.d:
        raise ValueError(f"model expects {model.d} covariates, got {X0.shape[1]}")
    if X0.shape[0] != S0.shape[0]:
        raise ValueError(f"{X0.shape[0]} covariate rows but {S0.shape[0]} query locations")
    if not (np.all(np.isfinite(X0)) and np.all(np.isfinite(S0))):
        raise ValueError("queries contain non-finite entries")
    return X0, S0


def kriging_routes(model: MlpModel, theta: CovarianceParams, X_train, Y_train, S_train,
                   X0, S0, m: int = 20) -> dict:
    """Both forms of the nearest-neighbor kriging predictor.

    ``gnn`` deconvolves the decorrelated network output:
    ``sqrt(F0) * O*_0 + B_0 . Y_N``.  ``direct`` adds the kriged residual to the
    network output, ``f(X0) + S_0N S_NN^{-1} (Y_N - f_N)``, with its own dense
    solve per query.  Also returns ``f_hat`` and the conditional variance ``F0``.
    """
    X0, S0 = _check_queries(model, X0, S0)
    X_train = np.asarray(X_train, dtype=np.float64).reshape(-1, model.d)
    Y_train = np.asarray(Y_train, dtype=np.float64).reshape(-1)
    S_train = np.asarray(S_train, dtype=np.float64)
    pn = find_prediction_neighbors(S_train, S0, m)
    nb = pn.nbr
    f0 = forward(model, X0)
    if nb.shape[1] == 0:
        F0 = np.full(f0.size, theta.total_variance)
        return {"gnn": f0.copy(), "direct": f0.copy(), "f_hat": f0, "F0": F0, "neighbors": pn}
    used = np.unique(nb)
    f_tr = np.zeros(Y_train.size)
    f_tr[used] = forward(model, X_train[used])
    fN, yN = f_tr[nb], Y_train[nb]

    B0, F0 = kriging_weights(S_train, S0, nb, pn.counts, theta)
    o_star = (f0 - np.einsum("qk,qk->q", B0, fN)) / np.sqrt(F0)
    gnn = np.sqrt(F0) * o_star + np.einsum("qk,qk->q", B0, yN)

    A = S_train[nb]
    D = np.sqrt(((A[:, :, None, :] - A[:, None, :, :]) ** 2).sum(-1))
    K = matern(D, theta) + theta.tau2 * np.eye(nb.shape[1])
    # a new observation's nugget is independent of the training nuggets, even
    # when the query coincides with a training location
    k0 = matern(np.sqrt(((A - S0[:, None, :]) ** 2).sum(-1)), theta)
    w = np.linalg.solve(K, k0[:, :, None])[:, :, 0]
    direct = f0 + np.einsum("qk,qk->q", w, yN - fN)
    return {"gnn": gnn, "direct": direct, "f_hat": f0, "F0": F0, "neighbors": pn}


def _training_rows(fit: FitResult, dataset: SpatialDataset):
    train = fit.split.get("train")
    if train is None or len(train) == 0:
        return np.arange(dataset.n)
    return np.asarray(train, dtype=np.intp)


def predict(fit: FitResult, dataset: SpatialDataset, X0, S0, pi_center: str = "y_hat") -> PredictionResult:
    """Point predictions, kriging standard deviations and 95% prediction intervals.

    Neighbors of each query are its ``m`` nearest training locations.  The
    returned ``y_hat`` comes from the graph-convolution route and is checked
    against the direct kriging formula.  Intervals are ``center + z * sigma0``
    where ``center`` is ``y_hat`` (default) or, with ``pi_center="f_hat"``,
    the network output alone.
    """
    if pi_center not in ("y_hat", "f_hat"):
        raise ValueError(f"pi_center must be 'y_hat' or 'f_hat', got {pi_center!r}")
    tr = _training_rows(fit, dataset)
    m = int(fit.dag.get("m", fit.config.m))
    routes = kriging_routes(fit.model, fit.theta, dataset.X[tr], dataset.Y[tr], dataset.S[tr],
                            X0, S0, m)
    gap = np.abs(routes["gnn"] - routes["direct"])
    if gap.size and not np.all(gap <= _ROUTE_ATOL * (1.0 + np.abs(routes["direct"]))):
        raise NumericalError(f"kriging routes disagree by {gap.max():.3e}; neighbor systems are ill-conditioned")
    y_hat = routes["gnn"]
    sigma0 = np.sqrt(routes["F0"])
    center = y_hat if pi_center == "y_hat" else routes["f_hat"]
    return PredictionResult(y_hat, sigma0, center + Z_025 * sigma0, center + Z_975 * sigma0,
                            routes["f_hat"])


def _replicate_job(args):
    (dataset, rows, base, Y_fit_rows, config, nu, theta, init, split, X_new) = args
    Y = dataset.Y.copy()
    Y[rows] = base + Y_fit_rows
    ds = dataset.with_response(Y)
    try:
        res = fit_nngls(ds, config, nu=nu, theta_init=theta, init_model_=init, split=split)
    except (NumericalError, InsufficientDataError, np.linalg.LinAlgError, FloatingPointError) as exc:
        return None, f"{type(exc).__name__}: {exc}"
    return forward(res.model, X_new), None


def bootstrap_ci(dataset: SpatialDataset, config: TrainConfig, fit: FitResult, B: int = 100,
                 level: float = 0.95, X_new=None, seed: int | None = None, replace: bool = False,
                 freeze_theta: bool = False, epoch_fraction: float = 0.5,
                 warm_start: str = "ols", permutations=None, n_jobs: int = 1,
                 max_fail_fraction: float = 0.1, distinct_seeds: bool = True) -> BootstrapBand:
    """Spatial-bootstrap confidence band for the mean function at ``X_new``.

    The fitting rows (training plus validation) are decorrelated with the NNGP
    factors at the fitted parameters, the decorrelated residuals are resampled
    (a permutation by default, with replacement when ``replace``), correlated
    back and added to the fitted mean.  Each replicate is refit and evaluated
    at ``X_new``; the band holds pointwise quantiles of the replicate curves.

    Parameters
    ----------
    epoch_fraction : float
        Replicate fits run ``ceil(epoch_fraction * config.max_epochs)`` epochs at most.
    warm_start : {"ols", "point"}
        Run each replicate from a fresh non-spatial warm start (the default), or
        start it from the point-estimate network.  Both start the covariance at
        the point estimate.  Point starts keep replicates close to the point fit
        and give bands that are too narrow.
    permutations : sequence of index arrays, optional
        Resampling indices for each replicate (overrides the random draw).
    n_jobs : int
        Worker processes for the replicate fits.
    distinct_seeds : bool
        Give every replicate its own training seed, so that initialization and
        mini-batch randomness enter the band.  With ``False`` and a point start,
        an identity resampling reproduces the point fit exactly.
    """
    if B < 2:
        raise ValueError("B must be at least 2")
    if not 0 < level < 1:
        raise ValueError("level must lie in (0, 1)")
    if warm_start not in ("point", "ols"):
        raise ValueError(f"warm_start must be 'point' or 'ols', got {warm_start!r}")
    if X_new is None:
        X_new = dataset.X
    X_new = np.asarray(X_new, dtype=np.float64)
    if X_new.ndim == 1:
        X_new = X_new.reshape(-1, 1) if fit.model.d == 1 else X_new.reshape(1, -1)

    split = {k: np.asarray(fit.split.get(k, []), dtype=np.intp) for k in ("train", "val", "test")}
    rows = np.sort(np.concatenate([split["train"], split["val"]]))
    if rows.size == 0:
        rows = np.arange(dataset.n)
        split["train"] = rows
    S = dataset.S[rows]
    f_hat = forward(fit.model, dataset.X[rows])
    factors = compute_factors(build_dag(S, config.m, config.ordering), S, fit.theta)
    omega = decorrelate(factors, dataset.Y[rows] - f_hat)

    n = rows.size
    if permutations is not None:
        idx_list = [np.asarray(p, dtype=np.intp) for p in permutations]
        if len(idx_list) != B or any(p.shape != (n,) for p in idx_list):
            raise ValueError(f"permutations must hold {B} index arrays of length {n}")
    else:
        rng = np.random.default_rng(config.seed if seed is None else seed)
        idx_list = [rng.integers(0, n, n) if replace else rng.permutation(n) for _ in range(B)]

    cfg = config.replace(max_epochs=max(1, int(math.ceil(epoch_fraction * config.max_epochs))),
                         freeze_theta=bool(freeze_theta))
    cfgs = [cfg] * B
    if distinct_seeds:
        cfgs = [cfg.replace(seed=s) for s in derive_seeds(cfg.seed + 1, B)]
    init = fit.model if warm_start == "point" else None
    fit_split = (split["train"], split["val"], split["test"])
    jobs = [(dataset, rows, f_hat, correlate_back(factors, omega[idx]), c, fit.theta.nu,
             fit.theta, init, fit_split, X_new) for idx, c in zip(idx_list, cfgs)]
    if n_jobs > 1:
        with ProcessPoolExecutor(max_workers=n_jobs) as pool:
            results = list(pool.map(_replicate_job, jobs))
    else:
        results = [_replicate_job(j) for j in jobs]

    curves = [r for r, _ in results if r is not None]
    errors = [e for _, e in results if e is not None]
    for e in errors:
        log.warning("bootstrap replicate failed: %s", e)
    if len(errors) > max_fail_fraction * B or len(curves) < 2:
        raise NumericalError(f"{len(errors)} of {B} bootstrap replicates failed")
    curves = np.vstack(curves)
    a = (1.0 - level) / 2.0
    lower, upper = np.quantile(curves, [a, 1.0 - a], axis=0)
    return BootstrapBand(lower, upper, B, level, len(errors), curves)


def partial_dependence(fit, dataset, j: int, grid) -> np.ndarray:
    """Average network output with feature ``j`` set to each grid value.

    ``fit`` may be a :class:`FitResult` or an :class:`MlpModel`; ``dataset`` a
    :class:`SpatialDataset` or a covariate matrix.
    """
    model = fit.model if isinstance(fit, FitResult) else fit
    X = dataset.X if isinstance(dataset, SpatialDataset) else np.asarray(dataset, dtype=np.float64)
    if X.ndim == 1:
        X = X.reshape(-1, 1)
    if not 0 <= j < X.shape[1]:
        raise ValueError(f"feature index {j} out of range for {X.shape[1]} covariates")
    grid = np.asarray(grid, dtype=np.float64).reshape(-1)
    if not np.all(np.isfinite(grid)):
        raise ValueError("grid must be finite")
    out = np.empty(grid.size)
    Xm = X.copy()
    for k, t in enumerate(grid):
        Xm[:, j] = t
        out[k] = forward(model, Xm).mean()
    return out
