"""NN-GLS training: OLS warm start, NNGP likelihood updates of the covariance
parameters, and mini-batch GLS training with early stopping.
"""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.optimize import minimize

from .covariance import CovarianceParams
from .exceptions import InsufficientDataError, NumericalError
from .network import MlpModel, adam_step, backward, forward, gls_loss, init_model, sgd_step
from .nngp import (NeighborGeometry, compute_factors, dag_geometry, decorrelate, kriging_weights,
                   nngp_neg_loglik)
from .spatial_core import NeighborDag, SpatialDataset, build_dag, find_prediction_neighbors

log = logging.getLogger(__name__)


class ThetaNotImprovedWarning(UserWarning):
    pass


@dataclass
class TrainConfig:
    hidden_units: int = 50
    batch_size: int = 50
    learning_rate: float = 0.1
    optimizer: str = "adam"
    max_epochs: int = 500
    patience: int = 20
    theta_update_interval: int = 5
    seed: int = 0
    m: int = 20
    fractions: tuple = (0.4, 0.1, 0.5)
    split_mode: str = "random"
    block_k: int = 3
    ordering: str = "coordinate_sum"
    reshuffle_batches: bool = False
    theta_max_evals: int = 500
    freeze_theta: bool = False
    profile_intercept: bool = True

    def __post_init__(self):
        self.fractions = tuple(float(f) for f in self.fractions)
        if len(self.fractions) != 3 or any(f < 0 for f in self.fractions):
            raise ValueError("fractions must be three nonnegative numbers")
        if abs(sum(self.fractions) - 1.0) > 1e-9:
            raise ValueError(f"fractions must sum to 1, got {self.fractions}")
        if self.fractions[0] <= 0:
            raise ValueError("training fraction must be positive")
        for name in ("hidden_units", "batch_size", "max_epochs", "patience", "theta_update_interval"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.m < 0:
            raise ValueError("m must be nonnegative")
        if self.split_mode not in ("random", "block"):
            raise ValueError(f"unknown split mode {self.split_mode!r}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["fractions"] = list(self.fractions)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    def replace(self, **kw) -> "TrainConfig":
        d = self.to_dict()
        d.update(kw)
        return TrainConfig.from_dict(d)


@dataclass
class FitResult:
    model: MlpModel
    theta: CovarianceParams
    history: list
    split: dict
    config: TrainConfig
    dag: dict
    best_epoch: int = 0
    ols_model: MlpModel | None = None
    theta_updates: int = 0

    def to_dict(self) -> dict:
        d = self.model.to_dict()
        d["theta"] = self.theta.to_dict()
        d["dag"] = dict(self.dag)
        d["config"] = self.config.to_dict()
        d["split"] = {k: np.asarray(v).tolist() for k, v in self.split.items()}
        d["best_epoch"] = self.best_epoch
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "FitResult":
        config = TrainConfig.from_dict(d["config"]) if "config" in d else TrainConfig()
        split = {k: np.asarray(v, dtype=np.intp) for k, v in d.get("split", {}).items()}
        return cls(model=MlpModel.from_dict(d), theta=CovarianceParams.from_dict(d["theta"]),
                   history=[], split=split, config=config, dag=dict(d["dag"]),
                   best_epoch=int(d.get("best_epoch", 0)))


def derive_seeds(seed: int, k: int) -> list:
    """Independent sub-seeds from one run seed via ``numpy.random.SeedSequence.spawn``."""
    return [int(s.generate_state(1, np.uint64)[0] >> np.uint64(1))
            for s in np.random.SeedSequence(int(seed)).spawn(k)]


def _split_sizes(n, fractions):
    raw = np.asarray(fractions) * n
    sizes = np.floor(raw).astype(int)
    rem = n - sizes.sum()
    # leftovers go to the largest fractional parts, earlier groups first on ties
    for j in np.argsort(-(raw - sizes), kind="stable")[:rem]:
        sizes[j] += 1
    return sizes


def split_data(n: int, fractions=(0.4, 0.1, 0.5), seed: int = 0, mode: str = "random",
               S=None, k: int = 3, max_attempts: int = 100) -> tuple:
    """Disjoint train / validation / test index sets covering ``0..n-1``.

    ``mode="random"`` draws a random permutation and cuts it by ``fractions``
    (floor, then leftovers to the largest fractional parts).  ``mode="block"``
    tiles the bounding box of ``S`` into ``k x k`` blocks, takes ``k`` of them
    as the test set with exactly one per block row and block column, and splits
    the remaining points into train and validation in the ratio of the first
    two fractions.
    """
    fractions = tuple(float(f) for f in fractions)
    if len(fractions) != 3 or any(f < 0 for f in fractions) or abs(sum(fractions) - 1) > 1e-9:
        raise ValueError(f"invalid fractions {fractions}")
    rng = np.random.default_rng(seed)
    if mode == "random":
        perm = rng.permutation(n)
        a, b, _ = _split_sizes(n, fractions)
        return np.sort(perm[:a]), np.sort(perm[a : a + b]), np.sort(perm[a + b :])
    if mode != "block":
        raise ValueError(f"unknown split mode {mode!r}")
    if S is None:
        raise ValueError("block split needs coordinates")
    S = np.asarray(S, dtype=np.float64)
    cells = block_cells(S, k)
    for _ in range(max_attempts):
        cols = rng.permutation(k)
        chosen = [(r, cols[r]) for r in range(k)]
        masks = [(cells[:, 0] == r) & (cells[:, 1] == c) for r, c in chosen]
        if any(not mk.any() for mk in masks):
            continue
        test = np.flatnonzero(np.logical_or.reduce(masks))
        rest = rng.permutation(np.setdiff1d(np.arange(n), test))
        tv = fractions[0] + fractions[1]
        a, _ = _split_sizes(rest.size, (fractions[0] / tv, fractions[1] / tv))
        return np.sort(rest[:a]), np.sort(rest[a:]), test
    raise ValueError(f"block split found an empty test block in {max_attempts} attempts")


def block_cells(S, k):
    """``(row, column)`` block index of each point on a ``k x k`` tiling of the bounding box."""
    lo, hi = S.min(axis=0), S.max(axis=0)
    span = np.where(hi > lo, hi - lo, 1.0)
    cells = np.floor((S - lo) / span * k).astype(int)
    return np.clip(cells, 0, k - 1)[:, ::-1]  # rows follow the second axis


def domain_diameter(S) -> float:
    S = np.asarray(S, dtype=np.float64)
    return float(np.hypot(*(S.max(axis=0) - S.min(axis=0)))) or 1.0


def default_bounds(S, residual) -> dict:
    var = float(np.var(residual)) or 1.0
    diam = domain_diameter(S)
    return {
        "sigma2": (1e-6 * var, 1e3 * var),
        "phi": (0.1 / diam, 100.0 / diam),
        "tau2": (1e-6 * var, 1e3 * var),
    }


def default_theta_init(S, residual, nu=0.5) -> CovarianceParams:
    var = float(np.var(residual)) or 1.0
    return CovarianceParams(0.9 * var, 10.0 / domain_diameter(S), nu, 0.1 * var)


@dataclass
class ThetaEstimate:
    theta: CovarianceParams
    neg_loglik: float
    init_neg_loglik: float
    improved: bool
    n_evals: int


def estimate_theta(dag: NeighborDag, S, residual, theta_init: CovarianceParams | None = None,
                   bounds: dict | None = None, max_evals: int = 500, step: float = 1.0,
                   return_info: bool = False, geometry: NeighborGeometry | None = None):
    """Maximum NNGP likelihood estimate of ``(sigma2, phi, tau2)`` with ``nu`` held fixed.

    Nelder-Mead on the log parameters inside box bounds.  The result never has
    a larger negative log-likelihood than ``theta_init``; when the optimizer
    fails to improve on it, ``theta_init`` is returned with a
    :class:`ThetaNotImprovedWarning`.
    """
    residual = np.asarray(residual, dtype=np.float64)
    if residual.size < 2:
        raise InsufficientDataError("insufficient data: need at least two residuals to estimate theta")
    if theta_init is None:
        theta_init = default_theta_init(S, residual)
    if bounds is None:
        bounds = default_bounds(S, residual)
    nu = theta_init.nu
    lb = np.log([bounds["sigma2"][0], bounds["phi"][0], bounds["tau2"][0]])
    ub = np.log([bounds["sigma2"][1], bounds["phi"][1], bounds["tau2"][1]])

    def unpack(z):
        s2, ph, t2 = np.exp(z)
        return CovarianceParams(s2, ph, nu, t2)

    geom = geometry if geometry is not None else dag_geometry(dag, S)

    def objective(z):
        try:
            val = nngp_neg_loglik(dag, residual, unpack(z), S, geom)
        except (NumericalError, ValueError):
            return 1e300
        return val if math.isfinite(val) else 1e300

    z0 = np.clip(np.log([theta_init.sigma2, theta_init.phi, max(theta_init.tau2, 1e-300)]), lb, ub)
    f_init = nngp_neg_loglik(dag, residual, theta_init, S, geom)
    simplex = np.vstack([z0, z0 + np.diag([step, step, step])])
    simplex = np.clip(simplex, lb, ub)
    res = minimize(objective, z0, method="Nelder-Mead", bounds=list(zip(lb, ub)),
                   options={"maxfev": max_evals, "initial_simplex": simplex,
                            "xatol": 1e-3, "fatol": 1e-4})
    improved = bool(res.fun < f_init)
    if improved:
        theta, f_best = unpack(res.x), float(res.fun)
    else:
        warnings.warn("theta optimizer did not improve on the initial value", ThetaNotImprovedWarning)
        theta, f_best = theta_init, f_init
    if return_info:
        return ThetaEstimate(theta, f_best, f_init, improved, int(res.nfev))
    return theta


class _ConditionalLoss:
    """Decorrelated loss of held-out rows, each conditioned on its nearest training rows."""

    def __init__(self, S_train, S_eval, X_train, Y_train, X_eval, Y_eval, m, theta):
        self.X_train, self.Y_train = X_train, Y_train
        self.X_eval, self.Y_eval = X_eval, Y_eval
        self.S_train, self.S_eval = S_train, S_eval
        self.pn = find_prediction_neighbors(S_train, S_eval, m)
        self.geometry = NeighborGeometry.build(S_train, S_eval, self.pn.nbr, self.pn.counts)
        self.set_theta(theta)

    def set_theta(self, theta):
        self.B, self.F = kriging_weights(self.S_train, self.S_eval, self.pn.nbr, self.pn.counts,
                                         theta, geometry=self.geometry)

    def __call__(self, model) -> float:
        if self.Y_eval.size == 0:
            return float("nan")
        r_eval = self.Y_eval - forward(model, self.X_eval)
        r = r_eval
        if self.pn.nbr.shape[1]:
            rows = np.unique(self.pn.nbr)
            r_tr = np.zeros(self.Y_train.size)
            r_tr[rows] = self.Y_train[rows] - forward(model, self.X_train[rows])
            r = r_eval - np.einsum("ik,ik->i", self.B, r_tr[self.pn.nbr])
        return float(np.sum(r * r / self.F))


_UNIT = CovarianceParams(1.0, 1.0, 0.5, 0.0)


def _partition(n, batch_size, rng):
    perm = rng.permutation(n)
    nb = max(1, int(math.ceil(n / batch_size)))
    return np.array_split(perm, nb)


def profile_intercept(model: MlpModel, factors, X, Y, y_star=None) -> MlpModel:
    """Copy of ``model`` whose output bias minimizes the full decorrelated loss.

    With every other weight fixed the loss is quadratic in ``alpha0``, so the
    minimizer is a one-regressor GLS fit of ``Y - (f - alpha0)`` on a constant.
    """
    if y_star is None:
        y_star = decorrelate(factors, Y)
    one = decorrelate(factors, np.ones(Y.size))
    o = decorrelate(factors, forward(model, X) - model.alpha0)
    out = model.copy()
    out.alpha0 = float(np.dot(one, y_star - o) / np.dot(one, one))
    return out


def _run_epochs(model, factors, X, Y, val_loss, config, rng, max_epochs, on_epoch=None):
    """Mini-batch training with early stopping.

    Returns ``(best_model, history, best_epoch, state)``.  ``on_epoch(epoch,
    model, state)`` may swap ``state["factors"]`` and ``state["y_star"]`` and
    returns True when it did; see :func:`fit_nngls`.
    """
    state = {"factors": factors, "y_star": decorrelate(factors, Y)}
    n = Y.size
    batches = _partition(n, config.batch_size, rng)
    step = adam_step if config.optimizer == "adam" else sgd_step
    opt_state = None
    use_val = val_loss is not None and val_loss.Y_eval.size > 0

    def score(mdl):
        if use_val:
            return val_loss(mdl)
        return gls_loss(mdl, state["factors"], X, Y, None, state["y_star"])

    # the starting point is not a candidate: the snapshot comes from a trained epoch
    best_model, best_score, best_epoch, since = model.copy(), math.inf, 0, 0
    history = []
    for epoch in range(1, max_epochs + 1):
        if config.reshuffle_batches:
            batches = _partition(n, config.batch_size, rng)
        for b in batches:
            _, g = backward(model, state["factors"], X, Y, b, state["y_star"])
            model, opt_state = step(model, g, opt_state, config.learning_rate)
        if config.profile_intercept:
            model = profile_intercept(model, state["factors"], X, Y, state["y_star"])
        updated = False
        if on_epoch is not None:
            updated = on_epoch(epoch, model, state)
            if updated and best_epoch:
                best_score = score(best_model)
        train = gls_loss(model, state["factors"], X, Y, None, state["y_star"])
        sc = score(model)
        if not (math.isfinite(train) and math.isfinite(sc)):
            raise NumericalError(f"non-finite loss at epoch {epoch} (train={train}, val={sc})")
        th = state["factors"].theta
        history.append({"epoch": epoch, "train_loss": train, "val_loss": sc, "sigma2": th.sigma2,
                        "phi": th.phi, "tau2": th.tau2, "theta_updated": updated})
        if sc < best_score:
            best_model, best_score, best_epoch, since = model.copy(), sc, epoch, 0
        else:
            since += 1
            if since >= config.patience:
                break
    return best_model, history, best_epoch, state


def fit_ols_warm_start(X, Y, config: TrainConfig, train=None, val=None, init=None):
    """Non-spatial network trained on the plain squared-error loss.

    Returns ``(model, history)``.  ``train``/``val`` default to the random split
    implied by ``config``.
    """
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X.reshape(-1, 1)
    Y = np.asarray(Y, dtype=np.float64).reshape(-1)
    n = Y.size
    s_split, s_init, s_batch = derive_seeds(config.seed, 3)
    if train is None:
        train, val, _ = split_data(n, config.fractions, s_split)
    # an identity working precision turns the GLS machinery into plain OLS
    S_dummy = np.column_stack([np.arange(train.size, dtype=float), np.zeros(train.size)])
    factors = compute_factors(build_dag(S_dummy, 0), S_dummy, _UNIT)
    val_loss = None
    if val is not None and len(val):
        val_loss = _ConditionalLoss(S_dummy, np.zeros((len(val), 2)), X[train], Y[train],
                                    X[val], Y[val], 0, _UNIT)
    model = init if init is not None else init_model(X.shape[1], config.hidden_units, s_init)
    best, history, _, _ = _run_epochs(model, factors, X[train], Y[train], val_loss, config,
                                      np.random.default_rng(s_batch), config.max_epochs)
    for h in history:
        # no covariance parameters exist yet during the warm start
        h.update(phase="ols", sigma2=math.nan, phi=math.nan, tau2=math.nan)
    return best, history


def fit_nngls(dataset: SpatialDataset, config: TrainConfig | None = None, nu: float = 0.5,
              theta_init: CovarianceParams | None = None, init_model_: MlpModel | None = None,
              split: tuple | None = None) -> FitResult:
    """Fit the network mean with the NNGP-decorrelated loss.

    Steps: split the rows, build the DAG over training locations, warm start
    with the non-spatial network, estimate the covariance parameters from its
    residuals, then train on the decorrelated loss, re-estimating the
    parameters every ``theta_update_interval`` epochs and stopping once the
    validation loss has not improved for ``patience`` epochs.  The model with
    the best validation loss is returned.

    ``theta_init`` seeds the parameter estimation (used as-is when
    ``config.freeze_theta``); ``init_model_`` replaces the warm start.
    """
    config = config or TrainConfig()
    n = dataset.n
    s_split, s_init, s_batch = derive_seeds(config.seed, 3)
    if split is None:
        split = split_data(n, config.fractions, s_split, config.split_mode, dataset.S, config.block_k)
    train, val, test = (np.asarray(a, dtype=np.intp) for a in split)
    if train.size < 2:
        raise InsufficientDataError("insufficient data: fewer than two training rows")
    X, Y, S = dataset.X[train], dataset.Y[train], dataset.S[train]
    ols_history = []
    if init_model_ is None:
        ols_model, ols_history = fit_ols_warm_start(dataset.X, dataset.Y, config, train, val)
    else:
        ols_model = init_model_.copy()
    model = ols_model.copy()
    dag = build_dag(S, config.m, config.ordering)
    geom = dag_geometry(dag, S)
    resid = Y - forward(model, X)
    n_updates = 0
    if config.freeze_theta and theta_init is not None:
        theta = theta_init
    else:
        if theta_init is not None:
            theta_init = theta_init.replace(nu=nu)
        else:
            theta_init = default_theta_init(S, resid, nu)
        theta = estimate_theta(dag, S, resid, theta_init, default_bounds(S, resid),
                               config.theta_max_evals, geometry=geom)
        n_updates += 1
    split_d = {"train": train, "val": val, "test": test}
    dag_d = dag.describe()

    if config.m == 0:
        # with no neighbors the decorrelated loss is a rescaled OLS loss: the warm start is the fit
        return FitResult(ols_model, theta, ols_history or [{"epoch": 0}], split_d, config, dag_d,
                         0, ols_model, n_updates)

    factors = compute_factors(dag, S, theta, geom)
    val_loss = None
    if val.size:
        val_loss = _ConditionalLoss(S, dataset.S[val], X, Y, dataset.X[val], dataset.Y[val],
                                    config.m, theta)
    bounds = None
    counter = {"updates": n_updates}

    def on_epoch(epoch, mdl, state):
        nonlocal bounds
        if config.freeze_theta or epoch % config.theta_update_interval:
            return False
        r = Y - forward(mdl, X)
        bounds = default_bounds(S, r)
        th = estimate_theta(dag, S, r, state["factors"].theta, bounds, config.theta_max_evals,
                            step=0.2, geometry=geom)
        if th == state["factors"].theta:
            return False
        state["factors"] = compute_factors(dag, S, th, geom)
        state["y_star"] = decorrelate(state["factors"], Y)
        if val_loss is not None:
            val_loss.set_theta(th)
        counter["updates"] += 1
        return True

    with warnings.catch_warnings():
        warnings.simplefilter("ignore", ThetaNotImprovedWarning)
        best, history, best_epoch, state = _run_epochs(
            model, factors, X, Y, val_loss, config, np.random.default_rng(s_batch),
            config.max_epochs, on_epoch)
    for h in history:
        h["phase"] = "gls"
    # parameters matching the returned network: refit on its residuals
    theta_final = state["factors"].theta
    if not config.freeze_theta:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", ThetaNotImprovedWarning)
            theta_final = estimate_theta(dag, S, Y - forward(best, X), theta_final,
                                         default_bounds(S, Y - forward(best, X)),
                                         config.theta_max_evals, step=0.2, geometry=geom)
    log.debug("fit_nngls: %d epochs, best %d, theta %s", len(history), best_epoch, theta_final)
    return FitResult(best, theta_final, ols_history + history, split_d, config, dag_d,
                     best_epoch, ols_model, counter["updates"])
