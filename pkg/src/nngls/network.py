"""One-hidden-layer sigmoid MLP with the decorrelated (GLS) loss and its gradients.

The GLS loss over a set of rows ``I`` is ``sum_{i in I} (Y*_i - O*_i)^2`` where
both starred quantities are graph convolutions over ``N*[i]``.  Gradients are
computed analytically: the residual of each row is pushed back through the
convolution weights onto the network outputs of its neighborhood, then through
the MLP in the usual way.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from .nngp import NngpFactors, decorrelate

PARAM_NAMES = ("W", "w0", "beta", "alpha0")


@dataclass
class MlpModel:
    """``f(x) = alpha0 + beta^T sigmoid(W^T x + w0)``."""

    W: np.ndarray
    w0: np.ndarray
    beta: np.ndarray
    alpha0: float
    activation: str = "sigmoid"
    init_seed: int | None = None

    def __post_init__(self):
        self.W = np.atleast_2d(np.asarray(self.W, dtype=np.float64))
        self.w0 = np.asarray(self.w0, dtype=np.float64).reshape(-1)
        self.beta = np.asarray(self.beta, dtype=np.float64).reshape(-1)
        self.alpha0 = float(self.alpha0)
        d1 = self.W.shape[1]
        if d1 < 1 or self.w0.size != d1 or self.beta.size != d1:
            raise ValueError("inconsistent hidden-layer shapes")
        if self.activation != "sigmoid":
            raise ValueError(f"unsupported activation {self.activation!r}")

    @property
    def d(self) -> int:
        return self.W.shape[0]

    @property
    def hidden_units(self) -> int:
        return self.W.shape[1]

    def copy(self) -> "MlpModel":
        return MlpModel(self.W.copy(), self.w0.copy(), self.beta.copy(), self.alpha0,
                        self.activation, self.init_seed)

    def __call__(self, X) -> np.ndarray:
        return forward(self, X)

    def to_dict(self) -> dict:
        return {
            "d": self.d,
            "hidden_units": self.hidden_units,
            "W": self.W.tolist(),
            "w0": self.w0.tolist(),
            "beta": self.beta.tolist(),
            "alpha0": self.alpha0,
            "activation": self.activation,
            "init_seed": self.init_seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MlpModel":
        W = np.asarray(d["W"], dtype=np.float64).reshape(int(d["d"]), int(d["hidden_units"]))
        return cls(W, d["w0"], d["beta"], d["alpha0"], d.get("activation", "sigmoid"),
                   d.get("init_seed"))


@dataclass
class GradientBundle:
    dW: np.ndarray
    dw0: np.ndarray
    dbeta: np.ndarray
    dalpha0: float

    def as_tuple(self):
        return self.dW, self.dw0, self.dbeta, self.dalpha0


def init_model(d: int, hidden_units: int = 50, seed: int = 0) -> MlpModel:
    """Glorot-uniform weights and ``U(-1/sqrt(d), 1/sqrt(d))`` hidden biases (seeded).

    Random hidden biases spread the sigmoid inflection points over the input
    range; with all biases at zero, fits of symmetric mean functions often
    stall on the saddle where the near-linear network predicts a constant.
    The output bias starts at zero.
    """
    rng = np.random.default_rng(seed)
    a_in = np.sqrt(6.0 / (d + hidden_units))
    a_out = np.sqrt(6.0 / (hidden_units + 1))
    W = rng.uniform(-a_in, a_in, size=(d, hidden_units))
    beta = rng.uniform(-a_out, a_out, size=hidden_units)
    w0 = rng.uniform(-1.0, 1.0, size=hidden_units) / np.sqrt(d)
    return MlpModel(W, w0, beta, 0.0, init_seed=int(seed))


def _check_X(model, X):
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X.reshape(-1, 1) if model.d == 1 else X.reshape(1, -1)
    if X.shape[1] != model.d:
        raise ValueError(f"model expects {model.d} covariates, got {X.shape[1]}")
    return X


def forward(model: MlpModel, X) -> np.ndarray:
    """Network output for every row of ``X``."""
    X = _check_X(model, X)
    return model.alpha0 + expit(X @ model.W + model.w0) @ model.beta


def _star_batch(factors: NngpFactors, subset):
    idx, V = factors.star_rows(subset)
    uniq, inv = np.unique(idx, return_inverse=True)
    return V, uniq, inv.reshape(idx.shape)


def _subset(factors, subset):
    if subset is None:
        return np.arange(factors.n)
    return np.asarray(subset, dtype=np.intp).reshape(-1)


def _residual_star(model, factors, X, Y, subset, y_star):
    subset = _subset(factors, subset)
    X = _check_X(model, X)
    if y_star is None:
        y_star = decorrelate(factors, Y)
    V, uniq, inv = _star_batch(factors, subset)
    Z = X[uniq] @ model.W + model.w0
    A = expit(Z)
    O = model.alpha0 + A @ model.beta
    o_star = np.einsum("ik,ik->i", V, O[inv])
    return y_star[subset] - o_star, V, uniq, inv, X, A


def gls_loss(model: MlpModel, factors: NngpFactors, X, Y, subset=None, y_star=None) -> float:
    """Decorrelated squared-error loss summed over ``subset`` (all rows by default).

    ``y_star`` may carry a precomputed ``decorrelate(factors, Y)``.
    """
    r = _residual_star(model, factors, X, Y, subset, y_star)[0]
    return float(np.dot(r, r))


def backward(model: MlpModel, factors: NngpFactors, X, Y, subset=None, y_star=None):
    """Loss and exact gradient of :func:`gls_loss` with respect to all weights.

    Returns
    -------
    loss : float
    grads : GradientBundle
    """
    r, V, uniq, inv, X, A = _residual_star(model, factors, X, Y, subset, y_star)
    # d loss / d O_u, accumulated over every convolution the output enters
    g = np.bincount(inv.reshape(-1), weights=(-2.0 * r[:, None] * V).reshape(-1),
                    minlength=uniq.size)
    dZ = np.outer(g, model.beta) * A * (1.0 - A)
    grads = GradientBundle(
        dW=X[uniq].T @ dZ,
        dw0=dZ.sum(axis=0),
        dbeta=A.T @ g,
        dalpha0=float(g.sum()),
    )
    return float(np.dot(r, r)), grads


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0


def adam_step(model: MlpModel, grads: GradientBundle, state: AdamState | None, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
    """One Adam update of every weight block; returns ``(new_model, new_state)``."""
    if state is None:
        state = AdamState()
    t = state.t + 1
    new_m, new_v, new_p = {}, {}, {}
    for name, g in zip(PARAM_NAMES, grads.as_tuple()):
        p = np.asarray(getattr(model, name), dtype=np.float64)
        g = np.asarray(g, dtype=np.float64)
        m = beta1 * state.m.get(name, np.zeros_like(p)) + (1 - beta1) * g
        v = beta2 * state.v.get(name, np.zeros_like(p)) + (1 - beta2) * g * g
        m_hat = m / (1 - beta1**t)
        v_hat = v / (1 - beta2**t)
        new_p[name] = p - lr * m_hat / (np.sqrt(v_hat) + eps)
        new_m[name], new_v[name] = m, v
    out = MlpModel(new_p["W"], new_p["w0"], new_p["beta"], float(new_p["alpha0"]),
                   model.activation, model.init_seed)
    return out, AdamState(new_m, new_v, t)


def sgd_step(model: MlpModel, grads: GradientBundle, state, lr: float):
    out = MlpModel(model.W - lr * grads.dW, model.w0 - lr * grads.dw0,
                   model.beta - lr * grads.dbeta, model.alpha0 - lr * grads.dalpha0,
                   model.activation, model.init_seed)
    return out, state
