"""Nearest-neighbor Gaussian process factors and the transforms built on them.

For a DAG with neighbor sets ``N(j)`` the working precision is
``Q = (I - B)^T F^{-1} (I - B)`` where row ``j`` of ``B`` holds the kriging
weights of location ``j`` on its neighbors and ``F[j]`` the matching
conditional variance.  Nothing here forms ``Q`` densely except the explicitly
size-guarded diagnostic helpers.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import spsolve_triangular

from .covariance import CovarianceParams, _check_dense, cov_matrix, matern
from .exceptions import NumericalError
from .spatial_core import NeighborDag, build_dag

DIAGNOSTIC_MAX_N = 2000
ROW_CHUNK = 2048


@dataclass(frozen=True)
class NeighborGeometry:
    """Distances inside each neighbor block, padded to a common width.

    Independent of the covariance parameters, so it is computed once per
    neighbor structure and reused across likelihood evaluations.
    """

    D_nn: np.ndarray  # (k, w, w) neighbor-to-neighbor distances
    d_tn: np.ndarray  # (k, w) target-to-neighbor distances
    mask: np.ndarray  # (k, w) True where a neighbor slot is used

    @classmethod
    def build(cls, S_pool, S_target, nbr, counts) -> "NeighborGeometry":
        S_pool = np.asarray(S_pool, dtype=np.float64)
        S_target = np.asarray(S_target, dtype=np.float64).reshape(-1, 2)
        k, w = nbr.shape
        mask = np.arange(w)[None, :] < np.asarray(counts)[:, None]
        D_nn, d_tn = np.empty((k, w, w)), np.empty((k, w))
        for a in range(0, k, ROW_CHUNK):
            b = min(a + ROW_CHUNK, k)
            A = S_pool[np.where(mask[a:b], nbr[a:b], 0)]
            diff = A[:, :, None, :] - A[:, None, :, :]
            D_nn[a:b] = np.sqrt(np.einsum("...k,...k->...", diff, diff))
            diff = A - S_target[a:b, None, :]
            d_tn[a:b] = np.sqrt(np.einsum("...k,...k->...", diff, diff))
        return cls(D_nn, d_tn, mask)


def kriging_weights(S_pool, S_target, nbr, counts, theta: CovarianceParams, labels=None,
                    geometry: NeighborGeometry | None = None):
    """Kriging weights and conditional variances of targets given pooled neighbors.

    Parameters
    ----------
    S_pool : ndarray, shape (N, 2)
        Coordinates that neighbor indices refer to.
    S_target : ndarray, shape (k, 2)
        Locations being predicted.
    nbr : ndarray of int, shape (k, w)
        Neighbor indices into ``S_pool``; the first ``counts[r]`` entries of
        row ``r`` are used.
    counts : ndarray of int, shape (k,)
    theta : CovarianceParams
    labels : ndarray, optional
        Row labels used in error messages (defaults to row numbers).
    geometry : NeighborGeometry, optional
        Precomputed distances for this neighbor structure.

    Returns
    -------
    B : ndarray, shape (k, w)
        Weights, zero beyond ``counts``.
    F : ndarray, shape (k,)
        Conditional variances ``Sigma_00 - Sigma_0N Sigma_NN^{-1} Sigma_N0``.
    """
    if geometry is None:
        geometry = NeighborGeometry.build(S_pool, S_target, nbr, counts)
    k, w = geometry.d_tn.shape
    if labels is None:
        labels = np.arange(k)
    F = np.full(k, theta.total_variance)
    if w == 0 or k == 0:
        return np.zeros((k, w)), F
    B = np.empty((k, w))
    # fixed-size row chunks keep temporaries small, so cost stays linear in k
    for a in range(0, k, ROW_CHUNK):
        b = min(a + ROW_CHUNK, k)
        B[a:b], F[a:b] = _kriging_chunk(geometry.D_nn[a:b], geometry.d_tn[a:b],
                                        geometry.mask[a:b], theta, labels[a:b])
    return B, F


def _kriging_chunk(D_nn, d_tn, mask, theta, labels):
    w = mask.shape[1]
    F = np.full(mask.shape[0], theta.total_variance)
    mask2 = mask[:, :, None] & mask[:, None, :]
    K = np.where(mask2, matern(D_nn, theta), 0.0)
    # unused slots become an identity block so every row factors at full width
    K[:, np.arange(w), np.arange(w)] = np.where(mask, theta.total_variance, 1.0)
    kx = np.where(mask, matern(d_tn, theta), 0.0)
    try:
        L = np.linalg.cholesky(K)
    except np.linalg.LinAlgError:
        bad = _first_non_pd(K)
        raise NumericalError(
            f"neighbor covariance block for row {labels[bad]} is not positive "
            f"definite (near-duplicate locations or invalid parameters {theta})"
        ) from None
    z, B = _cholesky_solve(L, kx)
    F = F - np.einsum("rj,rj->r", z, z)
    if np.any(~(F > 0)):
        bad = int(np.flatnonzero(~(F > 0))[0])
        raise NumericalError(
            f"conditional variance for row {labels[bad]} is not positive ({F[bad]:.3e}); "
            f"parameters {theta}"
        )
    return B, F


def _cholesky_solve(L, k):
    """Row-batched ``z = L^{-1} k`` and ``b = L^{-T} z`` by substitution."""
    w = k.shape[1]
    z = np.empty_like(k)
    for j in range(w):
        z[:, j] = (k[:, j] - np.einsum("rl,rl->r", L[:, j, :j], z[:, :j])) / L[:, j, j]
    b = np.empty_like(z)
    for j in range(w - 1, -1, -1):
        b[:, j] = (z[:, j] - np.einsum("rl,rl->r", L[:, j + 1 :, j], b[:, j + 1 :])) / L[:, j, j]
    return z, b


def _first_non_pd(K):
    for r in range(K.shape[0]):
        try:
            np.linalg.cholesky(K[r])
        except np.linalg.LinAlgError:
            return r
    return 0


@dataclass(frozen=True)
class NngpFactors:
    """Sparse NNGP factors for one DAG and one parameter value."""

    dag: NeighborDag
    S: np.ndarray
    theta: CovarianceParams
    B: np.ndarray
    F: np.ndarray

    @property
    def n(self) -> int:
        return self.F.size

    @property
    def nbr(self) -> np.ndarray:
        return self.dag.nbr

    @property
    def counts(self) -> np.ndarray:
        return self.dag.counts

    @property
    def B_rows(self) -> list:
        return [self.B[j, : self.counts[j]] for j in range(self.n)]

    @property
    def star_index(self) -> np.ndarray:
        """``(n, w + 1)`` index matrix: own index, then neighbors (padding repeats own index)."""
        own = np.arange(self.n)[:, None]
        nb = np.where(self.nbr >= 0, self.nbr, own)
        return np.hstack([own, nb])

    @property
    def star_weights(self) -> np.ndarray:
        """Graph-convolution weights ``v_j = (1, -B_j) / sqrt(F_j)`` as an ``(n, w + 1)`` matrix."""
        return np.hstack([np.ones((self.n, 1)), -self.B]) / np.sqrt(self.F)[:, None]

    def star_rows(self, rows) -> tuple:
        """``(star_index[rows], star_weights[rows])`` without touching other rows."""
        rows = np.asarray(rows, dtype=np.intp)
        own = rows[:, None]
        nb = self.nbr[rows]
        idx = np.hstack([own, np.where(nb >= 0, nb, own)])
        V = np.hstack([np.ones((rows.size, 1)), -self.B[rows]]) / np.sqrt(self.F[rows])[:, None]
        return idx, V

    @property
    def v_weights(self) -> list:
        V = self.star_weights
        return [V[j, : self.counts[j] + 1] for j in range(self.n)]

    def decorrelation_operator(self) -> sp.csr_matrix:
        """Sparse ``F^{-1/2} (I - B)`` in location coordinates."""
        n, w = self.n, self.B.shape[1]
        rows = np.repeat(np.arange(n), w + 1)
        cols = self.star_index.reshape(-1)
        vals = self.star_weights.reshape(-1)
        keep = vals != 0
        return sp.csr_matrix((vals[keep], (rows[keep], cols[keep])), shape=(n, n))

    def precision(self) -> sp.csr_matrix:
        """Sparse working precision ``Q``."""
        U = self.decorrelation_operator()
        return (U.T @ U).tocsr()


def dag_geometry(dag: NeighborDag, S) -> NeighborGeometry:
    return NeighborGeometry.build(S, S, dag.nbr, dag.counts)


def compute_factors(dag: NeighborDag, S, theta: CovarianceParams,
                    geometry: NeighborGeometry | None = None) -> NngpFactors:
    """Kriging weights and conditional variances for every location of the DAG.

    Each row solves an at most ``m x m`` system through its Cholesky factor;
    a block that fails to factor raises :class:`NumericalError`.
    """
    S = np.asarray(S, dtype=np.float64)
    if S.shape[0] != dag.n:
        raise ValueError(f"DAG has {dag.n} locations but S has {S.shape[0]} rows")
    B, F = kriging_weights(S, S, dag.nbr, dag.counts, theta, geometry=geometry)
    return NngpFactors(dag=dag, S=S, theta=theta, B=B, F=F)


def decorrelate(factors: NngpFactors, x) -> np.ndarray:
    """Graph convolution ``x*_j = v_j^T x_{N*[j]}``, i.e. ``F^{-1/2}(I - B) x``.

    Accepts a vector or a matrix whose rows are locations.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.shape[0] != factors.n:
        raise ValueError(f"expected {factors.n} rows, got {x.shape[0]}")
    nb = np.where(factors.nbr >= 0, factors.nbr, 0)
    sqF = np.sqrt(factors.F)
    if x.ndim == 1:
        return (x - np.einsum("jk,jk->j", factors.B, x[nb])) / sqF
    return (x - np.einsum("jk,jk...->j...", factors.B, x[nb])) / sqF[:, None]


def correlate_back(factors: NngpFactors, w) -> np.ndarray:
    """Inverse of :func:`decorrelate`: solve ``(I - B) x = F^{1/2} w``.

    The solve is a forward substitution in DAG order and is inherently
    sequential.
    """
    w = np.asarray(w, dtype=np.float64)
    if w.shape[0] != factors.n:
        raise ValueError(f"expected {factors.n} rows, got {w.shape[0]}")
    dag = factors.dag
    n, wdt = factors.n, factors.B.shape[1]
    pos = dag.position
    rows = np.repeat(pos, wdt)
    nbr = factors.nbr.reshape(-1)
    keep = nbr >= 0
    L = sp.csr_matrix(
        (
            np.concatenate([np.ones(n), -factors.B.reshape(-1)[keep]]),
            (np.concatenate([np.arange(n), rows[keep]]), np.concatenate([np.arange(n), pos[nbr[keep]]])),
        ),
        shape=(n, n),
    )
    rhs = (np.sqrt(factors.F) * w.T).T[dag.order]
    xp = spsolve_triangular(L, rhs, lower=True, unit_diagonal=True)
    x = np.empty_like(xp)
    x[dag.order] = xp
    return x


def nngp_neg_loglik(source, residual, theta: CovarianceParams | None = None, S=None,
                    geometry: NeighborGeometry | None = None) -> float:
    """NNGP negative log-likelihood up to ``n log(2 pi)``.

    Returns ``sum_j (r*_j)^2 + log F_j`` with ``r*`` the decorrelated residual.
    ``source`` is either an :class:`NngpFactors` (used as-is unless a different
    ``theta`` is given) or a :class:`NeighborDag`, in which case ``S`` and
    ``theta`` are required.
    """
    if isinstance(source, NngpFactors):
        factors = source
        if theta is not None and theta != factors.theta:
            factors = compute_factors(factors.dag, factors.S, theta, geometry)
    else:
        if theta is None or S is None:
            raise ValueError("theta and S are required when passing a NeighborDag")
        factors = compute_factors(source, S, theta, geometry)
    r = decorrelate(factors, residual)
    return float(np.dot(r, r) + np.sum(np.log(factors.F)))


def discrepancy_diagnostics(
    S,
    theta_true: CovarianceParams,
    theta_work: CovarianceParams,
    m_list: Iterable[int],
    ordering="coordinate_sum",
) -> dict:
    """KL divergence and extreme eigenvalues of ``E(m) = L^T Q(m) L`` with ``Sigma = L L^T``.

    ``kld`` is ``tr(E) - n - log|E|``, which is zero exactly when ``E = I``.
    ``m = 0`` uses the diagonal working precision ``I / (sigma2 + tau2)``.
    Dense, so limited to ``n <= DIAGNOSTIC_MAX_N``.
    """
    S = np.asarray(S, dtype=np.float64)
    n = S.shape[0]
    if n > DIAGNOSTIC_MAX_N:
        raise ValueError(
            f"discrepancy diagnostics are dense; n={n} exceeds {DIAGNOSTIC_MAX_N}, subsample the locations"
        )
    Sigma = cov_matrix(S, S, theta_true)
    L = np.linalg.cholesky(Sigma)
    logdet_sigma = 2.0 * np.sum(np.log(np.diag(L)))
    out = {"m": [], "kld": [], "trace": [], "lambda_min": [], "lambda_max": []}
    for m in m_list:
        fac = compute_factors(build_dag(S, int(m), ordering), S, theta_work)
        M = fac.decorrelation_operator() @ L
        trace = float(np.sum(M * M))
        logdet_E = logdet_sigma - float(np.sum(np.log(fac.F)))
        ev = np.linalg.eigvalsh(M.T @ M)
        out["m"].append(int(m))
        out["kld"].append(trace - n - logdet_E)
        out["trace"].append(trace)
        out["lambda_min"].append(float(ev[0]))
        out["lambda_max"].append(float(ev[-1]))
    return {k: np.asarray(v) for k, v in out.items()}


def dense_precision(factors: NngpFactors) -> np.ndarray:
    """Dense ``Q``; for tests and small diagnostics only."""
    _check_dense(factors.n, factors.n)
    return factors.precision().toarray()

