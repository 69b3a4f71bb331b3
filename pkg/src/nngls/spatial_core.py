"""Spatial datasets and nearest-neighbor DAG construction.

Neighbor sets are exact: candidates come from a k-d tree (``scipy.spatial.cKDTree``)
and the query width is widened until every point at or below the m-th distance
has been seen, so distance ties are resolved deterministically by the smaller
location index.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence, Union

import numpy as np
from scipy.spatial import cKDTree

from .exceptions import DegenerateDesignError

ORDERINGS = ("coordinate_sum", "first_axis", "given")

# relative slack when deciding that the k-th returned distance lies strictly
# beyond the m-th candidate distance
_TIE_RTOL = 1e-12


@dataclass(frozen=True)
class SpatialDataset:
    """Covariates ``X`` (n, d), responses ``Y`` (n,) and planar coordinates ``S`` (n, 2)."""

    X: np.ndarray
    Y: np.ndarray
    S: np.ndarray

    def __post_init__(self):
        X = np.atleast_2d(np.asarray(self.X, dtype=np.float64))
        if np.asarray(self.X).ndim == 1:
            X = X.reshape(-1, 1)
        Y = np.asarray(self.Y, dtype=np.float64).reshape(-1)
        S = np.asarray(self.S, dtype=np.float64)
        if S.ndim != 2 or S.shape[1] != 2:
            raise ValueError(f"S must have shape (n, 2), got {S.shape}")
        n = S.shape[0]
        if n < 1:
            raise ValueError("dataset must contain at least one location")
        if X.shape[0] != n or Y.shape[0] != n:
            raise ValueError(
                f"row counts differ: X has {X.shape[0]}, Y has {Y.shape[0]}, S has {n}"
            )
        for name, arr in (("X", X), ("Y", Y), ("S", S)):
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"{name} contains non-finite entries")
        if n >= 2 and min_pairwise_distance(S) <= 0.0:
            raise DegenerateDesignError("degenerate design: duplicate coordinates")
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "Y", Y)
        object.__setattr__(self, "S", S)

    @property
    def n(self) -> int:
        return self.S.shape[0]

    @property
    def d(self) -> int:
        return self.X.shape[1]

    def subset(self, idx) -> "SpatialDataset":
        idx = np.asarray(idx, dtype=np.intp)
        return SpatialDataset(self.X[idx], self.Y[idx], self.S[idx])

    def with_response(self, Y) -> "SpatialDataset":
        return SpatialDataset(self.X, Y, self.S)


@dataclass(frozen=True)
class NeighborDag:
    """Directed nearest-neighbor graph over ``n`` locations.

    ``order[k]`` is the location placed at position ``k``.  Row ``j`` of ``nbr``
    holds the neighbors of location ``j`` (location indices, nearest first,
    padded with ``-1``); ``counts[j] = min(position[j], m)``.
    """

    order: np.ndarray
    nbr: np.ndarray
    counts: np.ndarray
    m: int
    ordering: str = "coordinate_sum"
    position: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        pos = np.empty_like(self.order)
        pos[self.order] = np.arange(self.order.size)
        object.__setattr__(self, "position", pos)

    @property
    def n(self) -> int:
        return self.order.size

    @property
    def width(self) -> int:
        """Number of neighbor columns actually stored (``min(m, n - 1)``)."""
        return self.nbr.shape[1]

    @property
    def neighbors(self) -> list:
        """Neighbor index arrays listed by location index."""
        return [self.nbr[j, : self.counts[j]] for j in range(self.n)]

    def neighbors_by_position(self) -> list:
        """Neighbor sets expressed as order positions, listed by position."""
        return [np.sort(self.position[self.nbr[j, : self.counts[j]]]) for j in self.order]

    def describe(self) -> dict:
        return {"m": int(self.m), "ordering": self.ordering}


@dataclass(frozen=True)
class PredictionNeighbors:
    """Nearest training locations for each query row, nearest first, padded with ``-1``."""

    nbr: np.ndarray
    dist: np.ndarray
    counts: np.ndarray

    @property
    def neighbors(self) -> list:
        return [self.nbr[q, : self.counts[q]] for q in range(self.nbr.shape[0])]


def _as_coords(S) -> np.ndarray:
    S = np.asarray(S, dtype=np.float64)
    if S.ndim != 2 or S.shape[1] != 2:
        raise ValueError(f"coordinates must have shape (n, 2), got {S.shape}")
    if not np.all(np.isfinite(S)):
        raise ValueError("coordinates contain non-finite entries")
    return S


def min_pairwise_distance(S) -> float:
    """Smallest Euclidean distance between two distinct rows of ``S``."""
    S = _as_coords(S)
    if S.shape[0] < 2:
        raise ValueError("min_pairwise_distance needs at least two locations")
    d, _ = cKDTree(S).query(S, k=2)
    return float(d[:, 1].min())


def ordering_permutation(S, ordering: Union[str, Sequence[int]] = "coordinate_sum") -> tuple:
    """Return ``(order, name)`` for one of the supported orderings or a given permutation."""
    S = _as_coords(S)
    n = S.shape[0]
    if isinstance(ordering, str):
        if ordering == "coordinate_sum":
            return np.argsort(S[:, 0] + S[:, 1], kind="stable"), ordering
        if ordering == "first_axis":
            return np.argsort(S[:, 0], kind="stable"), ordering
        raise ValueError(f"unknown ordering {ordering!r}; expected one of {ORDERINGS}")
    order = np.asarray(ordering, dtype=np.intp).reshape(-1)
    if order.size != n or not np.array_equal(np.sort(order), np.arange(n)):
        raise ValueError("given ordering must be a permutation of 0..n-1")
    return order, "given"


def _sorted_candidates(P, q_pts, cand, valid, keys):
    """Sort candidate columns by (distance, key) with invalid columns pushed last."""
    diff = P[np.where(valid, cand, 0)] - q_pts[:, None, :]
    dist = np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))
    dist = np.where(valid, dist, np.inf)
    k = np.where(valid, keys[np.where(valid, cand, 0)], np.iinfo(np.intp).max)
    first = np.argsort(k, axis=1, kind="stable")
    dist1 = np.take_along_axis(dist, first, axis=1)
    second = np.argsort(dist1, axis=1, kind="stable")
    perm = np.take_along_axis(first, second, axis=1)
    return np.take_along_axis(cand, perm, axis=1), np.take_along_axis(dist, perm, axis=1)


def build_dag(S, m: int = 20, ordering: Union[str, Sequence[int]] = "coordinate_sum") -> NeighborDag:
    """Build the m-nearest-neighbor DAG over the locations ``S``.

    Parameters
    ----------
    S : array_like, shape (n, 2)
        Planar coordinates, pairwise distinct.
    m : int
        Neighbor budget; location at position ``k`` receives ``min(k, m)``
        neighbors among the locations placed before it.
    ordering : {"coordinate_sum", "first_axis"} or sequence of int
        Ordering rule, or an explicit permutation.

    Returns
    -------
    NeighborDag
    """
    if int(m) != m or m < 0:
        raise ValueError(f"m must be a nonnegative integer, got {m!r}")
    m = int(m)
    S = _as_coords(S)
    n = S.shape[0]
    if n < 1:
        raise ValueError("build_dag needs at least one location")
    if n >= 2 and min_pairwise_distance(S) <= 0.0:
        raise DegenerateDesignError("degenerate design: duplicate coordinates")
    order, name = ordering_permutation(S, ordering)
    width = min(m, n - 1)
    P = S[order]
    # neighbors stored as positions while searching; mapped to locations at the end
    nbr_pos = np.full((n, width), -1, dtype=np.intp)
    counts_pos = np.minimum(np.arange(n), width)

    if width > 0:
        keys = order  # ties broken by location index
        head = min(n, 4 * (width + 1))
        for k in range(1, head):
            cand = np.arange(k)[None, :]
            c, _ = _sorted_candidates(P, P[k : k + 1], cand, np.ones_like(cand, bool), keys)
            take = min(k, width)
            nbr_pos[k, :take] = c[0, :take]

        lo = head
        while lo < n:
            hi = min(n, 2 * lo)
            tree = cKDTree(P[:hi])
            pending = np.arange(lo, hi)
            kq = min(hi, 2 * width + 2)
            while pending.size:
                d, idx = tree.query(P[pending], k=kq)
                d = d.reshape(pending.size, kq)
                idx = idx.reshape(pending.size, kq)
                valid = idx < pending[:, None]
                cnt = valid.sum(axis=1)
                dv = np.sort(np.where(valid, d, np.inf), axis=1)
                dm = dv[:, width - 1]
                done = (cnt >= width) & ((kq >= hi) | (d[:, -1] > dm * (1 + _TIE_RTOL)))
                if np.any(done):
                    rows = pending[done]
                    c, _ = _sorted_candidates(P, P[rows], idx[done], valid[done], keys)
                    nbr_pos[rows] = c[:, :width]
                pending = pending[~done]
                kq = min(hi, 2 * kq)
            lo = hi

    nbr = np.full((n, width), -1, dtype=np.intp)
    counts = np.empty(n, dtype=np.intp)
    mapped = np.where(nbr_pos >= 0, order[np.maximum(nbr_pos, 0)], -1)
    nbr[order] = mapped
    counts[order] = counts_pos
    return NeighborDag(order=order, nbr=nbr, counts=counts, m=m, ordering=name)


def find_prediction_neighbors(S_train, S_query, m: int = 20) -> PredictionNeighbors:
    """Exact m nearest training locations for every query row (nearest first)."""
    S_train = _as_coords(S_train)
    S_query = np.asarray(S_query, dtype=np.float64).reshape(-1, 2)
    n = S_train.shape[0]
    if n < 1:
        raise ValueError("training set is empty")
    if int(m) != m or m < 0:
        raise ValueError(f"m must be a nonnegative integer, got {m!r}")
    k = min(int(m), n)
    nq = S_query.shape[0]
    nbr = np.full((nq, k), -1, dtype=np.intp)
    dist = np.full((nq, k), np.inf)
    if k == 0 or nq == 0:
        return PredictionNeighbors(nbr, dist, np.full(nq, k, dtype=np.intp))
    tree = cKDTree(S_train)
    keys = np.arange(n)
    pending = np.arange(nq)
    kq = min(n, k + 1)
    while pending.size:
        d, idx = tree.query(S_query[pending], k=kq)
        d = d.reshape(pending.size, kq)
        idx = idx.reshape(pending.size, kq)
        done = (kq >= n) | (d[:, -1] > d[:, k - 1] * (1 + _TIE_RTOL))
        if np.any(done):
            rows = pending[done]
            c, dd = _sorted_candidates(
                S_train, S_query[rows], idx[done], np.ones_like(idx[done], bool), keys
            )
            nbr[rows] = c[:, :k]
            dist[rows] = dd[:, :k]
        pending = pending[~done]
        kq = min(n, 2 * kq)
    return PredictionNeighbors(nbr, dist, np.full(nq, k, dtype=np.intp))
