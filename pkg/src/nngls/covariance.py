"""Matérn-plus-nugget covariance family.

The distance argument is scaled as ``x = sqrt(2) * phi * d``, so with ``nu = 0.5``
the covariance is ``sigma2 * exp(-sqrt(2) * phi * d)``.  Only half-integer
smoothness values are supported, through their closed forms.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
from scipy.spatial.distance import cdist

SUPPORTED_NU = (0.5, 1.5, 2.5)

# Upper bound on entries of any dense covariance block; trips on accidental
# n-by-n allocations in the scalable code paths.
MAX_DENSE_ENTRIES = 5000 * 5000


@dataclass(frozen=True)
class CovarianceParams:
    """Parameters ``(sigma2, phi, nu, tau2)`` of the Matérn-plus-nugget covariance."""

    sigma2: float
    phi: float
    nu: float = 0.5
    tau2: float = 0.0

    def __post_init__(self):
        for name in ("sigma2", "phi", "nu", "tau2"):
            v = float(getattr(self, name))
            if not math.isfinite(v):
                raise ValueError(f"{name} must be finite, got {v}")
            object.__setattr__(self, name, v)
        if self.sigma2 <= 0:
            raise ValueError(f"sigma2 must be positive, got {self.sigma2}")
        if self.phi <= 0:
            raise ValueError(f"phi must be positive, got {self.phi}")
        if self.tau2 < 0:
            raise ValueError(f"tau2 must be nonnegative, got {self.tau2}")
        _check_nu(self.nu)

    @property
    def total_variance(self) -> float:
        return self.sigma2 + self.tau2

    def replace(self, **kw) -> "CovarianceParams":
        d = asdict(self)
        d.update(kw)
        return CovarianceParams(**d)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "CovarianceParams":
        return cls(sigma2=d["sigma2"], phi=d["phi"], nu=d["nu"], tau2=d["tau2"])


def _check_nu(nu):
    if not any(abs(nu - s) < 1e-12 for s in SUPPORTED_NU):
        raise ValueError(f"unsupported smoothness nu={nu}; supported values are {SUPPORTED_NU}")


def _correlation(x, nu):
    """Matérn correlation at scaled distance ``x`` (closed forms for half-integer ``nu``)."""
    e = np.exp(-x)
    if nu == 0.5:
        return e
    if nu == 1.5:
        return (1.0 + x) * e
    if nu == 2.5:
        return (1.0 + x + x * x / 3.0) * e
    _check_nu(nu)


def matern(d, p: CovarianceParams):
    """Spatial (nugget-free) Matérn covariance at distance ``d``."""
    d = np.asarray(d, dtype=np.float64)
    if np.any(d < 0):
        raise ValueError("distances must be nonnegative")
    _check_nu(p.nu)
    out = p.sigma2 * _correlation(math.sqrt(2.0) * p.phi * d, p.nu)
    return float(out) if out.ndim == 0 else out


def cov_full(d, p: CovarianceParams):
    """Covariance including the nugget, which only applies at ``d == 0``."""
    d = np.asarray(d, dtype=np.float64)
    out = matern(d, p) + p.tau2 * (d == 0)
    return float(out) if np.ndim(out) == 0 else out


def _check_dense(rows, cols):
    if rows * cols > MAX_DENSE_ENTRIES:
        raise MemoryError(
            f"refusing to allocate a dense {rows}x{cols} covariance block "
            f"(limit {MAX_DENSE_ENTRIES} entries)"
        )


def cov_matrix(S_a, S_b, p: CovarianceParams, include_nugget_on_diagonal: bool = True) -> np.ndarray:
    """Dense covariance block between two coordinate sets.

    The nugget is added to an entry only when the flag is set and the two
    locations coincide exactly.
    """
    S_a = np.asarray(S_a, dtype=np.float64).reshape(-1, 2)
    S_b = np.asarray(S_b, dtype=np.float64).reshape(-1, 2)
    _check_dense(S_a.shape[0], S_b.shape[0])
    D = cdist(S_a, S_b)
    K = matern(D, p)
    if include_nugget_on_diagonal and p.tau2 > 0:
        K = K + p.tau2 * (D == 0)
    return np.atleast_2d(K)


def matern_min_eigen_bound(p: CovarianceParams, h: float) -> float:
    """Lower bound on the smallest eigenvalue of a Matérn covariance matrix.

    Holds for any design in the plane whose points are separated by at least
    ``h``; the nugget is ignored (it only raises the spectrum).
    """
    if not h > 0:
        raise ValueError(f"minimum distance h must be positive, got {h}")
    nu, phi2 = p.nu, p.phi**2
    num = math.pi**2 * p.sigma2 * math.gamma(nu + 1.0) * phi2**nu * h ** (2.0 * nu)
    den = math.gamma(nu) * (phi2 * h * h + 128.0 * math.pi**3) ** (nu + 1.0)
    return num / den
