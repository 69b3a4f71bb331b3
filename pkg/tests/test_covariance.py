import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from nngls import covariance
from nngls.covariance import (CovarianceParams, cov_full, cov_matrix, matern,
                              matern_min_eigen_bound)


def bessel_matern(d, sigma2, phi, nu):
    """High-precision general-nu Matérn via the modified Bessel function."""
    if d == 0:
        return sigma2
    x = mpmath.sqrt(2) * phi * d
    val = sigma2 * mpmath.power(2, 1 - nu) * mpmath.power(x, nu) * mpmath.besselk(nu, x) / mpmath.gamma(nu)
    return float(val)


def test_spec_values():
    p = CovarianceParams(1.0, 1.0, 0.5)
    assert matern(1.0, p) == pytest.approx(0.243116734, abs=1e-9)
    p = CovarianceParams(1.0, 1.0, 1.5)
    x = math.sqrt(2)
    assert matern(1.0, p) == pytest.approx((1 + x) * math.exp(-x), rel=1e-15)
    assert matern(1.0, p) == pytest.approx(0.5869357, abs=1e-7)


@pytest.mark.parametrize("nu", [0.5, 1.5, 2.5])
@pytest.mark.parametrize("phi", [0.3, 1.0, 3 / math.sqrt(2)])
def test_closed_form_matches_bessel(nu, phi):
    p = CovarianceParams(1.7, phi, nu)
    for d in [1e-6, 0.01, 0.3, 1.0, 2.5, 7.0]:
        ref = bessel_matern(d, 1.7, phi, nu)
        assert matern(d, p) == pytest.approx(ref, rel=1e-12, abs=1e-300)


def test_zero_distance_and_nugget():
    p = CovarianceParams(2.0, 1.0, 0.5, 0.3)
    assert matern(0.0, p) == 2.0
    assert cov_full(0.0, p) == pytest.approx(2.3)
    assert cov_full(0.5, p) == pytest.approx(matern(0.5, p))


@settings(max_examples=50, deadline=None)
@given(nu=st.sampled_from([0.5, 1.5, 2.5]), phi=st.floats(0.05, 20), d=st.lists(st.floats(0, 50), min_size=2, max_size=20))
def test_monotone_nonincreasing(nu, phi, d):
    p = CovarianceParams(1.0, phi, nu)
    d = np.sort(np.asarray(d))
    c = matern(d, p)
    assert np.all(np.diff(c) <= 1e-15)
    assert np.all(c <= 1.0) and np.all(c >= 0.0)


def test_param_validation():
    with pytest.raises(ValueError):
        CovarianceParams(0.0, 1.0)
    with pytest.raises(ValueError):
        CovarianceParams(1.0, -1.0)
    with pytest.raises(ValueError):
        CovarianceParams(1.0, 1.0, 0.5, -0.1)
    with pytest.raises(ValueError, match="unsupported smoothness"):
        CovarianceParams(1.0, 1.0, 1.0)
    with pytest.raises(ValueError):
        CovarianceParams(float("nan"), 1.0)
    with pytest.raises(ValueError):
        matern(-1.0, CovarianceParams(1.0, 1.0))
    p = CovarianceParams(1.0, 2.0, 1.5, 0.1)
    assert CovarianceParams.from_dict(p.to_dict()) == p
    assert p.total_variance == pytest.approx(1.1)


def test_cov_matrix_two_points():
    p = CovarianceParams(1.5, 0.7, 0.5, 0.2)
    S = np.array([[0.0, 0.0], [0.6, 0.8]])
    K = cov_matrix(S, S, p)
    np.testing.assert_allclose(np.diag(K), 1.7)
    assert K[0, 1] == pytest.approx(1.5 * math.exp(-math.sqrt(2) * 0.7 * 1.0))
    K2 = cov_matrix(S, S, p, include_nugget_on_diagonal=False)
    np.testing.assert_allclose(np.diag(K2), 1.5)
    # cross block with one coincident location
    C = cov_matrix(S[:1], np.array([[0.0, 0.0], [1.0, 0.0]]), p)
    assert C[0, 0] == pytest.approx(1.7)


def test_size_guard(monkeypatch):
    monkeypatch.setattr(covariance, "MAX_DENSE_ENTRIES", 100)
    S = np.random.default_rng(0).uniform(size=(11, 2))
    with pytest.raises(MemoryError):
        cov_matrix(S, S, CovarianceParams(1.0, 1.0))
    cov_matrix(S[:10], S[:10], CovarianceParams(1.0, 1.0))


def test_eigen_bound_example():
    p = CovarianceParams(1.0, 1.0, 0.5)
    h = 0.5
    num = math.pi**2 * math.gamma(1.5) * 1.0 * h
    den = math.gamma(0.5) * (h * h + 128 * math.pi**3) ** 1.5
    assert matern_min_eigen_bound(p, h) == pytest.approx(num / den, rel=1e-14)
    with pytest.raises(ValueError):
        matern_min_eigen_bound(p, 0.0)


def test_eigen_bound_grid_design():
    g = np.arange(8.0)
    S = np.array([(a, b) for a in g for b in g])
    for nu in (0.5, 1.5):
        p = CovarianceParams(1.0, 0.8, nu)
        lam = np.linalg.eigvalsh(cov_matrix(S, S, p))[0]
        assert lam >= matern_min_eigen_bound(p, 1.0)
