import csv
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

from nngls import experiments
from nngls.covariance import CovarianceParams
from nngls.experiments import (SimulationSpec, coverage, empirical_semivariogram, f1_sine,
                               f2_friedman, f2_rho, f3_15dim, interval_score, mise, rmse_relative,
                               run_benchmark, simulate, theoretical_semivariogram)
from nngls.trainer import TrainConfig

from conftest import uniform_sites


def test_mean_function_values():
    assert f1_sine(np.array([[0.5]]))[0] == pytest.approx(10.0)
    assert f1_sine(np.array([[0.0], [1.0]])) == pytest.approx([0, 0], abs=1e-12)
    assert f2_friedman(np.array([[1, 1, 0.5, 0, 0]]))[0] == pytest.approx(0.0, abs=1e-12)
    x = np.array([[0.5, 1.0, 1.0, 1.0, 1.0]])
    assert f2_friedman(x)[0] == pytest.approx((10 + 5 + 10 + 5) / 6)
    X = np.random.default_rng(0).uniform(size=(5000, 5))
    v = f2_friedman(X)
    assert v.min() >= 0 and v.max() <= 30 / 6 + 1e-12
    np.testing.assert_allclose(f2_rho(X, 0.5), v)
    with pytest.raises(ValueError):
        f2_rho(X, 1.5)
    assert f3_15dim(np.zeros((1, 15)))[0] == pytest.approx((5 + 3 + 4) / 6)


def test_spec_validation_and_roundtrip():
    spec = SimulationSpec("f2_friedman", n=30, seed=2, center_effect=True)
    assert spec.d == 5
    assert SimulationSpec.from_dict(spec.to_dict()) == spec
    with pytest.raises(ValueError):
        SimulationSpec("f9")
    with pytest.raises(ValueError):
        SimulationSpec("f1_sine", d=3)
    with pytest.raises(ValueError, match="unknown simulation keys"):
        SimulationSpec.from_dict({"f0": "f1_sine", "sigma": 1})
    custom = SimulationSpec("custom", n=10, custom_f=lambda X: X.sum(axis=1), d=2)
    ds, f, _ = simulate(custom)
    np.testing.assert_allclose(f, ds.X.sum(axis=1))


def test_simulation_reproducible_and_streams_separate():
    a = simulate(SimulationSpec(n=200, seed=5))
    b = simulate(SimulationSpec(n=200, seed=5))
    np.testing.assert_array_equal(a.dataset.Y, b.dataset.Y)
    # changing the nugget alone leaves covariates and locations untouched
    c = simulate(SimulationSpec(n=200, seed=5, theta_true=CovarianceParams(1.0, 2.0, 0.5, 0.5)))
    np.testing.assert_array_equal(a.dataset.X, c.dataset.X)
    np.testing.assert_array_equal(a.dataset.S, c.dataset.S)
    np.testing.assert_allclose(a.dataset.Y - a.f_true, a.effect)


def test_pure_nugget_variance():
    spec = SimulationSpec(n=4000, seed=1, theta_true=CovarianceParams(1e-8, 1.0, 0.5, 2.0))
    eff = simulate(spec).effect
    assert np.var(eff) == pytest.approx(2.0, rel=0.1)
    # spatially independent: neighbor correlation is negligible
    assert abs(np.corrcoef(eff[:-1], eff[1:])[0, 1]) < 0.05


def test_center_effect():
    sim = simulate(SimulationSpec(n=300, seed=2, center_effect=True,
                                  theta_true=CovarianceParams(1.0, 1.0, 0.5, 0.0)))
    assert abs(sim.effect.mean()) < 1e-12


def test_dense_and_sequential_draws_agree_in_distribution(monkeypatch):
    theta = CovarianceParams(1.0, 1.0, 0.5, 0.0)
    S = uniform_sites(400, 3)
    dense, seq = [], []
    for seed in range(150):
        dense.append(experiments._spatial_field(S, theta, np.random.default_rng(seed)))
    monkeypatch.setattr(experiments, "DENSE_SIMULATION_MAX_N", 10)
    for seed in range(150):
        seq.append(experiments._spatial_field(S, theta, np.random.default_rng(10_000 + seed)))
    dense, seq = np.array(dense), np.array(seq)
    # marginal variance and the covariance of a close pair
    i, j = 0, int(np.argsort(np.hypot(*(S - S[0]).T))[1])
    for a in (dense, seq):
        assert np.var(a[:, i]) == pytest.approx(1.0, abs=0.3)
    assert stats.ks_2samp(dense[:, i], seq[:, i]).pvalue > 0.01
    assert np.mean(dense[:, i] * dense[:, j]) == pytest.approx(np.mean(seq[:, i] * seq[:, j]), abs=0.3)


def test_fixed_surface_shared_across_replicates():
    a = simulate(SimulationSpec(n=100, seed=1, error_model="fixed_surface",
                                theta_true=CovarianceParams(1.0, 1.0, 0.5, 0.0)))
    b = simulate(SimulationSpec(n=100, seed=1, error_model="fixed_surface", surface_seed=0,
                                theta_true=CovarianceParams(1.0, 1.0, 0.5, 0.0)))
    np.testing.assert_array_equal(a.effect, b.effect)
    assert np.std(a.effect) > 0.1


# ------------------------------------------------------------------ metrics

def test_metrics_hand_values():
    assert mise([1, 2, 3], [1, 1, 1]) == pytest.approx(5 / 3)
    assert mise([1, 2, 3], [2, 3, 4], center=True) == 0.0
    assert rmse_relative([0, 0], [1, -1]) == pytest.approx(1.0)
    l, u, t = np.array([0, 0, 0.0]), np.array([1, 1, 1.0]), np.array([0.5, -1, 3])
    # widths 1 each, penalties 40 * 1 and 40 * 2
    assert interval_score(l, u, t) == pytest.approx((1 + 41 + 81) / 3)
    assert coverage(l, u, t) == pytest.approx(1 / 3)
    with pytest.raises(ValueError):
        rmse_relative([1, 2], [3, 3])


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000), n=st.integers(1, 40))
def test_metrics_permutation_invariant(seed, n):
    rng = np.random.default_rng(seed)
    a, b, c = rng.normal(size=(3, n))
    lo, hi = np.minimum(a, b), np.maximum(a, b)
    p = rng.permutation(n)
    assert interval_score(lo, hi, c) == pytest.approx(interval_score(lo[p], hi[p], c[p]))
    assert coverage(lo, hi, c) == coverage(lo[p], hi[p], c[p])
    assert mise(a, c) == pytest.approx(mise(a[p], c[p]))
    assert interval_score(lo, hi, c) >= np.mean(hi - lo) - 1e-12


# --------------------------------------------------------------- variogram

def test_semivariogram_constant_and_brute_force():
    S = uniform_sites(120, 4)
    sv = empirical_semivariogram(S, np.full(120, 3.0), n_bins=6, max_dist=5.0)
    np.testing.assert_allclose(sv.gamma[sv.counts > 0], 0.0)
    r = np.random.default_rng(0).normal(size=120)
    sv = empirical_semivariogram(S, r, n_bins=6, max_dist=5.0)
    d = np.hypot(*(S[:, None, :] - S[None, :, :]).transpose(2, 0, 1))
    iu = np.triu_indices(120, 1)
    h, sq = d[iu], (r[:, None] - r[None, :])[iu] ** 2
    for k in range(6):
        mask = (h >= sv.edges[k]) & (h < sv.edges[k + 1]) & (h <= 5.0)
        assert sv.counts[k] == mask.sum()
        assert sv.gamma[k] == pytest.approx(sq[mask].mean() / 2)


def test_semivariogram_iid_is_flat():
    S = uniform_sites(3000, 5)
    r = np.random.default_rng(5).normal(0, 1.5, 3000)
    sv = empirical_semivariogram(S, r, n_bins=10, max_dist=4.0)
    np.testing.assert_allclose(sv.gamma, 2.25, rtol=0.1)


def test_theoretical_semivariogram():
    th = CovarianceParams(2.0, 1.0, 0.5, 0.5)
    g = theoretical_semivariogram(np.array([0.0, 1e-9, 1.0, 100.0]), th)
    assert g[0] == 0.0
    assert g[1] == pytest.approx(0.5, abs=1e-6)
    assert g[2] == pytest.approx(2.5 - 2 * math.exp(-math.sqrt(2)))
    assert g[3] == pytest.approx(2.5)


# --------------------------------------------------------------- benchmark

def test_benchmark_deterministic(tmp_path):
    sc = [{"id": "tiny", "f0": "f1_sine", "n": 150, "n_test": 50,
           "theta": {"sigma2": 1.0, "phi": 2.0, "tau2": 0.1}}]
    cfg = TrainConfig(hidden_units=8, max_epochs=20, patience=5)
    a = run_benchmark(sc, replicates=2, config=cfg, seed=7)
    b = run_benchmark(sc, replicates=2, config=cfg, seed=7)
    # everything except wall-clock time repeats exactly
    def stable(rep):
        return [r for r in rep.rows if r["metric"] != "runtime_seconds"]

    assert stable(a) == stable(b) and len(stable(a)) > 0
    assert {r["method"] for r in a.records} == {"nngls", "nn_ols"}
    path = tmp_path / "report.csv"
    a.write_csv(path)
    with open(path) as fh:
        rows = list(csv.reader(fh))
    assert tuple(rows[0]) == experiments.REPORT_COLUMNS
    assert all(r[-1] == "2" for r in rows[1:])
    assert "tiny" in a.summary()
    with pytest.raises(ValueError, match="unknown methods"):
        run_benchmark(sc, methods=["gp"], config=cfg)
