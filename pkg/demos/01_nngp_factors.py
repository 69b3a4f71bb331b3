"""Nearest-neighbor factors of a spatial covariance, and how good they are.

Run with ``python demos/01_nngp_factors.py``.
"""

# %% A random design and an exponential covariance
import math

import numpy as np

from nngls import (CovarianceParams, build_dag, compute_factors, correlate_back, cov_matrix,
                   decorrelate, discrepancy_diagnostics)

rng = np.random.default_rng(0)
S = rng.uniform(0, 10, size=(400, 2))
theta = CovarianceParams(sigma2=1.0, phi=3 / math.sqrt(2), nu=0.5, tau2=0.01)

# %% Neighbor DAG: every location conditions on its m nearest predecessors
dag = build_dag(S, m=10)
first = dag.order[:4]
print("first locations in the ordering:", first)
print("neighbors of the 100th location:", dag.neighbors_by_position()[100])

# %% Factors: kriging weights B and conditional variances F, one small solve per row
f = compute_factors(dag, S, theta)
print("conditional variances range from", f.F.min().round(3), "to", f.F.max().round(3))

# %% Decorrelation whitens a GP draw; correlate_back undoes it exactly
w = np.linalg.cholesky(cov_matrix(S, S, theta)) @ rng.standard_normal(400)
z = decorrelate(f, w)
print("sample variance before / after decorrelation:", w.var().round(3), z.var().round(3))
print("lag-1 correlation (ordering) after:", np.corrcoef(z[dag.order][:-1], z[dag.order][1:])[0, 1].round(3))
np.testing.assert_allclose(correlate_back(f, z), w, atol=1e-10)

# %% How close is the approximation to the full covariance as m grows?
# KLD(I, E(m)) falls monotonically and the spectrum of E(m) tightens towards 1.
out = discrepancy_diagnostics(S, theta, theta, [0, 1, 2, 5, 10, 20, 399])
for m, kld, lo, hi in zip(out["m"], out["kld"], out["lambda_min"], out["lambda_max"]):
    print(f"m={int(m):4d}  KLD={max(kld, 0.0):10.4f}  spectrum=[{lo:.3f}, {hi:.3f}]")
