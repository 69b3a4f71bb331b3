"""Checking the covariance model: empirical semivariogram of residuals against the fit.

Run with ``python demos/04_semivariogram_check.py``.
"""

# %% Fit on Friedman data with a Matérn(1.5) effect
import numpy as np

from nngls import CovarianceParams, TrainConfig, fit_nngls, forward
from nngls.experiments import (SimulationSpec, empirical_semivariogram, simulate,
                               theoretical_semivariogram)

theta_true = CovarianceParams(1.0, 1.0, 1.5, 0.1)
sim = simulate(SimulationSpec("f2_friedman", n=1200, theta_true=theta_true, seed=11))
ds = sim.dataset
fit = fit_nngls(ds, TrainConfig(seed=11), nu=1.5)
print("true     ", theta_true)
print("estimated", fit.theta)

# %% Residual semivariogram: binned half mean squared differences by distance
resid = ds.Y - forward(fit.model, ds.X)
sv = empirical_semivariogram(ds.S, resid, n_bins=10, max_dist=4.0)
fitted = theoretical_semivariogram(sv.centers, fit.theta)
print(" h      empirical  fitted   pairs")
for h, g, gf, c in zip(sv.centers, sv.gamma, fitted, sv.counts):
    print(f"{h:4.2f}   {g:8.3f}  {gf:7.3f}  {c:6d}")

# %% A systematic gap here would point at a wrong smoothness or a trend left in the mean
print("largest absolute gap:", np.nanmax(np.abs(sv.gamma - fitted)).round(3))
