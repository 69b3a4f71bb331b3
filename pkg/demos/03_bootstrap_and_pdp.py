"""Confidence band for the mean function by spatial bootstrap, and partial dependence.

Run with ``python demos/03_bootstrap_and_pdp.py`` (a few minutes; lower ``B``
for a quicker look).
"""

# %% One-covariate data with a centered spatial effect
import math

import numpy as np

from nngls import CovarianceParams, TrainConfig, bootstrap_ci, fit_nngls, forward, partial_dependence
from nngls.experiments import SimulationSpec, coverage, f1_sine, simulate

B = 30
spec = SimulationSpec("f1_sine", n=500, theta_true=CovarianceParams(1.0, 3 / math.sqrt(2), 0.5, 0.01),
                      seed=2, center_effect=True)
ds = simulate(spec).dataset
cfg = TrainConfig(seed=2, fractions=(0.8, 0.2, 0.0))  # no held-out rows needed for a band on f
fit = fit_nngls(ds, cfg)

# %% Bootstrap: decorrelate residuals, permute, correlate back, refit, take quantiles
grid = np.linspace(0, 1, 50).reshape(-1, 1)
band = bootstrap_ci(ds, cfg, fit, B=B, X_new=grid)
print(f"{band.B} replicates, {band.n_failed} failed")
print("pointwise coverage of the true curve:", coverage(band.lower, band.upper, f1_sine(grid)))
for x, lo, f_hat, hi in zip(grid[::10, 0], band.lower[::10], forward(fit.model, grid)[::10], band.upper[::10]):
    print(f"x={x:.2f}  [{lo:6.2f}, {hi:6.2f}]  estimate {f_hat:6.2f}  truth {10 * math.sin(math.pi * x):6.2f}")

# %% Partial dependence on a five-covariate Friedman mean
sim5 = simulate(SimulationSpec("f2_friedman", n=1000, seed=4))
fit5 = fit_nngls(sim5.dataset, TrainConfig(seed=4))
t = np.linspace(0, 1, 6)
for j in range(5):
    print(f"x{j + 1}:", np.round(partial_dependence(fit5, sim5.dataset, j, t), 2))
# x4 and x5 enter linearly (slopes 10/6 and 5/6); x3 is a parabola centred at 0.5
