"""Fit the network mean with the decorrelated loss, compare with plain least squares, krige.

Run with ``python demos/02_fit_and_predict.py`` (about half a minute).
"""

# %% Simulate: Y = 10 sin(pi x) + exponential GP + small nugget
import math

import numpy as np

from nngls import CovarianceParams, TrainConfig, fit_nngls, forward, predict
from nngls.experiments import SimulationSpec, baseline_fit, coverage, mise, simulate

theta_true = CovarianceParams(1.0, 3 / math.sqrt(2), 0.5, 0.01)
sim = simulate(SimulationSpec("f1_sine", n=1500, theta_true=theta_true, seed=7))
ds = sim.dataset
print(ds.n, "rows;", ds.d, "covariate")

# %% Fit: warm start on squared error, then GLS training with periodic covariance updates
fit = fit_nngls(ds, TrainConfig(seed=7))
print("estimated covariance:", fit.theta)
print("best epoch", fit.best_epoch, "after", len(fit.history), "history rows;",
      fit.theta_updates, "covariance updates")

# %% Mean-function error on held-out rows, against the non-spatial warm start
te = fit.split["test"]
print("MISE  NN-GLS:", round(mise(forward(fit.model, ds.X[te]), sim.f_true[te]), 4),
      "  plain NN:", round(mise(forward(fit.ols_model, ds.X[te]), sim.f_true[te]), 4))

# %% Kriging predictions with 95% intervals at the held-out locations
pr = predict(fit, ds, ds.X[te], ds.S[te])
base = predict(baseline_fit(fit, ds), ds, ds.X[te], ds.S[te])
y = ds.Y[te]
for name, p in (("NN-GLS", pr), ("plain NN", base)):
    rmse = math.sqrt(np.mean((p.y_hat - y) ** 2))
    print(f"{name:9s} RMSE {rmse:.3f}  coverage {coverage(p.pi_lower, p.pi_upper, y):.3f}  "
          f"mean width {np.mean(p.pi_upper - p.pi_lower):.3f}")

# %% The network alone versus network plus kriged spatial effect at one location
j = 0
print("f_hat", pr.f_hat[j].round(3), " y_hat", pr.y_hat[j].round(3), " observed", y[j].round(3))
