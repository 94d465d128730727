"""
Predicting a surface with confidence bands
==========================================

Given a fitted model and a handful of observations of a new surface, the
best linear unbiased predictor fills in the whole grid.  Pointwise and
simultaneous bands quantify the uncertainty of the latent surface.
"""

import numpy as np

from sepsurf.data import Grid2
from sepsurf.prediction import blup, pointwise_band, simultaneous_band
from sepsurf.separable import FitOptions, fit_separable
from sepsurf.simstudy import Scenario, sample_surfaces, scenario_covariance

grid = Grid2(15, 15)
cov = scenario_covariance(Scenario("fourier", grid))
ds = sample_surfaces(cov, grid, n=120, p=0.3, seed=2)
model = fit_separable(ds, grid, FitOptions.fixed(0.15))

# a fresh surface with 12 observations
new, latent = sample_surfaces(cov, grid, n=1, p=12 / 225, seed=99, return_latent=True)
t, s, y = new.surface(0)

res = blup(model, t, s, y)
pointwise_band(res, alpha=0.05)
simultaneous_band(res, alpha=0.05, n_draws=10_000, seed=0)

print("pointwise quantile u:", round(res.u_quantile, 4))
print("simultaneous quantile z:", round(res.z_quantile, 4))
inside = np.abs(res.predicted - latent[0]) <= res.simultaneous_halfwidth
print("share of cells inside the simultaneous band:", inside.mean().round(3))
print("RMSE of the prediction:", np.sqrt(np.mean((res.predicted - latent[0]) ** 2)).round(4))
