"""
Baselines: 4D smoothing, best separable approximation, pre-smoothing
====================================================================
"""

import time

import numpy as np

from sepsurf.baselines import bsa, presmooth_predict, smooth4d_covariance
from sepsurf.data import Grid2, center, grid_dataset
from sepsurf.separable import FitOptions, fit_separable, mean_from_samples
from sepsurf.simstudy import Scenario, relative_error, sample_surfaces, scenario_covariance

grid = Grid2(10, 10)
cov = scenario_covariance(Scenario("brownian", grid))
ds = sample_surfaces(cov, grid, n=100, p=0.3, seed=4)

start = time.perf_counter()
model = fit_separable(ds, grid, FitOptions.fixed(0.25))
t_sep = time.perf_counter() - start

samples = grid_dataset(ds, grid)
centered = center(samples, mean_from_samples(samples, grid, 0.25))
start = time.perf_counter()
C4 = smooth4d_covariance(centered, grid, (0.25,) * 4)
t_4d = time.perf_counter() - start
print(f"separable: error {relative_error(model, cov):.3f} in {t_sep:.3f}s")
print(f"4D:        error {relative_error(C4, cov):.3f} in {t_4d:.3f}s")

# the best separable approximation of a non-separable covariance
G = scenario_covariance(Scenario("gneiting", grid))
res = bsa(G)
print("Gneiting: separable residual", round(relative_error(res, G), 4), "after", res.n_iter, "iterations")

# pre-smoothing uses one surface only
t, s, y = ds.surface(0)
print("pre-smoothed surface range:", presmooth_predict(t, s, y, grid, (0.2, 0.2)).round(2).min(),
      presmooth_predict(t, s, y, grid, (0.2, 0.2)).round(2).max())
