"""
A desk-scale simulation study
=============================

Relative covariance errors of the one-step and two-step estimators across
sampling fractions, then a hold-out comparison against pre-smoothing.
"""

import numpy as np

from sepsurf.data import Grid2
from sepsurf.separable import FitOptions, SeparableModel
from sepsurf.simstudy import HoldoutPattern, Scenario, error_study, holdout_evaluate, sample_surfaces, scenario_covariance

grid = Grid2(12, 12)
rows = error_study(Scenario("fourier", grid), ps=[0.1, 0.3], n=80, replicates=3, seed=0, opts=FitOptions.fixed(0.2))
for p in (0.1, 0.3):
    for method in ("one_step", "proposed"):
        errs = [r["rel_error"] for r in rows if r["p"] == p and r["method"] == method]
        print(f"p={p:.1f} {method:9s} median error {np.median(errs):.3f}")

A, B = scenario_covariance(Scenario("brownian", grid))
ds = sample_surfaces((A, B), grid, n=60, p=0.25, noise_sigma2=1 / 144, seed=1)
oracle = SeparableModel(grid, np.zeros(grid.shape), A, B, 1 / 144)
for kind in ("chain", "otm"):
    rep = holdout_evaluate(ds, grid, HoldoutPattern(kind), folds=5,
                           methods={"separable": "separable", "oracle": oracle}, opts=FitOptions.fixed(0.25))
    print(kind, {k: round(v, 3) for k, v in rep["medians"].items()}, "skipped", rep["skipped"])
