"""
Cross-validated bandwidths
==========================

Folds split surfaces, not observations.  Each smoother gets its own score:
held-out squared error for the mean and the diagonal, weighted cloud error
for the covariance factors.
"""

from sepsurf.bandwidth import CvSpec, cv_covariance_bandwidths, cv_mean_bandwidth, cv_noise_bandwidth, transfer_to_4d
from sepsurf.data import Grid2
from sepsurf.simstudy import Scenario, sample_surfaces, scenario_covariance

grid = Grid2(12, 12)
ds = sample_surfaces(scenario_covariance(Scenario("brownian", grid)), grid, n=100, p=0.3, seed=3)
spec = CvSpec(folds=5, seed=0)

bw_mean, report = cv_mean_bandwidth(ds, grid, spec, return_report=True)
print("mean bandwidth:", bw_mean.as_tuple())
print("candidates scored:", len(report.candidates))

bw_a, bw_b = cv_covariance_bandwidths(ds, grid, spec, bw_mean=bw_mean)
print("temporal factor:", bw_a.as_tuple(), " spatial factor:", bw_b.as_tuple())
print("noise smoother:", cv_noise_bandwidth(ds, grid, spec, bw_mean=bw_mean).as_tuple())

# the 4D baseline reuses these windows
print("4D bandwidths:", transfer_to_4d(bw_a, bw_b))
