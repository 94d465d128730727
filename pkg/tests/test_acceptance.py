"""Acceptance gate: one test per criterion, each printing a PASS/FAIL line.

Run ``pytest tests/test_acceptance.py -v``; the verdicts are repeated in the
"acceptance criteria" section of the terminal summary.
"""

import math
import time

import numpy as np
import pytest
from scipy.optimize import brentq
from scipy.stats import norm

from acceptance_log import record
from oracles import epan, kron4
from sepsurf.baselines import bsa_step, bsa_step_spatial
from sepsurf.data import Grid2, bs_call_price, implied_vol
from sepsurf.prediction import (
    blup,
    conditional_correlation,
    pointwise_band,
    simultaneous_band,
    sup_quantile,
)
from sepsurf.separable import FitOptions, SeparableModel, fit_separable
from sepsurf.simstudy import (
    HoldoutPattern,
    Scenario,
    error_study,
    holdout_evaluate,
    relative_error,
    runtime_benchmark,
    sample_surfaces,
    scenario_covariance,
)
from sepsurf.smoothing import ScatterCloud, smooth2d, smooth4d


def _local_design(centers, coords, w, h):
    kern = np.ones_like(w)
    for c0, c, hh in zip(centers, coords, h):
        kern = kern * epan((c0 - c) / hh)
    design = np.column_stack([np.ones_like(kern)] + [c0 - c for c0, c in zip(centers, coords)])
    return design, kern * w


def _oracle(centers, coords, z, w, h):
    """Weighted least squares on the explicit design matrix; ``None`` when the window is degenerate."""
    design, weights = _local_design(centers, coords, w, h)
    act = weights > 0
    if act.sum() < design.shape[1]:
        return None
    root = np.sqrt(weights[act])
    coef, _, rank, sv = np.linalg.lstsq(root[:, None] * design[act], root * z[act], rcond=None)
    if rank < design.shape[1] or sv[-1] < 1e-5 * sv[0]:
        return None
    return coef[0]


# ---------------------------------------------------------------------------


def test_criterion_01_smoother_oracle():
    start = time.perf_counter()
    worst2 = worst4 = 0.0
    checked = 0
    rng = np.random.default_rng(101)
    for _ in range(50):
        m = rng.integers(20, 200)
        x, y, z, w = rng.uniform(size=m), rng.uniform(size=m), rng.normal(size=m), rng.uniform(0.1, 3.0, m)
        h = tuple(rng.uniform(0.15, 0.6, 2))
        xs, ys = rng.uniform(size=6), rng.uniform(size=5)
        out = smooth2d(ScatterCloud(x, y, z, w), h, xs, ys)
        for a in range(xs.size):
            for b in range(ys.size):
                ref = _oracle((xs[a], ys[b]), (x, y), z, w, h)
                if ref is not None:
                    worst2 = max(worst2, abs(out[a, b] - ref))
                    checked += 1
    for _ in range(20):
        m = rng.integers(200, 600)
        X = rng.uniform(size=(m, 4))
        z, w = rng.normal(size=m), rng.uniform(0.1, 3.0, m)
        h = tuple(rng.uniform(0.35, 0.7, 4))
        grids = [rng.uniform(size=2) for _ in range(4)]
        out = smooth4d(np.column_stack([X, z, w]), h, grids)
        for idx in np.ndindex(out.shape):
            centers = [grids[d][idx[d]] for d in range(4)]
            ref = _oracle(centers, X.T, z, w, h)
            if ref is not None:
                worst4 = max(worst4, abs(out[idx] - ref))
                checked += 1
    elapsed = time.perf_counter() - start
    ok = worst2 <= 1e-8 and worst4 <= 1e-8 and elapsed < 10
    record(1, "smoother matches brute-force WLS", ok,
           f"max err 2D {worst2:.1e}, 4D {worst4:.1e}, {checked} points, {elapsed:.1f}s")
    assert ok


def test_criterion_02_closed_form_reproduction():
    rng = np.random.default_rng(102)
    worst = 0.0
    for _ in range(10):
        m = 150
        x, y, w = rng.uniform(size=m), rng.uniform(size=m), rng.uniform(0.2, 2.0, m)
        c, a, b = rng.normal(size=3)
        xs = ys = np.linspace(0.05, 0.95, 10)
        for zz in (np.full(m, c), c + a * x + b * y):
            out = smooth2d(ScatterCloud(x, y, zz, w), (0.25, 0.25), xs, ys, fallback=False)
            truth = c + (zz[0] != c) * (a * xs[:, None] + b * ys[None, :])
            worst = max(worst, np.abs(out - truth).max())
    X = rng.uniform(size=(800, 4))
    coef = rng.normal(size=5)
    g = np.linspace(0.2, 0.8, 3)
    for zz in (np.full(800, coef[0]), coef[0] + X @ coef[1:]):
        out = smooth4d(np.column_stack([X, zz]), (0.45,) * 4, [g] * 4, fallback=False)
        G = np.meshgrid(g, g, g, g, indexing="ij")
        truth = coef[0] + (zz[0] != coef[0]) * sum(coef[1 + d] * G[d] for d in range(4))
        worst = max(worst, np.abs(out - truth).max())
    ok = worst <= 1e-8
    record(2, "constants and linear functions reproduced", ok, f"max err {worst:.1e}")
    assert ok


def test_criterion_03_dense_limit_equivalence():
    start = time.perf_counter()
    grid = Grid2(10, 10)
    cov = scenario_covariance(Scenario("brownian", grid))
    ds, X = sample_surfaces(cov, grid, 50, 1.0, noise_sigma2=0.0, seed=103, return_latent=True)
    opts = FitOptions.fixed(0.5 / 10, steps=2, drop_diagonal=False)
    model = fit_separable(ds, grid, opts)
    Xc = X - X.mean(axis=0)
    C = np.einsum("nij,nkl->ijkl", Xc, Xc) / X.shape[0]
    B = np.ones((10, 10))
    for _ in range(2):
        A = bsa_step(C, B)
        B = bsa_step_spatial(C, A)
    ref = kron4(A, B)
    rel = np.linalg.norm(model.covariance() - ref) / np.linalg.norm(ref)
    elapsed = time.perf_counter() - start
    ok = rel <= 1e-6 and elapsed < 30
    record(3, "dense limit equals two partial-inner-product sweeps", ok, f"rel diff {rel:.1e}, {elapsed:.1f}s")
    assert ok


def test_criterion_04_initial_scale_invariance():
    grid = Grid2(12, 12)
    ds = sample_surfaces(scenario_covariance(Scenario("fourier", grid)), grid, 80, 0.3, seed=104)
    base = fit_separable(ds, grid, FitOptions.fixed(0.2)).covariance()
    diffs = []
    for lam in (0.5, 2.0, 10.0):
        other = fit_separable(ds, grid, FitOptions.fixed(0.2, init_scale=lam)).covariance()
        diffs.append(float(np.abs(other - base).max()))
    ok = max(diffs) <= 1e-8
    record(4, "product invariant to initial weight scale", ok, "max abs diffs " + ", ".join(f"{d:.1e}" for d in diffs))
    assert ok


def test_criterion_05_simulation_convergence():
    start = time.perf_counter()
    grid = Grid2(20, 20)
    cov = scenario_covariance(Scenario("brownian", grid))
    medians = {}
    for n in (25, 50, 100, 200):
        errs = []
        for r in range(20):
            ds = sample_surfaces(cov, grid, n, 0.4, noise_sigma2=1 / 400, seed=10_000 * n + r)
            errs.append(relative_error(fit_separable(ds, grid, FitOptions(seed=r)), cov))
        medians[n] = float(np.median(errs))
    vals = [medians[n] for n in (25, 50, 100, 200)]
    monotone = all(b <= a for a, b in zip(vals, vals[1:]))
    elapsed = time.perf_counter() - start
    ok = monotone and medians[100] < 0.5 and elapsed < 15 * 60
    record(5, "Brownian error non-increasing in N, below 0.5 at N=100", ok,
           "medians " + ", ".join(f"N={n}: {v:.3f}" for n, v in medians.items()) + f", {elapsed:.0f}s")
    assert ok


def test_criterion_06_two_step_dominance():
    start = time.perf_counter()
    rows = error_study(Scenario("fourier", Grid2(20, 20)), [0.1], n=100, replicates=20, seed=106)
    one = float(np.median([r["rel_error"] for r in rows if r["method"] == "one_step"]))
    two = float(np.median([r["rel_error"] for r in rows if r["method"] == "proposed"]))
    elapsed = time.perf_counter() - start
    ok = two <= one and elapsed < 15 * 60
    record(6, "two-step median error <= one-step (Fourier, p=10%)", ok,
           f"two-step {two:.4f}, one-step {one:.4f}, {elapsed:.0f}s")
    assert ok


def test_criterion_07_noise_recovery():
    start = time.perf_counter()
    grid = Grid2(20, 20)
    cov = scenario_covariance(Scenario("brownian", grid))
    est = []
    for r in range(100):
        ds = sample_surfaces(cov, grid, 200, 0.4, noise_sigma2=1 / 400, seed=70_000 + r)
        est.append(fit_separable(ds, grid, FitOptions(seed=r)).sigma2)
    med = float(np.median(est))
    elapsed = time.perf_counter() - start
    ok = abs(med - 1 / 400) <= 0.5 / 400 and elapsed < 20 * 60
    record(7, "noise variance within 50% of 1/400", ok, f"median {med * 400:.3f}/400, {elapsed:.0f}s")
    assert ok


def test_criterion_08_blup_scalar_cases():
    grid = Grid2(4, 4)

    def model(sigma2):
        return SeparableModel(grid, np.zeros((4, 4)), np.ones((4, 4)), np.ones((4, 4)), sigma2)

    y = 1.37
    errs = []
    r0 = blup(model(0.0), [0.4], [0.6], [y], ridge=0.0)
    errs += [np.abs(r0.predicted - y).max(), np.abs(r0.cond_var).max()]
    for s2 in (0.25, 1.0, 4.0):
        r = blup(model(s2), [0.4], [0.6], [y], ridge=0.0)
        errs += [np.abs(r.predicted - y / (1 + s2)).max(), np.abs(r.cond_var - (1 - 1 / (1 + s2))).max()]
    worst = float(max(errs))
    ok = worst <= 1e-10
    record(8, "single-observation BLUP closed forms", ok, f"max err {worst:.1e}")
    assert ok


def _max_iid_quantile(g, alpha):
    return brentq(lambda z: math.erf(z / math.sqrt(2)) ** g - (1 - alpha), 0.0, 10.0)


def test_criterion_09_band_quantiles():
    start = time.perf_counter()
    u = float(norm.ppf(0.975))
    single = sup_quantile(np.ones((1, 1)), 0.05, n_draws=100_000, seed=1)
    z_id = sup_quantile(np.eye(25), 0.05, n_draws=100_000, seed=2)
    analytic = _max_iid_quantile(25, 0.05)
    ar1 = 0.8 ** np.abs(np.subtract.outer(np.arange(30), np.arange(30)))
    z_ar = sup_quantile(ar1, 0.05, n_draws=100_000, seed=3)
    grid = Grid2(8, 8)
    A, B = scenario_covariance(Scenario("brownian", grid))
    res = blup(SeparableModel(grid, np.zeros((8, 8)), A, B, 1 / 64), [0.2, 0.5, 0.8], [0.3, 0.6, 0.4], [0.1, 0.0, -0.2])
    z_blup = sup_quantile(conditional_correlation(res.cond_cov), 0.05, n_draws=100_000, seed=4)
    structures = {"single point": single, "identity(25)": z_id, "AR(1)": z_ar, "BLUP": z_blup}
    ordering = {k: v < u + 0.01 for k, v in structures.items()}
    calibrated = abs(single - 1.95996) <= 0.02 and abs(z_id - analytic) <= 0.03
    elapsed = time.perf_counter() - start
    ok = all(ordering.values()) and calibrated and elapsed < 120
    detail = ", ".join(f"{k} z={v:.3f}" for k, v in structures.items())
    detail += f", u={u:.3f}, identity analytic {analytic:.3f}"
    detail += f", ordering holds on {sum(ordering.values())}/{len(ordering)}, calibration {'ok' if calibrated else 'off'}"
    record(9, "simultaneous quantile below pointwise quantile, calibrated", ok, detail)
    assert calibrated, "calibration part failed"
    assert all(ordering.values()), f"ordering z < u + 0.01 violated: {detail}"


def test_criterion_10_coverage():
    start = time.perf_counter()
    grid = Grid2(10, 10)
    A, B = scenario_covariance(Scenario("brownian", grid))
    sigma2 = 1 / 100
    model = SeparableModel(grid, np.zeros((10, 10)), A, B, sigma2)
    rng = np.random.default_rng(110)
    LA, LB = np.linalg.cholesky(A), np.linalg.cholesky(B)
    cell = (5, 4)
    hit_cell = hit_point_surface = hit_sim_surface = 0
    reps = 1000
    for r in range(reps):
        X = LA @ rng.standard_normal((10, 10)) @ LB.T
        obs = rng.choice(100, size=20, replace=False)
        i, j = np.unravel_index(obs, (10, 10))
        y = X[i, j] + math.sqrt(sigma2) * rng.standard_normal(20)
        res = blup(model, grid.t[i], grid.s[j], y)
        pointwise_band(res, 0.05)
        simultaneous_band(res, 0.05, n_draws=2000, seed=r)
        err = np.abs(res.predicted - X)
        hit_cell += err[cell] <= res.pointwise_halfwidth[cell]
        hit_point_surface += np.all(err <= res.pointwise_halfwidth)
        hit_sim_surface += np.all(err <= res.simultaneous_halfwidth)
    cov_cell = hit_cell / reps
    cov_pw, cov_sim = hit_point_surface / reps, hit_sim_surface / reps
    elapsed = time.perf_counter() - start
    ok = 0.92 <= cov_cell <= 0.97 and cov_sim >= cov_pw and elapsed < 600
    record(10, "pointwise and simultaneous band coverage", ok,
           f"cell {cov_cell:.3f}, surface pointwise {cov_pw:.3f}, surface simultaneous {cov_sim:.3f}, {elapsed:.0f}s")
    assert ok


def test_criterion_11_holdout_harness():
    start = time.perf_counter()
    grid = Grid2(10, 10)
    A, B = scenario_covariance(Scenario("brownian", grid))
    ds = sample_surfaces((A, B), grid, 100, 0.3, noise_sigma2=1 / 100, seed=111)
    oracle = SeparableModel(grid, np.zeros((10, 10)), A, B, 1 / 100)
    opts = FitOptions.fixed(0.25)
    medians, self_ok = {}, True
    for kind in ("chain", "itm", "otm", "short", "long"):
        rep = holdout_evaluate(ds, grid, HoldoutPattern(kind), folds=10,
                               methods={"oracle": oracle, "presmooth": "presmooth"}, seed=11, opts=opts)
        self_ok &= all(r["rmse_ratio"] == 1.0 for r in rep["rows"] if r["method"] == "presmooth")
        medians[kind] = rep["medians"]["oracle"]
    elapsed = time.perf_counter() - start
    ok = self_ok and all(v < 1 for v in medians.values()) and elapsed < 15 * 60
    record(11, "pre-smoothing self-ratio 1, oracle BLUP median ratio < 1", ok,
           ", ".join(f"{k} {v:.3f}" for k, v in medians.items()) + f", self-ratio {'ok' if self_ok else 'off'}")
    assert ok


def test_criterion_12_performance_direction():
    start = time.perf_counter()
    rows = []
    for rep in range(5):
        rows += runtime_benchmark(["brownian"], [(10, 50, 0.1)], seed=rep, bw=0.25)
    t = {m: float(np.median([r["seconds"] for r in rows if r["method"] == m]))
         for m in ("separable", "separable_unpooled", "4d")}
    elapsed = time.perf_counter() - start
    speedup = t["4d"] / t["separable"]
    ok = speedup >= 10 and t["separable"] < t["separable_unpooled"] and elapsed < 20 * 60
    record(12, "separable >= 10x faster than 4D; pooled faster than unpooled", ok,
           f"separable {t['separable'] * 1e3:.1f} ms, unpooled {t['separable_unpooled'] * 1e3:.1f} ms, "
           f"4D {t['4d'] * 1e3:.1f} ms, speedup {speedup:.0f}x")
    assert ok


def test_criterion_13_black_scholes_round_trip():
    start = time.perf_counter()
    rng = np.random.default_rng(113)
    worst = 0.0
    for _ in range(200):
        spot = rng.uniform(50, 150)
        sigma = rng.uniform(0.05, 1.0)
        tau = rng.uniform(14, 365) / 365
        rate = rng.uniform(0.0, 0.05)
        # strikes within two standard deviations of the forward keep the price informative
        strike = spot * math.exp(rate * tau + rng.uniform(-2, 2) * sigma * math.sqrt(tau))
        price = bs_call_price(spot, strike, tau, rate, sigma)
        worst = max(worst, abs(implied_vol(price, spot, strike, tau, rate) - sigma))
    elapsed = time.perf_counter() - start
    ok = worst <= 1e-8 and elapsed < 1.0
    record(13, "implied vol inverts the call price", ok, f"max err {worst:.1e}, {elapsed:.2f}s")
    assert ok
