"""Simulation scenarios, sparse sampling, error metrics and evaluation harnesses."""

from __future__ import annotations

import csv
import math
import time
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.special import eval_legendre

from sepsurf.baselines import bsa, presmooth_predict, smooth4d_covariance
from sepsurf.bandwidth import fold_assignment, transfer_to_4d
from sepsurf.data import Grid2, SparseDataset, center, grid_dataset
from sepsurf.errors import NonPsdCovariance
from sepsurf.prediction import blup, blup_full
from sepsurf.separable import (
    FitOptions,
    SeparableModel,
    covariance_sweeps,
    diagonal_variance,
    fit_separable,
    mean_from_samples,
    noise_region,
    smooth_pooled,
)
from sepsurf.smoothing import Bandwidths2, ScatterCloud, smooth2d

__all__ = [
    "SCENARIOS",
    "Scenario",
    "brownian_kernel",
    "fourier_kernel",
    "legendre_kernel",
    "gneiting",
    "scenario_covariance",
    "sample_surfaces",
    "relative_error",
    "HoldoutPattern",
    "holdout_tasks",
    "holdout_evaluate",
    "error_study",
    "runtime_benchmark",
    "fit_unpooled",
    "write_csv",
]

SCENARIOS = ("fourier", "brownian", "gneiting", "fourier_legendre")


def brownian_kernel(x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    return np.minimum.outer(x, x)


def fourier_kernel(x, n_terms: int = 10) -> np.ndarray:
    """Kernel with eigenfunctions 1, sqrt2 sin(2 pi k x), sqrt2 cos(2 pi k x) and eigenvalues k^-2."""
    x = np.asarray(x, dtype=float)
    funcs = [np.ones_like(x)]
    k = 1
    while len(funcs) < n_terms:
        funcs.append(math.sqrt(2) * np.sin(2 * np.pi * k * x))
        if len(funcs) < n_terms:
            funcs.append(math.sqrt(2) * np.cos(2 * np.pi * k * x))
        k += 1
    phi = np.stack(funcs, axis=1)
    lam = 1.0 / np.arange(1, n_terms + 1) ** 2
    return (phi * lam) @ phi.T


def legendre_kernel(x, rank: int = 4) -> np.ndarray:
    """Rank-``rank`` kernel on orthonormal shifted Legendre polynomials, eigenvalues k^-2."""
    x = np.asarray(x, dtype=float)
    phi = np.stack([math.sqrt(2 * k + 1) * eval_legendre(k, 2 * x - 1) for k in range(rank)], axis=1)
    lam = 1.0 / np.arange(1, rank + 1) ** 2
    return (phi * lam) @ phi.T


def gneiting(dt, ds, a=1.0, b=1.0, tau=1.0, alpha=1.0, beta=0.7, gamma=1.0, sigma2=1.0):
    """Gneiting space-time covariance with the decaying (negative) exponent."""
    psi = a**2 * np.abs(dt) ** (2 * alpha) + 1.0
    return sigma2 / psi**tau * np.exp(-(b**2) * np.abs(ds) ** (2 * gamma) / psi ** (beta * gamma))


def _trace_one(M):
    return M / np.trace(M)


@dataclass
class Scenario:
    kind: str
    grid: Grid2
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in SCENARIOS:
            raise ValueError(f"unknown scenario {self.kind!r}; choose from {SCENARIOS}")


def scenario_covariance(sc: Scenario):
    """Trace-one covariance: ``(A, B)`` for separable kinds, a ``(d1, d2, d1, d2)`` tensor otherwise."""
    t, s = sc.grid.t, sc.grid.s
    if sc.kind == "brownian":
        return _trace_one(brownian_kernel(t)), _trace_one(brownian_kernel(s))
    if sc.kind == "fourier":
        n = sc.params.get("n_terms", 10)
        return _trace_one(fourier_kernel(t, n)), _trace_one(fourier_kernel(s, n))
    if sc.kind == "gneiting":
        p = {k: v for k, v in sc.params.items() if k in {"a", "b", "tau", "alpha", "beta", "gamma", "sigma2"}}
        dt = t[:, None, None, None] - t[None, None, :, None]
        dsp = s[None, :, None, None] - s[None, None, None, :]
        C = gneiting(dt, dsp, **p)
        return C / np.trace(C.reshape(sc.grid.d1 * sc.grid.d2, -1))
    n = sc.params.get("n_terms", 10)
    weight = sc.params.get("legendre_weight", 0.5)
    A1, B1 = _trace_one(fourier_kernel(t, n)), _trace_one(fourier_kernel(s, n))
    A2, B2 = _trace_one(legendre_kernel(t)), _trace_one(legendre_kernel(s))
    C = np.einsum("ik,jl->ijkl", A1, B1) + weight * np.einsum("ik,jl->ijkl", A2, B2)
    return C / (1.0 + weight)


def _sqrt_psd(M, tol=1e-8):
    vals, vecs = np.linalg.eigh(0.5 * (M + M.T))
    if vals.min() < -tol * max(vals.max(), 1e-300):
        raise NonPsdCovariance(f"covariance has eigenvalue {vals.min():.3g}")
    if vals.min() < 0:
        warnings.warn("clipping small negative eigenvalues of the covariance", RuntimeWarning)
    return vecs * np.sqrt(np.clip(vals, 0.0, None))


def sample_surfaces(
    cov,
    grid: Grid2,
    n: int,
    p: float,
    noise_sigma2: float | None = None,
    seed: int = 0,
    mean=None,
    return_latent: bool = False,
):
    """Draw Gaussian surfaces on the grid, add noise and keep ``ceil(p * d1 * d2)`` random cells each.

    ``cov`` is either an ``(A, B)`` pair, drawn as ``L_A Z L_B^T``, or a full
    4D tensor.  The default noise variance ``1 / (d1 d2)`` makes the gridded
    white noise trace one.
    """
    if not 0 < p <= 1:
        raise ValueError("p must lie in (0, 1]")
    d1, d2 = grid.shape
    rng = np.random.default_rng(seed)
    sigma2 = 1.0 / (d1 * d2) if noise_sigma2 is None else float(noise_sigma2)
    Z = rng.standard_normal((n, d1, d2))
    if isinstance(cov, tuple):
        LA, LB = _sqrt_psd(np.asarray(cov[0])), _sqrt_psd(np.asarray(cov[1]))
        X = LA @ Z @ LB.T
    else:
        L = _sqrt_psd(np.asarray(cov).reshape(d1 * d2, d1 * d2))
        X = (Z.reshape(n, -1) @ L.T).reshape(n, d1, d2)
    if mean is not None:
        X = X + np.asarray(mean)
    noisy = X + math.sqrt(sigma2) * rng.standard_normal((n, d1, d2))
    m = math.ceil(round(p * d1 * d2, 9))
    ids, ts, ss, ys = [], [], [], []
    for k in range(n):
        cells = rng.choice(d1 * d2, size=m, replace=False)
        i, j = np.unravel_index(np.sort(cells), (d1, d2))
        ids.append(np.full(m, k))
        ts.append(grid.t[i])
        ss.append(grid.s[j])
        ys.append(noisy[k, i, j])
    ds = SparseDataset(
        np.concatenate(ids), np.concatenate(ts), np.concatenate(ss), np.concatenate(ys), n,
        meta={"sigma2": sigma2, "p": p, "seed": seed},
    )
    return (ds, X) if return_latent else ds


def _as_tensor(x):
    if isinstance(x, tuple):
        return np.einsum("ik,jl->ijkl", x[0], x[1])
    return np.asarray(x, dtype=float)


def relative_error(estimate, truth) -> float:
    """``||estimate - truth||_F / ||truth||_F``; separable operands are given as ``(A, B)`` pairs."""
    if isinstance(estimate, SeparableModel):
        estimate = (estimate.A, estimate.B)
    if isinstance(truth, SeparableModel):
        truth = (truth.A, truth.B)
    if isinstance(estimate, tuple) and isinstance(truth, tuple):
        A, B = (np.asarray(v, dtype=float) for v in estimate)
        A0, B0 = (np.asarray(v, dtype=float) for v in truth)
        if A.shape != A0.shape or B.shape != B0.shape:
            raise ValueError("shape mismatch")
        nt = np.sum(A0 * A0) * np.sum(B0 * B0)
        diff = np.sum(A * A) * np.sum(B * B) + nt - 2 * np.sum(A * A0) * np.sum(B * B0)
        return float(math.sqrt(max(diff, 0.0) / nt))
    E, T = _as_tensor(estimate), _as_tensor(truth)
    if E.shape != T.shape:
        raise ValueError(f"shape mismatch {E.shape} vs {T.shape}")
    return float(np.linalg.norm(E - T) / np.linalg.norm(T))


# ---------------------------------------------------------------------------
# hold-out prediction harness


@dataclass(frozen=True)
class HoldoutPattern:
    """Which observations of a surface are predicted from the rest.

    ``chain`` removes one maturity row at a time.  ``itm``/``otm`` split on the
    moneyness coordinate ``s`` at ``s_threshold``; ``short``/``long`` split on
    the maturity coordinate ``t`` at ``t_threshold``.  The defaults map
    moneyness 1 and 183 days onto the option domain of
    :class:`sepsurf.data.OptionDomain`.
    """

    kind: str
    s_threshold: float = 0.5
    t_threshold: float = (183.0 - 14.0) / (365.0 - 14.0)

    def __post_init__(self):
        if self.kind not in ("chain", "itm", "otm", "short", "long"):
            raise ValueError(f"unknown hold-out pattern {self.kind!r}")


def holdout_tasks(t, s, pattern: HoldoutPattern, grid: Grid2 | None = None):
    """List of ``(kept, discarded)`` boolean masks for one surface; empty when not applicable."""
    t, s = np.asarray(t), np.asarray(s)
    if pattern.kind == "chain":
        rows = grid.cell_index(t, s)[0] if grid is not None else t
        chains = np.unique(rows)
        if chains.size < 2:
            return []
        return [(rows != c, rows == c) for c in chains]
    # in-the-money calls have strike below spot, i.e. s below the threshold
    if pattern.kind == "itm":
        disc, kept = s <= pattern.s_threshold, s > pattern.s_threshold
    elif pattern.kind == "otm":
        disc, kept = s >= pattern.s_threshold, s < pattern.s_threshold
    elif pattern.kind == "short":
        disc, kept = t <= pattern.t_threshold, t > pattern.t_threshold
    else:
        disc, kept = t >= pattern.t_threshold, t < pattern.t_threshold
    if not disc.any() or not kept.any():
        return []
    return [(kept, disc)]


class _SeparablePredictor:
    def __init__(self, model):
        self.model = model

    def __call__(self, t, s, y):
        return blup(self.model, t, s, y).predicted


class _FullPredictor:
    def __init__(self, grid, mean, C, sigma2):
        self.grid, self.mean, self.C, self.sigma2 = grid, mean, C, sigma2

    def __call__(self, t, s, y):
        return blup_full(self.grid, self.mean, self.C, self.sigma2, t, s, y).predicted


class _PresmoothPredictor:
    def __init__(self, grid, bw):
        self.grid, self.bw = grid, bw

    def __call__(self, t, s, y):
        return presmooth_predict(t, s, y, self.grid, self.bw)


def fit_4d(ds: SparseDataset, grid: Grid2, opts: FitOptions):
    """Mean, 4D-smoothed covariance and noise level at bandwidths transferred from the separable fit."""
    samples = grid_dataset(ds, grid)
    mean = mean_from_samples(samples, grid, opts.bw_mean)
    centered = center(samples, mean)
    C = smooth4d_covariance(centered, grid, transfer_to_4d(opts.bw_a, opts.bw_b))
    V = diagonal_variance(centered, grid, opts.bw_noise)
    G = grid.d1 * grid.d2
    diag = np.diag(C.reshape(G, G)).reshape(grid.shape)
    it, js = noise_region(grid.t), noise_region(grid.s)
    sigma2 = max(float(np.mean((V - diag)[np.ix_(it, js)])), 0.0)
    return mean, C, sigma2


def _build_predictor(method, train, grid, opts, presmooth_bw):
    if callable(method) and not isinstance(method, str):
        return method(train, grid)
    if isinstance(method, SeparableModel):
        return _SeparablePredictor(method)
    if method == "separable":
        return _SeparablePredictor(fit_separable(train, grid, opts))
    if method == "4d":
        mean, C, sigma2 = fit_4d(train, grid, opts)
        return _FullPredictor(grid, mean, C, sigma2)
    if method == "presmooth":
        return _PresmoothPredictor(grid, presmooth_bw)
    raise ValueError(f"unknown method {method!r}")


def holdout_evaluate(
    ds: SparseDataset,
    grid: Grid2,
    pattern: HoldoutPattern,
    folds: int = 10,
    methods=None,
    seed: int = 0,
    opts: FitOptions | None = None,
    presmooth_bw=None,
) -> dict:
    """K-fold hold-out comparison of predictors against per-surface pre-smoothing.

    ``methods`` maps a name to ``"separable"``, ``"4d"``, ``"presmooth"``, a
    fitted :class:`SeparableModel` (used as is, e.g. an oracle), or a callable
    ``(train_ds, grid) -> predictor``.  A predictor maps kept ``(t, s, y)`` to
    a grid prediction.  Each report row holds the RMSE of one method on the
    discarded observations of one test surface, divided by the RMSE of
    pre-smoothing.  Surfaces whose kept or discarded part would be empty are
    skipped and counted.
    """
    methods = methods or {"separable": "separable"}
    opts = opts or FitOptions()
    if presmooth_bw is None:
        presmooth_bw = opts.bw_mean or Bandwidths2(3.0 / grid.d1, 3.0 / grid.d2)
    rows = []
    skipped = 0
    for f, fold in enumerate(fold_assignment(ds.n_surfaces, folds, seed)):
        train_ids = np.setdiff1d(np.arange(ds.n_surfaces), fold)
        train = ds.subset(train_ids)
        predictors = {name: _build_predictor(m, train, grid, opts, presmooth_bw) for name, m in methods.items()}
        bench = _PresmoothPredictor(grid, presmooth_bw)
        for n in fold:
            t, s, y = ds.surface(n)
            tasks = holdout_tasks(t, s, pattern, grid)
            if not tasks:
                skipped += 1
                continue
            err = {name: 0.0 for name in predictors}
            err_bench = 0.0
            for kept, disc in tasks:
                i, j = grid.cell_index(t[disc], s[disc])
                err_bench += float(np.sum((bench(t[kept], s[kept], y[kept])[i, j] - y[disc]) ** 2))
                for name, pred in predictors.items():
                    err[name] += float(np.sum((pred(t[kept], s[kept], y[kept])[i, j] - y[disc]) ** 2))
            for name in predictors:
                ratio = math.sqrt(err[name] / err_bench) if err_bench > 0 else (1.0 if err[name] == 0 else math.inf)
                rows.append(
                    {"pattern": pattern.kind, "fold": f, "surface_id": int(n), "method": name, "rmse_ratio": ratio}
                )
    medians = {
        name: float(np.median([r["rmse_ratio"] for r in rows if r["method"] == name])) if rows else float("nan")
        for name in methods
    }
    return {"rows": rows, "medians": medians, "skipped": skipped, "pattern": pattern.kind, "seed": seed}


# ---------------------------------------------------------------------------
# estimation error study and runtime benchmark


def _truth_tensor_or_pair(cov):
    return cov if isinstance(cov, tuple) else np.asarray(cov)


def error_study(
    scenario: Scenario,
    ps,
    n: int,
    replicates: int,
    methods=("one_step", "proposed"),
    seed: int = 0,
    opts: FitOptions | None = None,
    noise_sigma2: float | None = None,
) -> list[dict]:
    """Relative covariance errors per ``(p, method, replicate)``.

    Methods: ``one_step``, ``proposed`` (two steps), ``three_step``, ``4d``
    and ``bsa`` (computed from the full noiseless surfaces).
    """
    cov = scenario_covariance(scenario)
    truth = _truth_tensor_or_pair(cov)
    grid = scenario.grid
    opts = opts or FitOptions()
    rows = []
    for p in ps:
        for r in range(replicates):
            rep_seed = int(np.random.SeedSequence([seed, r, int(round(p * 1e6))]).generate_state(1)[0])
            ds, latent = sample_surfaces(cov, grid, n, p, noise_sigma2, rep_seed, return_latent=True)
            errs = _method_errors(ds, latent, grid, opts, methods, truth, rep_seed)
            for name, e in errs.items():
                rows.append({"scenario": scenario.kind, "p": p, "n": n, "method": name, "replicate": r, "rel_error": e})
    return rows


def _method_errors(ds, latent, grid, opts, methods, truth, rep_seed):
    errs = {}
    steps = {"one_step": 1, "proposed": 2, "three_step": 3}
    need = [m for m in methods if m in steps]
    if need or "4d" in methods:
        if any(v is None for v in (opts.bw_mean, opts.bw_a, opts.bw_b, opts.bw_noise)):
            model = fit_separable(ds, grid, FitOptions(steps=1, seed=rep_seed, cv_folds=opts.cv_folds))
            bw = {k: Bandwidths2(*v) for k, v in model.bandwidths.items()}
            opts = FitOptions(bw_mean=bw["mean"], bw_a=bw["a"], bw_b=bw["b"], bw_noise=bw["noise"])
        samples = grid_dataset(ds, grid)
        centered = center(samples, mean_from_samples(samples, grid, opts.bw_mean))
        hist = covariance_sweeps(centered, grid, opts.bw_a, opts.bw_b, max([steps[m] for m in need] or [1]))
        for m in need:
            errs[m] = relative_error(hist[steps[m] - 1], truth)
    if "4d" in methods:
        _, C, _ = fit_4d(ds, grid, opts)
        errs["4d"] = relative_error(C, truth)
    if "bsa" in methods:
        Xc = latent - latent.mean(axis=0)
        C = np.einsum("nij,nkl->ijkl", Xc, Xc) / latent.shape[0]
        errs["bsa"] = relative_error(tuple(bsa(C)), truth)
    return errs


def fit_unpooled(centered, grid: Grid2, bw_a, bw_b, steps: int = 2):
    """Reference separable path: every raw-covariance pair is its own scatter point.

    Produces the same factors as the pooled path (up to rounding) at a much
    higher cost.
    """
    pts = []
    for values, mask in zip(centered.values, centered.mask):
        i, j = np.nonzero(mask)
        v = values[i, j]
        a, b = np.meshgrid(np.arange(i.size), np.arange(i.size), indexing="ij")
        a, b = a.ravel(), b.ravel()
        pts.append(np.column_stack([i[a], j[a], i[b], j[b], v[a] * v[b]]))
    P = np.vstack(pts)
    i1, j1, i2, j2 = (P[:, k].astype(int) for k in range(4))
    G = P[:, 4]

    def step(fixed, idx_fixed, idx_free, coords, bw):
        f = fixed[idx_fixed[0], idx_fixed[1]]
        w = f * f
        keep = (idx_fixed[0] != idx_fixed[1]) & (w > 0)
        z = np.zeros_like(G)
        z[keep] = G[keep] / f[keep]
        cloud = ScatterCloud(coords[idx_free[0][keep]], coords[idx_free[1][keep]], z[keep], w[keep])
        out = smooth2d(cloud, bw, coords, coords)
        return 0.5 * (out + out.T)

    B = np.ones((grid.d2, grid.d2))
    for _ in range(steps):
        A = step(B, (j1, j2), (i1, i2), grid.t, bw_a)
        B = step(A, (i1, i2), (j1, j2), grid.s, bw_b)
    return A, B


def runtime_benchmark(scenarios, sizes, seed: int = 0, bw=None, include_unpooled=True, include_4d=True) -> list[dict]:
    """Wall-clock seconds of the covariance estimators at matched bandwidths.

    ``sizes`` holds ``(d, n, p)`` triples.  Methods: ``separable``
    (marginalised and pooled), ``separable_unpooled`` and ``4d``.
    """
    rows = []
    for kind in scenarios:
        for d, n, p in sizes:
            grid = Grid2(d, d)
            cov = scenario_covariance(Scenario(kind, grid))
            ds = sample_surfaces(cov, grid, n, p, seed=seed)
            h = Bandwidths2.coerce(bw if bw is not None else 2.5 / d)
            samples = grid_dataset(ds, grid)
            centered = center(samples, mean_from_samples(samples, grid, h))

            def timed(fn):
                start = time.perf_counter()
                fn()
                return time.perf_counter() - start

            opts = FitOptions.fixed(h)
            timings = {"separable": timed(lambda: fit_separable(ds, grid, opts))}
            if include_unpooled:
                timings["separable_unpooled"] = timed(lambda: fit_unpooled(centered, grid, h, h))
            if include_4d:
                timings["4d"] = timed(lambda: smooth4d_covariance(centered, grid, transfer_to_4d(h, h)))
            for method, sec in timings.items():
                rows.append({"scenario": kind, "d": d, "n": n, "p": p, "method": method, "seconds": sec})
    return rows


def write_csv(rows, path, columns=None):
    rows = list(rows)
    columns = columns or (list(rows[0].keys()) if rows else [])
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=columns, extrasaction="ignore")
        writer.writeheader()
        for r in rows:
            writer.writerow(r)
