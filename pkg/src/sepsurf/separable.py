"""Mean, separable covariance and noise estimation from sparse gridded surfaces.

The covariance ``c(t, s, t', s') = a(t, t') b(s, s')`` is estimated by
alternating between the two factors.  While one factor is held fixed, every
surface's raw covariances are collapsed onto the other dimension with
quadratic weights (``marginalize_temporal`` / ``marginalize_spatial``), the
per-surface contributions are pooled cell by cell, and a single 2D local
linear smoother produces the updated factor.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field

import numpy as np

from sepsurf.data import Grid2, MaskedGrid, SparseDataset, center, grid_dataset
from sepsurf.errors import DegenerateWindow, InsufficientPairs, NonPositiveTrace
from sepsurf.smoothing import Bandwidths2, ScatterCloud, smooth2d

__all__ = [
    "SeparableModel",
    "FitOptions",
    "estimate_mean",
    "mean_from_samples",
    "marginalize_temporal",
    "marginalize_spatial",
    "pool",
    "smooth_pooled",
    "fit_separable",
    "estimate_noise",
    "normalize",
    "psd_project",
]


@dataclass
class SeparableModel:
    """Fitted mean grid, temporal factor ``A``, spatial factor ``B`` and noise ``sigma2``.

    Only the products ``A[i, i'] * B[j, j']`` are identified; ``normalization``
    records the convention used to split the scale between the factors.
    """

    grid: Grid2
    mean: np.ndarray
    A: np.ndarray
    B: np.ndarray
    sigma2: float
    normalization: dict = field(default_factory=dict)
    bandwidths: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=float)
        self.A = np.asarray(self.A, dtype=float)
        self.B = np.asarray(self.B, dtype=float)
        d1, d2 = self.grid.d1, self.grid.d2
        if self.mean.shape != (d1, d2) or self.A.shape != (d1, d1) or self.B.shape != (d2, d2):
            raise ValueError("model component shapes do not match the grid")
        if self.sigma2 < 0:
            raise ValueError("sigma2 must be nonnegative")
        self.sigma2 = float(self.sigma2)

    def covariance(self) -> np.ndarray:
        """Full ``(d1, d2, d1, d2)`` covariance tensor."""
        return np.einsum("ik,jl->ijkl", self.A, self.B)

    def to_dict(self) -> dict:
        return {
            "grid": {"d1": self.grid.d1, "d2": self.grid.d2},
            "mean": self.mean.ravel().tolist(),
            "A": self.A.ravel().tolist(),
            "B": self.B.ravel().tolist(),
            "sigma2": self.sigma2,
            "normalization": self.normalization,
            "bandwidths": self.bandwidths,
            "meta": self.meta,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "SeparableModel":
        grid = Grid2(int(doc["grid"]["d1"]), int(doc["grid"]["d2"]))
        d1, d2 = grid.shape
        return cls(
            grid,
            np.asarray(doc["mean"], dtype=float).reshape(d1, d2),
            np.asarray(doc["A"], dtype=float).reshape(d1, d1),
            np.asarray(doc["B"], dtype=float).reshape(d2, d2),
            float(doc["sigma2"]),
            dict(doc.get("normalization", {})),
            dict(doc.get("bandwidths", {})),
            dict(doc.get("meta", {})),
        )

    # json writes floats with repr(), which round-trips binary64 exactly
    def to_json(self, path=None, **extra) -> str:
        doc = self.to_dict()
        doc.update(extra)
        text = json.dumps(doc, indent=1)
        if path is not None:
            with open(path, "w", encoding="utf-8") as fh:
                fh.write(text)
        return text

    @classmethod
    def from_json(cls, path_or_text) -> "SeparableModel":
        text = str(path_or_text)
        if not text.lstrip().startswith("{"):
            with open(path_or_text, encoding="utf-8") as fh:
                text = fh.read()
        return cls.from_dict(json.loads(text))


@dataclass
class FitOptions:
    """Settings for :func:`fit_separable`.

    Bandwidths left as ``None`` are chosen by cross-validation.  ``steps`` is
    the number of (A, B) sweeps: 1 gives the one-step estimator, 2 the
    default two-step estimator.  ``drop_diagonal`` discards same-location
    products in the marginalisation (the noise-burdened ones); switching it
    off is only meaningful for noiseless data.  ``init_scale`` is the constant
    value of the initial spatial weighting matrix.
    """

    steps: int = 2
    bw_mean: Bandwidths2 | None = None
    bw_a: Bandwidths2 | None = None
    bw_b: Bandwidths2 | None = None
    bw_noise: Bandwidths2 | None = None
    psd_project: bool = False
    seed: int = 0
    drop_diagonal: bool = True
    init_scale: float = 1.0
    cv_folds: int = 10

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("steps must be at least 1")
        for name in ("bw_mean", "bw_a", "bw_b", "bw_noise"):
            val = getattr(self, name)
            if val is not None:
                setattr(self, name, Bandwidths2.coerce(val))
        if self.init_scale == 0:
            raise ValueError("init_scale must be nonzero")

    @classmethod
    def fixed(cls, bw, **kwargs) -> "FitOptions":
        """All four smoothers share the bandwidth pair ``bw``."""
        bw = Bandwidths2.coerce(bw)
        return cls(bw_mean=bw, bw_a=bw, bw_b=bw, bw_noise=bw, **kwargs)


def _finite_or_raise(out, coords_x, coords_y):
    bad = np.argwhere(np.isnan(out))
    if bad.size:
        i, j = bad[0]
        raise DegenerateWindow(coords_x[i], coords_y[j])
    return out


def mean_from_samples(samples: MaskedGrid, grid: Grid2, bw) -> np.ndarray:
    """Mean surface from gridded observations pooled over surfaces.

    Every observed cell of every surface is one unit-weight scatter point at
    the cell midpoint; coincident points are merged with their count as
    weight, which leaves the local-linear fit unchanged.
    """
    count = samples.mask.sum(axis=0).astype(float)
    total = samples.values.sum(axis=0, where=samples.mask)
    zbar = np.divide(total, count, out=np.zeros_like(total), where=count > 0)
    tt, ss = np.meshgrid(grid.t, grid.s, indexing="ij")
    out = smooth2d(ScatterCloud(tt, ss, zbar, count), bw, grid.t, grid.s)
    return _finite_or_raise(out, grid.t, grid.s)


def estimate_mean(ds: SparseDataset, grid: Grid2, bw) -> np.ndarray:
    """Local-linear mean surface on the grid midpoints."""
    return mean_from_samples(grid_dataset(ds, grid), grid, bw)


def _zero_diagonal(M, drop):
    M = np.array(M, dtype=float)
    if drop:
        np.fill_diagonal(M, 0.0)
    return M


def marginalize_temporal(samples: MaskedGrid, B, drop_diagonal: bool = True):
    """Per-surface temporal contributions ``(Z, W)``, each of shape ``(N, d1, d1)``.

    ``W_n = Q_n Bt2 Q_n^T`` and ``Z_n = (Y_n Bt Y_n^T) / W_n`` where ``Bt`` is
    ``B`` with a zeroed diagonal and ``Bt2`` its entrywise square; ``Z_n`` is
    zero wherever ``W_n`` is.
    """
    Bt = _zero_diagonal(B, drop_diagonal)
    if Bt.shape != (samples.shape[1],) * 2:
        raise ValueError("B does not match the spatial grid size")
    Y = samples.values
    Q = samples.mask.astype(float)
    W = Q @ (Bt * Bt) @ Q.transpose(0, 2, 1)
    num = Y @ Bt @ Y.transpose(0, 2, 1)
    Z = np.divide(num, W, out=np.zeros_like(num), where=W != 0)
    return Z, W


def marginalize_spatial(samples: MaskedGrid, A, drop_diagonal: bool = True):
    """Per-surface spatial contributions ``(Z, W)`` of shape ``(N, d2, d2)``; dual of the temporal one."""
    swapped = MaskedGrid(samples.values.transpose(0, 2, 1), samples.mask.transpose(0, 2, 1))
    return marginalize_temporal(swapped, A, drop_diagonal)


def pool(Z, W):
    """Merge per-surface contributions cell by cell: weighted mean value, summed weight."""
    wsum = W.sum(axis=0)
    num = (W * Z).sum(axis=0)
    zbar = np.divide(num, wsum, out=np.zeros_like(num), where=wsum != 0)
    return zbar, wsum


def smooth_pooled(Z, W, coords, bw) -> np.ndarray:
    """Smooth pooled marginal contributions into a symmetric kernel matrix on ``coords``."""
    zbar, wsum = pool(Z, W)
    xx, yy = np.meshgrid(coords, coords, indexing="ij")
    out = smooth2d(ScatterCloud(xx, yy, zbar, wsum), bw, coords, coords)
    out = _finite_or_raise(out, coords, coords)
    return 0.5 * (out + out.T)


def psd_project(M) -> np.ndarray:
    """Nearest PSD matrix in Frobenius norm (eigenvalues clipped at zero)."""
    vals, vecs = np.linalg.eigh(0.5 * (M + M.T))
    return (vecs * np.clip(vals, 0.0, None)) @ vecs.T


def noise_region(coords) -> np.ndarray:
    """Indices of midpoints inside the central half of the axis."""
    coords = np.asarray(coords)
    idx = np.nonzero((coords > 0.25) & (coords < 0.75))[0]
    if idx.size == 0:
        idx = np.nonzero((coords >= 0.25) & (coords <= 0.75))[0]
    if idx.size == 0:
        idx = np.arange(coords.size)
    return idx


def diagonal_variance(centered: MaskedGrid, grid: Grid2, bw) -> np.ndarray:
    """Smoothed squared centred observations (signal variance plus noise)."""
    sq = MaskedGrid(centered.values**2, centered.mask)
    return mean_from_samples(sq, grid, bw)


def estimate_noise(centered: MaskedGrid, grid: Grid2, A, B, bw) -> float:
    """Noise variance: central-region average of ``V(t, s) - A[i, i] B[j, j]``, clamped at zero."""
    V = diagonal_variance(centered, grid, bw)
    it, js = noise_region(grid.t), noise_region(grid.s)
    signal = np.outer(np.diag(A), np.diag(B))
    return max(float(np.mean((V - signal)[np.ix_(it, js)])), 0.0)


def normalize(model: SeparableModel) -> SeparableModel:
    """Rescale so that ``trace(A) == 1``, moving the scale into ``B``."""
    tr = float(np.trace(model.A))
    if not tr > 0:
        raise NonPositiveTrace(f"trace(A) = {tr}; the scale split is undefined")
    if tr < 1e-8:
        warnings.warn(f"trace(A) = {tr:.3g} is tiny; the scale constant may be unidentifiable", RuntimeWarning)
    norm = dict(model.normalization)
    norm.update({"convention": "trace_A_one", "trace_A_before": tr})
    return SeparableModel(
        model.grid, model.mean, model.A / tr, model.B * tr, model.sigma2, norm, dict(model.bandwidths), dict(model.meta)
    )


def _has_pairs(samples: MaskedGrid, drop_diagonal: bool) -> bool:
    counts = samples.mask.sum(axis=(1, 2))
    if not drop_diagonal:
        return bool(np.any(counts >= 1))
    # need two observed cells in different columns (temporal step) and
    # different rows (spatial step) within one surface
    cols = samples.mask.any(axis=1).sum(axis=1)
    rows = samples.mask.any(axis=2).sum(axis=1)
    return bool(np.any(cols >= 2)) and bool(np.any(rows >= 2))


def covariance_sweeps(centered: MaskedGrid, grid: Grid2, bw_a, bw_b, steps=2, init_scale=1.0, drop_diagonal=True):
    """Alternating factor updates starting from a constant spatial factor.

    Returns the list of ``(A, B)`` iterates, one per sweep.
    """
    B = np.full((grid.d2, grid.d2), float(init_scale))
    history = []
    for _ in range(steps):
        A = smooth_pooled(*marginalize_temporal(centered, B, drop_diagonal), grid.t, bw_a)
        B = smooth_pooled(*marginalize_spatial(centered, A, drop_diagonal), grid.s, bw_b)
        history.append((A, B))
    return history


def fit_separable(ds: SparseDataset, grid: Grid2, opts: FitOptions | None = None) -> SeparableModel:
    """Estimate mean, separable covariance and noise level from sparse surfaces.

    Bandwidths missing from ``opts`` are chosen by cross-validation over
    surfaces (see :mod:`sepsurf.bandwidth`).  The returned model is trace
    normalised.
    """
    opts = opts or FitOptions()
    ds.validate()
    samples = grid_dataset(ds, grid)
    if not _has_pairs(samples, opts.drop_diagonal):
        raise InsufficientPairs("no surface provides off-diagonal raw covariances")

    bws = _resolve_bandwidths(ds, grid, samples, opts)
    mean = mean_from_samples(samples, grid, bws["mean"])
    centered = center(samples, mean)
    A, B = covariance_sweeps(
        centered, grid, bws["a"], bws["b"], opts.steps, opts.init_scale, opts.drop_diagonal
    )[-1]
    if opts.psd_project:
        A, B = psd_project(A), psd_project(B)
    sigma2 = estimate_noise(centered, grid, A, B, bws["noise"])
    model = SeparableModel(
        grid,
        mean,
        A,
        B,
        sigma2,
        normalization={"psd_project": opts.psd_project},
        bandwidths={k: list(v.as_tuple()) for k, v in bws.items()},
        meta={
            "n_surfaces": int(ds.n_surfaces),
            "n_obs": int(len(ds)),
            "seed": int(opts.seed),
            "steps": int(opts.steps),
        },
    )
    return normalize(model)


def _resolve_bandwidths(ds, grid, samples, opts):
    bws = {"mean": opts.bw_mean, "a": opts.bw_a, "b": opts.bw_b, "noise": opts.bw_noise}
    if all(v is not None for v in bws.values()):
        return bws
    from sepsurf import bandwidth

    spec = bandwidth.CvSpec(folds=min(opts.cv_folds, ds.n_surfaces), seed=opts.seed)
    if bws["mean"] is None:
        bws["mean"] = bandwidth.cv_mean_bandwidth(ds, grid, spec)
    if bws["a"] is None or bws["b"] is None:
        bw_a, bw_b = bandwidth.cv_covariance_bandwidths(ds, grid, spec, bw_mean=bws["mean"])
        bws["a"] = bws["a"] or bw_a
        bws["b"] = bws["b"] or bw_b
    if bws["noise"] is None:
        bws["noise"] = bandwidth.cv_noise_bandwidth(ds, grid, spec, bw_mean=bws["mean"])
    return bws
