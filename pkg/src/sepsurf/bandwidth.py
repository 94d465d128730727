"""K-fold cross-validation over surfaces for every smoother in the pipeline.

Folds split surfaces, never observations of one surface, because surfaces are
the independent units.  Candidate bandwidths come from geometric ladders tied
to the grid resolution.  Scores are accumulated fold by fold in a fixed order,
so a given seed always selects the same bandwidths.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from sepsurf.data import Grid2, MaskedGrid, SparseDataset, center, grid_dataset
from sepsurf.errors import AllCandidatesDegenerate, DataError
from sepsurf.separable import marginalize_spatial, marginalize_temporal, mean_from_samples, pool
from sepsurf.smoothing import Bandwidths2, ScatterCloud, smooth2d

__all__ = [
    "CvSpec",
    "CvReport",
    "ladder",
    "fold_assignment",
    "cv_mean_bandwidth",
    "cv_noise_bandwidth",
    "cv_covariance_bandwidths",
    "transfer_to_4d",
]


def ladder(d: int, n: int = 8, lo_cells: float = 1.5, hi: float = 0.5) -> np.ndarray:
    """Geometric ladder from ``lo_cells`` cell widths up to ``hi`` (domain units)."""
    lo = lo_cells / d
    if n == 1:
        return np.array([lo])
    return np.geomspace(lo, max(hi, lo), n)


@dataclass
class CvSpec:
    """Cross-validation settings; explicit ``candidates_*`` override the default ladders."""

    folds: int = 10
    n_candidates: int = 8
    seed: int = 0
    candidates_t: np.ndarray | None = None
    candidates_s: np.ndarray | None = None

    def __post_init__(self):
        if self.folds < 2:
            raise ValueError("at least two folds are required")
        for name in ("candidates_t", "candidates_s"):
            val = getattr(self, name)
            if val is not None:
                val = np.sort(np.atleast_1d(np.asarray(val, dtype=float)))
                if np.any(val <= 0):
                    raise ValueError("candidate bandwidths must be positive")
                setattr(self, name, val)

    def ladder_t(self, grid: Grid2) -> np.ndarray:
        return self.candidates_t if self.candidates_t is not None else ladder(grid.d1, self.n_candidates)

    def ladder_s(self, grid: Grid2) -> np.ndarray:
        return self.candidates_s if self.candidates_s is not None else ladder(grid.d2, self.n_candidates)


@dataclass
class CvReport:
    """Per-candidate scores and the selected bandwidth pair."""

    target: str
    candidates: list
    scores: list
    chosen: tuple
    seed: int
    folds: int
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "target": self.target,
            "candidates": [list(c) for c in self.candidates],
            "scores": [None if not np.isfinite(v) else float(v) for v in self.scores],
            "chosen": list(self.chosen),
            "seed": self.seed,
            "folds": self.folds,
            **self.extra,
        }


def fold_assignment(n_surfaces: int, folds: int, seed: int) -> list[np.ndarray]:
    """Seeded shuffle of surface ids split into ``folds`` near-equal groups."""
    if folds > n_surfaces:
        raise DataError(f"{folds} folds need at least {folds} surfaces, got {n_surfaces}")
    perm = np.random.default_rng(seed).permutation(n_surfaces)
    return [np.sort(f) for f in np.array_split(perm, folds)]


def _select(candidates, scores, target, spec, scale=0.0):
    scores = np.asarray(scores, dtype=float)
    if len(candidates) == 1:
        return candidates[0], CvReport(target, candidates, list(scores), candidates[0], spec.seed, spec.folds)
    finite = np.isfinite(scores)
    if not finite.any():
        raise AllCandidatesDegenerate(f"every {target} bandwidth candidate left degenerate windows")
    best = scores[finite].min()
    # scores within rounding of the best (relative to the loss scale) count as ties
    tol = 1e-12 * max(abs(best), scale)
    tied = np.nonzero(finite & (scores <= best + tol))[0]
    # ties go to the larger bandwidth
    pick = max(tied, key=lambda k: (candidates[k][0] * candidates[k][1], candidates[k][0]))
    chosen = candidates[pick]
    return chosen, CvReport(target, candidates, list(scores), chosen, spec.seed, spec.folds)


def _surface_smoother(samples: MaskedGrid, grid: Grid2, bw) -> np.ndarray:
    count = samples.mask.sum(axis=0).astype(float)
    total = samples.values.sum(axis=0, where=samples.mask)
    zbar = np.divide(total, count, out=np.zeros_like(total), where=count > 0)
    tt, ss = np.meshgrid(grid.t, grid.s, indexing="ij")
    return smooth2d(ScatterCloud(tt, ss, zbar, count), bw, grid.t, grid.s)


def _cv_surface(samples: MaskedGrid, grid: Grid2, spec: CvSpec, target: str):
    folds = fold_assignment(len(samples), spec.folds, spec.seed)
    candidates = [(float(a), float(b)) for a in spec.ladder_t(grid) for b in spec.ladder_s(grid)]
    scores = np.zeros(len(candidates))
    scale = float(np.sum(np.where(samples.mask, samples.values, 0.0) ** 2))
    for fold in folds:
        test = np.zeros(len(samples), bool)
        test[fold] = True
        train, held = samples[~test], samples[test]
        for k, cand in enumerate(candidates):
            if not np.isfinite(scores[k]):
                continue
            fit = _surface_smoother(train, grid, cand)
            resid = np.where(held.mask, held.values - fit, 0.0)
            if np.isnan(resid).any():
                scores[k] = np.inf
                continue
            scores[k] += float(np.sum(resid**2))
    return _select(candidates, scores, target, spec, scale)


def cv_mean_bandwidth(ds: SparseDataset, grid: Grid2, spec: CvSpec | None = None, return_report: bool = False):
    """Mean-smoother bandwidths minimising held-out squared error over surface folds."""
    spec = spec or CvSpec()
    chosen, report = _cv_surface(grid_dataset(ds, grid), grid, spec, "mean")
    bw = Bandwidths2(*chosen)
    return (bw, report) if return_report else bw


def cv_noise_bandwidth(
    ds: SparseDataset, grid: Grid2, spec: CvSpec | None = None, bw_mean=None, return_report: bool = False
):
    """Bandwidths for the smoother of squared centred observations."""
    spec = spec or CvSpec()
    samples = grid_dataset(ds, grid)
    if bw_mean is None:
        bw_mean = cv_mean_bandwidth(ds, grid, spec)
    centered = center(samples, mean_from_samples(samples, grid, bw_mean))
    sq = MaskedGrid(centered.values**2, centered.mask)
    chosen, report = _cv_surface(sq, grid, spec, "noise")
    bw = Bandwidths2(*chosen)
    return (bw, report) if return_report else bw


def _smooth_cloud(zbar, wsum, coords, h):
    xx, yy = np.meshgrid(coords, coords, indexing="ij")
    out = smooth2d(ScatterCloud(xx, yy, zbar, wsum), (h, h), coords, coords)
    return 0.5 * (out + out.T)


def _cov_scores(train_zw, test_zw, coords, candidates):
    scores = np.zeros(len(candidates))
    for (Ztr, Wtr), (Zte, Wte) in zip(train_zw, test_zw):
        zbar, wsum = pool(Ztr, Wtr)
        for k, h in enumerate(candidates):
            if not np.isfinite(scores[k]):
                continue
            fit = _smooth_cloud(zbar, wsum, coords, h)
            if np.isnan(fit).any():
                scores[k] = np.inf
                continue
            scores[k] += float(np.sum(Wte * (Zte - fit) ** 2))
    return scores


def cv_covariance_bandwidths(
    ds: SparseDataset, grid: Grid2, spec: CvSpec | None = None, bw_mean=None, return_report: bool = False
):
    """Isotropic bandwidths for the temporal and the spatial factor smoother.

    The loss is the weighted squared error ``sum W (Z - smoothed)^2`` of the
    held-out surfaces' marginal contributions.  The temporal smoother is
    scored on the initial (constant spatial factor) cloud.  The spatial one is
    scored on the cloud weighted by the training folds' preliminary temporal
    factor at the selected temporal bandwidth.
    """
    spec = spec or CvSpec()
    samples = grid_dataset(ds, grid)
    if bw_mean is None:
        bw_mean = cv_mean_bandwidth(ds, grid, spec)
    folds = fold_assignment(len(samples), spec.folds, spec.seed)

    splits = []
    for fold in folds:
        test = np.zeros(len(samples), bool)
        test[fold] = True
        train = samples[~test]
        mu = mean_from_samples(train, grid, bw_mean)
        splits.append((center(train, mu), center(samples[test], mu)))

    ones = np.ones((grid.d2, grid.d2))
    cand_t = [float(h) for h in spec.ladder_t(grid)]
    cand_s = [float(h) for h in spec.ladder_s(grid)]
    tr_t = [marginalize_temporal(tr, ones) for tr, _ in splits]
    te_t = [marginalize_temporal(te, ones) for _, te in splits]
    scores_a = _cov_scores(tr_t, te_t, grid.t, cand_t)
    (h_a, _), rep_a = _select([(h, h) for h in cand_t], scores_a, "temporal", spec)

    tr_s, te_s = [], []
    for (tr, te), zw in zip(splits, tr_t):
        A0 = _smooth_cloud(*pool(*zw), grid.t, h_a)
        if np.isnan(A0).any():
            raise AllCandidatesDegenerate("selected temporal bandwidth is degenerate on a training fold")
        tr_s.append(marginalize_spatial(tr, A0))
        te_s.append(marginalize_spatial(te, A0))
    scores_b = _cov_scores(tr_s, te_s, grid.s, cand_s)
    (h_b, _), rep_b = _select([(h, h) for h in cand_s], scores_b, "spatial", spec)

    bw_a, bw_b = Bandwidths2(h_a, h_a), Bandwidths2(h_b, h_b)
    if return_report:
        return bw_a, bw_b, (rep_a, rep_b)
    return bw_a, bw_b


def transfer_to_4d(bw_a, bw_b) -> tuple[float, float, float, float]:
    """Bandwidths ``(h_t, h_s, h_t, h_s)`` for the 4D smoother on ``(t, s, t', s')``.

    Each factor's two axes are averaged, so an asymmetric pair still yields a
    symmetric 4D window.
    """
    bw_a, bw_b = Bandwidths2.coerce(bw_a), Bandwidths2.coerce(bw_b)
    h_t = 0.5 * (bw_a.h1 + bw_a.h2)
    h_s = 0.5 * (bw_b.h1 + bw_b.h2)
    return (h_t, h_s, h_t, h_s)
