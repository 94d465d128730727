"""Comparator estimators: 4D smoothing, best separable approximation, pre-smoothing."""

from __future__ import annotations

import json
import warnings

import numpy as np

from sepsurf.data import Grid2, MaskedGrid
from sepsurf.errors import DegenerateWindow, EmptySurface, ZeroDenominator
from sepsurf.smoothing import MAX_DOUBLINGS, Bandwidths2, ScatterCloud, epanechnikov, smooth2d, smooth4d

__all__ = [
    "raw_pairs",
    "smooth4d_covariance",
    "bsa_step",
    "bsa_step_spatial",
    "bsa",
    "BsaResult",
    "presmooth_predict",
    "save_covariance",
    "load_covariance",
    "symmetrize4",
]


def symmetrize4(C) -> np.ndarray:
    """Average a ``(d1, d2, d1, d2)`` tensor with its location-pair transpose."""
    return 0.5 * (C + C.transpose(2, 3, 0, 1))


def raw_pairs(centered: MaskedGrid, grid: Grid2, include_diagonal: bool = False) -> np.ndarray:
    """Rows ``(t, s, t', s', G)`` for all ordered pairs of observed cells within a surface."""
    rows = []
    for values, mask in zip(centered.values, centered.mask):
        i, j = np.nonzero(mask)
        if i.size == 0:
            continue
        v = values[i, j]
        a, b = np.meshgrid(np.arange(i.size), np.arange(i.size), indexing="ij")
        keep = np.ones(a.shape, bool) if include_diagonal else a != b
        a, b = a[keep], b[keep]
        rows.append(np.column_stack([grid.t[i[a]], grid.s[j[a]], grid.t[i[b]], grid.s[j[b]], v[a] * v[b]]))
    if not rows:
        return np.empty((0, 5))
    return np.vstack(rows)


def smooth4d_covariance(centered: MaskedGrid, grid: Grid2, bw4) -> np.ndarray:
    """Non-separable covariance by local-linear smoothing of off-diagonal raw covariances in 4D.

    Unit weights; the output is symmetrised over location pairs.  Tuples left
    undefined after the window-doubling fallback raise
    :class:`DegenerateWindow`.
    """
    pts = raw_pairs(centered, grid)
    if pts.shape[0] == 0:
        raise DegenerateWindow(*([grid.t[0]] * 4))
    C = smooth4d(pts, bw4, [grid.t, grid.s, grid.t, grid.s])
    bad = np.argwhere(np.isnan(C))
    if bad.size:
        i, j, k, l = bad[0]
        raise DegenerateWindow(grid.t[i], grid.s[j], grid.t[k], grid.s[l])
    return symmetrize4(C)


def bsa_step(C, B) -> np.ndarray:
    """Temporal factor from one partial-inner-product step with spatial factor ``B``.

    ``A[i, i'] = sum_{j, j'} B[j, j'] C[i, j, i', j'] / sum_{j, j'} B[j, j']**2``.
    """
    B = np.asarray(B, dtype=float)
    denom = float(np.sum(B * B))
    if denom == 0:
        raise ZeroDenominator("spatial factor is identically zero")
    return np.einsum("ijkl,jl->ik", C, B) / denom


def bsa_step_spatial(C, A) -> np.ndarray:
    """Spatial counterpart of :func:`bsa_step`."""
    A = np.asarray(A, dtype=float)
    denom = float(np.sum(A * A))
    if denom == 0:
        raise ZeroDenominator("temporal factor is identically zero")
    return np.einsum("ijkl,ik->jl", C, A) / denom


class BsaResult(tuple):
    """``(A, B)`` pair with ``converged`` and ``n_iter`` attributes."""

    def __new__(cls, A, B, converged, n_iter):
        obj = super().__new__(cls, (A, B))
        obj.converged = converged
        obj.n_iter = n_iter
        return obj

    @property
    def A(self):
        return self[0]

    @property
    def B(self):
        return self[1]


def _kron_norm_sq_diff(A1, B1, A2, B2):
    # ||A1 x B1 - A2 x B2||_F^2 without forming the products
    return (
        np.sum(A1 * A1) * np.sum(B1 * B1)
        + np.sum(A2 * A2) * np.sum(B2 * B2)
        - 2.0 * np.sum(A1 * A2) * np.sum(B1 * B2)
    )


def bsa(C, tol: float = 1e-8, max_iter: int = 100) -> BsaResult:
    """Best separable approximation by alternating partial inner products from ``B = 1``.

    Stops when the relative Frobenius change of ``A x B`` drops below ``tol``.
    If ``max_iter`` is reached first, the last iterate is returned with
    ``converged = False`` and a warning.  Factors are trace normalised.
    """
    C = np.asarray(C, dtype=float)
    if not np.any(C):
        raise ZeroDenominator("covariance tensor is identically zero")
    B = np.ones((C.shape[1], C.shape[1]))
    A_prev = B_prev = None
    converged = False
    n = 0
    for n in range(1, max_iter + 1):
        A = bsa_step(C, B)
        B = bsa_step_spatial(C, A)
        if A_prev is not None:
            change = max(_kron_norm_sq_diff(A, B, A_prev, B_prev), 0.0) ** 0.5
            size = (np.sum(A * A) * np.sum(B * B)) ** 0.5
            if change <= tol * size:
                converged = True
                break
        A_prev, B_prev = A, B
    if not converged:
        warnings.warn(f"BSA did not converge in {max_iter} iterations", RuntimeWarning)
    tr = np.trace(A)
    if tr > 0:
        A, B = A / tr, B * tr
    return BsaResult(A, B, converged, n)


def presmooth_predict(t, s, y, grid: Grid2, bw) -> np.ndarray:
    """Smooth one surface from its own observations only.

    Grid cells whose window stays degenerate after the doubling fallback are
    filled with the kernel-weighted average at the widest bandwidth tried, or
    with the nearest observation when even that window is empty.
    """
    t, s, y = (np.asarray(v, dtype=float).ravel() for v in (t, s, y))
    if y.size == 0:
        raise EmptySurface("surface has no observations")
    bw = Bandwidths2.coerce(bw)
    out = smooth2d(ScatterCloud(t, s, y), bw, grid.t, grid.s)
    bad = np.isnan(out)
    if bad.any():
        wide = bw.scaled(2.0**MAX_DOUBLINGS)
        kt = epanechnikov((grid.t[:, None] - t[None, :]) / wide.h1)
        ks = epanechnikov((grid.s[:, None] - s[None, :]) / wide.h2)
        den = kt @ ks.T
        num = (kt * y) @ ks.T
        fill = np.divide(num, den, out=np.full_like(num, np.nan), where=den > 0)
        still = np.isnan(fill)
        if still.any():
            tt, ss = np.meshgrid(grid.t, grid.s, indexing="ij")
            d2 = (tt[..., None] - t) ** 2 + (ss[..., None] - s) ** 2
            fill[still] = y[np.argmin(d2, axis=-1)][still]
        out[bad] = fill[bad]
    return out


def save_covariance(C, path):
    """Write a 4D covariance tensor as JSON with a shape header (row-major data)."""
    C = np.asarray(C, dtype=float)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump({"shape": list(C.shape), "data": C.ravel().tolist()}, fh)


def load_covariance(path) -> np.ndarray:
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    return np.asarray(doc["data"], dtype=float).reshape(doc["shape"])
