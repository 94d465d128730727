"""Weighted local-linear smoothing with the Epanechnikov product kernel.

Two entry points are provided: :func:`smooth2d` for surfaces and
:func:`smooth4d` for functions of two location pairs.  Both evaluate on a
rectilinear grid only.  The two-dimensional smoother is computed from kernel
moment sums (closed-form normal equations), never from an explicit design
matrix, which lets every moment be obtained as a single matrix product
because the product kernel factorises across axes.
"""

from __future__ import annotations

from dataclasses import dataclass
from itertools import combinations_with_replacement

import numpy as np

from sepsurf.errors import DegenerateWindow

__all__ = [
    "Bandwidths2",
    "ScatterCloud",
    "epanechnikov",
    "smooth2d",
    "smooth4d",
    "SINGULAR_RTOL",
    "MAX_DOUBLINGS",
]

SINGULAR_RTOL = 1e-12
MAX_DOUBLINGS = 5
ILL_CONDITIONED = 1e-4


def epanechnikov(u):
    """Epanechnikov kernel ``0.75 * (1 - u**2)`` on ``|u| < 1``, zero elsewhere."""
    u = np.asarray(u, dtype=float)
    out = np.where(np.abs(u) < 1.0, 0.75 * (1.0 - u * u), 0.0)
    return out if out.ndim else float(out)


@dataclass(frozen=True)
class Bandwidths2:
    """Bandwidth pair for the first and second smoothing axis."""

    h1: float
    h2: float

    def __post_init__(self):
        if not (self.h1 > 0 and self.h2 > 0):
            raise ValueError(f"bandwidths must be positive, got ({self.h1}, {self.h2})")

    def scaled(self, factor: float) -> "Bandwidths2":
        return Bandwidths2(self.h1 * factor, self.h2 * factor)

    def as_tuple(self) -> tuple[float, float]:
        return (float(self.h1), float(self.h2))

    @classmethod
    def coerce(cls, bw) -> "Bandwidths2":
        if isinstance(bw, cls):
            return bw
        if np.isscalar(bw):
            return cls(float(bw), float(bw))
        h1, h2 = bw
        return cls(float(h1), float(h2))


@dataclass
class ScatterCloud:
    """Weighted scatter points ``(x_k, y_k, z_k, w_k)`` fed to :func:`smooth2d`."""

    x: np.ndarray
    y: np.ndarray
    z: np.ndarray
    w: np.ndarray | None = None

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=float).ravel()
        self.y = np.asarray(self.y, dtype=float).ravel()
        self.z = np.asarray(self.z, dtype=float).ravel()
        if self.w is None:
            self.w = np.ones_like(self.x)
        else:
            self.w = np.asarray(self.w, dtype=float).ravel()
        n = self.x.size
        if not (self.y.size == n and self.z.size == n and self.w.size == n):
            raise ValueError("x, y, z and w must have equal length")
        if np.any(self.w < 0) or not np.all(np.isfinite(self.w)):
            raise ValueError("weights must be finite and nonnegative")

    def __len__(self):
        return self.x.size

    def active(self) -> "ScatterCloud":
        """Drop zero-weight points; they never enter the fit."""
        keep = self.w > 0
        return ScatterCloud(self.x[keep], self.y[keep], self.z[keep], self.w[keep])


def _kernel_factors(centers, coords, h):
    # u[i, k] = (center_i - coord_k) / h, scaled kernel weights alongside
    u = (np.asarray(centers, dtype=float)[:, None] - coords[None, :]) / h
    k = np.where(np.abs(u) < 1.0, 0.75 * (1.0 - u * u), 0.0) / h
    return u, k


def _estimable_intercept(normal, rhs, rtol=1e-9):
    """Intercept of a rank-deficient local fit, or NaN when it is not identified.

    The intercept is identified iff the first unit vector lies in the range of
    the (symmetric) normal matrix.
    """
    scale = np.max(np.abs(np.diag(normal)))
    if not scale > 0:
        return np.nan
    pinv = np.linalg.pinv(normal, rcond=rtol, hermitian=True)
    e0 = np.zeros(normal.shape[0])
    e0[0] = 1.0
    if np.linalg.norm(normal @ (pinv @ e0) - e0) > 1e-7:
        return np.nan
    return float(pinv[0] @ rhs)


def _smooth2d_once(cloud, bw, xs, ys, rtol):
    ux, kx = _kernel_factors(xs, cloud.x, bw.h1)
    uy, ky = _kernel_factors(ys, cloud.y, bw.h2)
    w = cloud.w
    wz = w * cloud.z

    def mom(p, q, weights):
        return ((kx * ux**p) * weights) @ (ky * uy**q).T

    s00, s10, s01 = mom(0, 0, w), mom(1, 0, w), mom(0, 1, w)
    s20, s02, s11 = mom(2, 0, w), mom(0, 2, w), mom(1, 1, w)
    q00, q10, q01 = mom(0, 0, wz), mom(1, 0, wz), mom(0, 1, wz)

    phi1 = s20 * s02 - s11 * s11
    phi2 = s10 * s02 - s01 * s11
    phi3 = s01 * s20 - s10 * s11
    psi1 = phi1 * q00 - phi2 * q10 - phi3 * q01
    psi2 = phi1 * s00 - phi2 * s10 - phi3 * s01

    # psi2 is the determinant of the 3x3 normal matrix; compare it against the
    # Hadamard bound s00*s20*s02 so the test is invariant to weight and axis scale
    bound = s00 * s20 * s02
    with np.errstate(divide="ignore", invalid="ignore"):
        ok = (s00 > 0) & (np.abs(psi2) > rtol * bound) & (bound > 0)
        out = np.where(ok, psi1 / np.where(ok, psi2, 1.0), np.nan)

    def normal_at(idx):
        normal = np.stack(
            [
                np.stack([s00[idx], s10[idx], s01[idx]], -1),
                np.stack([s10[idx], s20[idx], s11[idx]], -1),
                np.stack([s01[idx], s11[idx], s02[idx]], -1),
            ],
            -2,
        )
        return normal, np.stack([q00[idx], q10[idx], q01[idx]], -1)

    # the normal equations square the conditioning of the local design; poorly
    # conditioned windows are re-solved from the weighted design itself
    weak = ok & (np.abs(psi2) < ILL_CONDITIONED * bound)
    for i, j in zip(*np.nonzero(weak)):
        kw = kx[i] * ky[j] * w
        act = kw > 0
        root = np.sqrt(kw[act])
        design = np.column_stack([root, root * ux[i, act], root * uy[j, act]])
        out[i, j] = np.linalg.lstsq(design, root * cloud.z[act], rcond=None)[0][0]

    for i, j in zip(*np.nonzero(~ok)):
        if s00[i, j] <= 0:
            continue
        normal, rhs = normal_at((i, j))
        out[i, j] = _estimable_intercept(normal, rhs)
    return out


def smooth2d(
    cloud: ScatterCloud,
    bw,
    xs,
    ys,
    *,
    fallback: bool = True,
    max_doublings: int = MAX_DOUBLINGS,
    rtol: float = SINGULAR_RTOL,
) -> np.ndarray:
    """Local-linear surface smoother evaluated on the grid ``xs`` x ``ys``.

    Parameters
    ----------
    cloud : ScatterCloud
        Scatter points and their nonnegative weights.
    bw : Bandwidths2 or pair of floats
        Bandwidths along the x and y axis.
    xs, ys : array_like
        Evaluation coordinates; the result has shape ``(len(xs), len(ys))``.
    fallback : bool, default True
        When True, grid points whose local design does not identify the
        intercept are re-evaluated with both bandwidths doubled, up to
        ``max_doublings`` times; points still degenerate are returned as NaN.
        When False, the first such point raises :class:`DegenerateWindow`.
    rtol : float
        Relative singularity threshold for the normal-equation determinant.

    Returns
    -------
    numpy.ndarray
        Intercept of the weighted local-linear fit at every grid point.
    """
    bw = Bandwidths2.coerce(bw)
    xs = np.atleast_1d(np.asarray(xs, dtype=float))
    ys = np.atleast_1d(np.asarray(ys, dtype=float))
    cloud = cloud.active()
    out = np.full((xs.size, ys.size), np.nan)
    if len(cloud) == 0:
        if not fallback:
            raise DegenerateWindow(xs[0], ys[0])
        return out

    out = _smooth2d_once(cloud, bw, xs, ys, rtol)
    bad = np.isnan(out)
    if bad.any() and not fallback:
        i, j = np.argwhere(bad)[0]
        raise DegenerateWindow(xs[i], ys[j])

    factor = 1.0
    for _ in range(max_doublings):
        if not bad.any():
            break
        factor *= 2.0
        rows = np.nonzero(bad.any(axis=1))[0]
        cols = np.nonzero(bad.any(axis=0))[0]
        retry = _smooth2d_once(cloud, bw.scaled(factor), xs[rows], ys[cols], rtol)
        sub = bad[np.ix_(rows, cols)]
        block = out[np.ix_(rows, cols)]
        block[sub] = retry[sub]
        out[np.ix_(rows, cols)] = block
        bad = np.isnan(out)
    return out


# ---------------------------------------------------------------------------
# four-dimensional smoother


def _solve_local(normal, rhs, rtol):
    """Batched intercepts of local fits; NaN where not identified."""
    diag = np.einsum("...ii->...i", normal)
    bound = np.prod(diag, axis=-1)
    det = np.linalg.det(normal)
    ok = (diag[..., 0] > 0) & (bound > 0) & (np.abs(det) > rtol * bound)
    out = np.full(normal.shape[:-2], np.nan)
    if ok.any():
        out[ok] = np.linalg.solve(normal[ok], rhs[ok][..., None])[..., 0, 0]
    for idx in zip(*np.nonzero(~ok)):
        if diag[idx][0] > 0:
            out[idx] = _estimable_intercept(normal[idx], rhs[idx])
    return out


def _smooth4d_once(coords, z, w, h, grids, rtol):
    dims = len(grids)
    factors = [_kernel_factors(g, c, hh) for g, c, hh in zip(grids, coords, h)]
    sizes = [len(g) for g in grids]

    # moments are sums over k of prod_d K_d u_d^{p_d}; group axes (0,1) and
    # (2,3) so each moment is one (n0*n1, M) @ (M, n2*n3) product
    def pair_block(a, b, pa, pb, weights=None):
        ua, ka = factors[a]
        ub, kb = factors[b]
        fa = ka * ua**pa
        fb = kb * ub**pb
        if weights is not None:
            fb = fb * weights
        return (fa[:, None, :] * fb[None, :, :]).reshape(-1, fa.shape[1])

    def moment(powers, weights):
        left = pair_block(0, 1, powers[0], powers[1])
        right = pair_block(2, 3, powers[2], powers[3], weights)
        return (left @ right.T).reshape(sizes)

    def powers_of(*axes):
        p = [0] * dims
        for a in axes:
            p[a] += 1
        return p

    normal = np.empty(sizes + [dims + 1, dims + 1])
    rhs = np.empty(sizes + [dims + 1])
    wz = w * z
    normal[..., 0, 0] = moment(powers_of(), w)
    rhs[..., 0] = moment(powers_of(), wz)
    for a in range(dims):
        m = moment(powers_of(a), w)
        normal[..., 0, a + 1] = normal[..., a + 1, 0] = m
        rhs[..., a + 1] = moment(powers_of(a), wz)
    for a, b in combinations_with_replacement(range(dims), 2):
        m = moment(powers_of(a, b), w)
        normal[..., a + 1, b + 1] = normal[..., b + 1, a + 1] = m
    return _solve_local(normal, rhs, rtol)


def smooth4d(
    points,
    bw,
    grids,
    *,
    fallback: bool = True,
    max_doublings: int = MAX_DOUBLINGS,
    rtol: float = SINGULAR_RTOL,
) -> np.ndarray:
    """Local-linear smoother in four covariates with a product Epanechnikov kernel.

    ``points`` is an ``(M, 6)`` array of rows ``(x, y, x', y', z, w)`` (a
    five-column array is read as unit weights).  ``grids`` holds the four
    evaluation axes and ``bw`` the four bandwidths.  Returns a tensor of shape
    ``tuple(len(g) for g in grids)``.  Degenerate windows follow the same
    doubling policy as :func:`smooth2d`.
    """
    pts = np.asarray(points, dtype=float)
    if pts.ndim != 2 or pts.shape[1] not in (5, 6):
        raise ValueError("points must have shape (M, 5) or (M, 6)")
    coords = [pts[:, d] for d in range(4)]
    z = pts[:, 4]
    w = pts[:, 5] if pts.shape[1] == 6 else np.ones(len(pts))
    if np.any(w < 0):
        raise ValueError("weights must be nonnegative")
    keep = w > 0
    coords = [c[keep] for c in coords]
    z, w = z[keep], w[keep]
    h = np.asarray(bw, dtype=float).ravel()
    if h.size != 4 or np.any(h <= 0):
        raise ValueError("smooth4d needs four positive bandwidths")
    grids = [np.atleast_1d(np.asarray(g, dtype=float)) for g in grids]
    if len(grids) != 4:
        raise ValueError("smooth4d needs four evaluation axes")

    shape = tuple(len(g) for g in grids)
    if z.size == 0:
        if not fallback:
            raise DegenerateWindow(*(g[0] for g in grids))
        return np.full(shape, np.nan)

    out = _smooth4d_once(coords, z, w, h, grids, rtol)
    bad = np.isnan(out)
    if bad.any() and not fallback:
        idx = np.argwhere(bad)[0]
        raise DegenerateWindow(*(g[i] for g, i in zip(grids, idx)))

    factor = 1.0
    for _ in range(max_doublings):
        if not bad.any():
            break
        factor *= 2.0
        sel = [np.nonzero(bad.any(axis=tuple(a for a in range(4) if a != d)))[0] for d in range(4)]
        retry = _smooth4d_once(coords, z, w, h * factor, [g[s] for g, s in zip(grids, sel)], rtol)
        ix = np.ix_(*sel)
        block = out[ix]
        sub = bad[ix]
        block[sub] = retry[sub]
        out[ix] = block
        bad = np.isnan(out)
    return out
