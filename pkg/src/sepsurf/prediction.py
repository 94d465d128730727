"""Best linear unbiased prediction of a latent surface with confidence bands."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.stats import norm

from sepsurf.data import Grid2
from sepsurf.errors import FactorizationFailure, SingularSystem

__all__ = [
    "BlupResult",
    "blup",
    "blup_full",
    "pointwise_band",
    "simultaneous_band",
    "conditional_correlation",
    "gaussian_factor",
    "sup_quantile",
    "normal_draws",
]

CHUNK = 1024


@dataclass
class BlupResult:
    """Predicted surface, conditional variances and band half-widths on the grid.

    ``cond_cov`` is the full conditional covariance over the flattened grid
    (row-major over ``(i, j)``); the simultaneous band needs it.
    """

    grid: Grid2
    predicted: np.ndarray
    cond_var: np.ndarray
    cond_cov: np.ndarray
    pointwise_halfwidth: np.ndarray | None = None
    simultaneous_halfwidth: np.ndarray | None = None
    alpha: float | None = None
    u_quantile: float | None = None
    z_quantile: float | None = None
    n_draws: int | None = None
    seed: int | None = None
    meta: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        def flat(a):
            return None if a is None else np.asarray(a).ravel().tolist()

        return {
            "grid": {"d1": self.grid.d1, "d2": self.grid.d2},
            "predicted": flat(self.predicted),
            "cond_var": flat(self.cond_var),
            "pointwise_halfwidth": flat(self.pointwise_halfwidth),
            "simultaneous_halfwidth": flat(self.simultaneous_halfwidth),
            "alpha": self.alpha,
            "z_quantile": self.z_quantile,
            "u_quantile": self.u_quantile,
            "seed": self.seed,
            "n_draws": self.n_draws,
            **self.meta,
        }


def _solve_system(cross, var, resid, prior_cov, ridge, cond_limit):
    m = var.shape[0]
    if ridge is None:
        ridge = 1e-8 * float(np.mean(np.diag(var)))
    var = var + ridge * np.eye(m)
    if not np.all(np.isfinite(var)) or np.linalg.cond(var) > cond_limit:
        raise SingularSystem("observation covariance is numerically singular; increase the ridge")
    # var is symmetric; solve once for the residual and for the cross-covariance
    sol = np.linalg.solve(var, np.column_stack([resid, cross.T]))
    pred_shift = cross @ sol[:, 0]
    cond = prior_cov - cross @ sol[:, 1:]
    cond = 0.5 * (cond + cond.T)
    return pred_shift, cond, ridge


def blup(model, t, s, y, ridge: float | None = None, cond_limit: float = 1e12) -> BlupResult:
    """Predict the latent surface from its observations under a separable model.

    Kernel values are looked up at the grid cells nearest to each observation.
    ``ridge`` is added to the diagonal of the observation covariance;
    ``None`` means ``1e-8`` times its mean diagonal.
    """
    grid = model.grid
    t, s, y = (np.atleast_1d(np.asarray(v, dtype=float)) for v in (t, s, y))
    if not (t.size == s.size == y.size) or y.size == 0:
        raise ValueError("need equal-length, nonempty t, s, y")
    im, jm = grid.cell_index(t, s)
    A, B = model.A, model.B
    # cov(X(i, j), Y_m) = A[i, i_m] B[j, j_m], flattened row-major over (i, j)
    cross = np.einsum("im,jm->ijm", A[:, im], B[:, jm]).reshape(grid.d1 * grid.d2, -1)
    var = A[np.ix_(im, im)] * B[np.ix_(jm, jm)] + model.sigma2 * np.eye(y.size)
    resid = y - model.mean[im, jm]
    prior = np.kron(A, B)
    shift, cond, ridge = _solve_system(cross, var, resid, prior, ridge, cond_limit)
    predicted = model.mean + shift.reshape(grid.shape)
    cond_var = np.clip(np.diag(cond), 0.0, None).reshape(grid.shape)
    return BlupResult(grid, predicted, cond_var, cond, meta={"ridge": ridge, "n_obs": int(y.size)})


def blup_full(grid: Grid2, mean, C, sigma2, t, s, y, ridge=None, cond_limit=1e12) -> BlupResult:
    """Same predictor with a general ``(d1, d2, d1, d2)`` covariance tensor."""
    t, s, y = (np.atleast_1d(np.asarray(v, dtype=float)) for v in (t, s, y))
    im, jm = grid.cell_index(t, s)
    G = grid.d1 * grid.d2
    Cm = np.asarray(C, dtype=float).reshape(G, G)
    flat = np.ravel_multi_index((im, jm), grid.shape)
    cross = Cm[:, flat]
    var = Cm[np.ix_(flat, flat)] + sigma2 * np.eye(y.size)
    resid = y - np.asarray(mean)[im, jm]
    shift, cond, ridge = _solve_system(cross, var, resid, Cm, ridge, cond_limit)
    predicted = np.asarray(mean) + shift.reshape(grid.shape)
    cond_var = np.clip(np.diag(cond), 0.0, None).reshape(grid.shape)
    return BlupResult(grid, predicted, cond_var, cond, meta={"ridge": ridge, "n_obs": int(y.size)})


def pointwise_band(result: BlupResult, alpha: float = 0.05) -> BlupResult:
    """Attach the pointwise Gaussian half-width ``u_{1-alpha/2} * sqrt(cond_var)``."""
    u = float(norm.ppf(1.0 - alpha / 2.0))
    result.u_quantile = u
    result.alpha = alpha
    result.pointwise_halfwidth = u * np.sqrt(result.cond_var)
    return result


def conditional_correlation(cov) -> np.ndarray:
    """Correlation matrix of ``cov``; entries involving a zero variance are zero."""
    cov = np.asarray(cov, dtype=float)
    sd = np.sqrt(np.clip(np.diag(cov), 0.0, None))
    pos = sd > 0
    corr = np.zeros_like(cov)
    corr[np.ix_(pos, pos)] = cov[np.ix_(pos, pos)] / np.outer(sd[pos], sd[pos])
    np.clip(corr, -1.0, 1.0, out=corr)
    return corr


def gaussian_factor(corr, jitters=(1e-10, 1e-9, 1e-8, 1e-7, 1e-6)) -> np.ndarray:
    """Matrix ``L`` with ``L @ L.T`` equal to ``corr`` after clipping negative eigenvalues."""
    corr = 0.5 * (corr + corr.T)
    for jitter in (0.0,) + tuple(jitters):
        try:
            vals, vecs = np.linalg.eigh(corr + jitter * np.eye(corr.shape[0]))
        except np.linalg.LinAlgError:
            continue
        if np.all(np.isfinite(vals)):
            return vecs * np.sqrt(np.clip(vals, 0.0, None))
    raise FactorizationFailure("could not factor the correlation matrix")


def normal_draws(seed: int, n_draws: int, dim: int):
    """Standard normal draws in fixed-size blocks from a counter-based generator.

    Block ``k`` always comes from the Philox stream keyed by ``seed`` jumped
    ``k`` times, so the values do not depend on how blocks are scheduled.
    """
    base = np.random.Philox(key=seed)
    for k, start in enumerate(range(0, n_draws, CHUNK)):
        size = min(CHUNK, n_draws - start)
        yield np.random.Generator(base.jumped(k)).standard_normal((size, dim))


def sup_quantile(corr, alpha: float = 0.05, n_draws: int = 10_000, seed: int = 0) -> float:
    """Monte Carlo ``(1 - alpha)``-quantile of ``max |Z|`` for ``Z ~ N(0, corr)``."""
    L = gaussian_factor(np.asarray(corr, dtype=float))
    maxima = np.concatenate([np.max(np.abs(z @ L.T), axis=1) for z in normal_draws(seed, n_draws, L.shape[1])])
    return float(np.quantile(maxima, 1.0 - alpha))


def simultaneous_band(result: BlupResult, alpha: float = 0.05, n_draws: int = 10_000, seed: int = 0) -> BlupResult:
    """Attach the simultaneous half-width ``z_{1-alpha} * sqrt(cond_var)``.

    ``z_{1-alpha}`` is the quantile of the supremum of a Gaussian field on
    the grid whose covariance is the conditional correlation.
    """
    z = sup_quantile(conditional_correlation(result.cond_cov), alpha, n_draws, seed)
    result.z_quantile = z
    result.alpha = alpha
    result.n_draws = n_draws
    result.seed = seed
    result.simultaneous_halfwidth = z * np.sqrt(result.cond_var)
    return result
