"""Observation containers, gridding, centering and option-price ingestion."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import ndtr

from sepsurf.errors import DataError, PriceOutOfBracket

__all__ = [
    "Grid2",
    "SparseDataset",
    "MaskedGrid",
    "grid_dataset",
    "center",
    "bs_call_price",
    "implied_vol",
    "OptionDomain",
    "ingest_options",
]


@dataclass(frozen=True)
class Grid2:
    """Equispaced ``d1 x d2`` grid of cell midpoints on the unit square."""

    d1: int
    d2: int

    def __post_init__(self):
        if self.d1 < 2 or self.d2 < 2:
            raise ValueError("grid needs at least two cells per axis")

    @property
    def t(self) -> np.ndarray:
        return (np.arange(1, self.d1 + 1) - 0.5) / self.d1

    @property
    def s(self) -> np.ndarray:
        return (np.arange(1, self.d2 + 1) - 0.5) / self.d2

    @property
    def shape(self) -> tuple[int, int]:
        return (self.d1, self.d2)

    def cell_index(self, t, s):
        """Zero-based indices of the nearest cell midpoints."""
        i = np.clip(np.floor(np.asarray(t, dtype=float) * self.d1), 0, self.d1 - 1).astype(int)
        j = np.clip(np.floor(np.asarray(s, dtype=float) * self.d2), 0, self.d2 - 1).astype(int)
        return i, j


@dataclass
class SparseDataset:
    """Irregular noisy observations ``(surface_id, t, s, y)`` of ``n_surfaces`` surfaces."""

    surface_id: np.ndarray
    t: np.ndarray
    s: np.ndarray
    y: np.ndarray
    n_surfaces: int | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.surface_id = np.asarray(self.surface_id, dtype=int).ravel()
        self.t = np.asarray(self.t, dtype=float).ravel()
        self.s = np.asarray(self.s, dtype=float).ravel()
        self.y = np.asarray(self.y, dtype=float).ravel()
        n = self.surface_id.size
        if not (self.t.size == n and self.s.size == n and self.y.size == n):
            raise DataError("surface_id, t, s and y must have equal length")
        if self.n_surfaces is None:
            self.n_surfaces = int(self.surface_id.max()) + 1 if n else 0
        if n and (self.surface_id.min() < 0 or self.surface_id.max() >= self.n_surfaces):
            raise DataError("surface ids must lie in [0, n_surfaces)")
        if np.any((self.t < 0) | (self.t > 1) | (self.s < 0) | (self.s > 1)):
            raise DataError("observation coordinates must lie in [0, 1]^2")
        if not np.all(np.isfinite(self.y)):
            raise DataError("observed values must be finite")

    def __len__(self):
        return self.y.size

    def counts(self) -> np.ndarray:
        return np.bincount(self.surface_id, minlength=self.n_surfaces)

    def validate(self):
        """Require at least one surface with two observations."""
        if not np.any(self.counts() >= 2):
            raise DataError("at least one surface needs two or more observations")
        return self

    def surface(self, n: int):
        sel = self.surface_id == n
        return self.t[sel], self.s[sel], self.y[sel]

    def subset(self, ids) -> "SparseDataset":
        """Dataset restricted to ``ids``, renumbered ``0..len(ids)-1`` in the given order."""
        ids = np.asarray(ids, dtype=int)
        remap = np.full(self.n_surfaces, -1)
        remap[ids] = np.arange(ids.size)
        new = remap[self.surface_id]
        keep = new >= 0
        return SparseDataset(new[keep], self.t[keep], self.s[keep], self.y[keep], int(ids.size), dict(self.meta))

    def select(self, keep) -> "SparseDataset":
        keep = np.asarray(keep, dtype=bool)
        return SparseDataset(
            self.surface_id[keep], self.t[keep], self.s[keep], self.y[keep], self.n_surfaces, dict(self.meta)
        )

    # -- CSV -----------------------------------------------------------------

    def to_csv(self, path):
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["surface_id", "t", "s", "y"])
            for row in zip(self.surface_id, self.t, self.s, self.y):
                writer.writerow([int(row[0]), repr(float(row[1])), repr(float(row[2])), repr(float(row[3]))])

    @classmethod
    def from_csv(cls, path, n_surfaces: int | None = None) -> "SparseDataset":
        path = Path(path)
        with open(path, newline="", encoding="utf-8") as fh:
            reader = csv.DictReader(fh)
            missing = {"surface_id", "t", "s", "y"} - set(reader.fieldnames or ())
            if missing:
                raise DataError(f"{path}: missing columns {sorted(missing)}")
            rows = [(int(r["surface_id"]), float(r["t"]), float(r["s"]), float(r["y"])) for r in reader]
        if not rows:
            raise DataError(f"{path}: no observations")
        arr = list(zip(*rows))
        return cls(np.array(arr[0]), np.array(arr[1]), np.array(arr[2]), np.array(arr[3]), n_surfaces)


@dataclass
class MaskedGrid:
    """Stack of gridded surfaces: ``values[n]`` is meaningful only where ``mask[n]``.

    Unobserved cells hold zeros, so the arrays can be used directly in the
    marginalisation products.
    """

    values: np.ndarray
    mask: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        self.mask = np.asarray(self.mask, dtype=bool)
        if self.values.shape != self.mask.shape or self.values.ndim != 3:
            raise ValueError("values and mask must both have shape (N, d1, d2)")

    def __len__(self):
        return self.values.shape[0]

    def __getitem__(self, idx):
        if isinstance(idx, (int, np.integer)):
            return self.values[idx], self.mask[idx]
        return MaskedGrid(self.values[idx], self.mask[idx])

    @property
    def shape(self):
        return self.values.shape[1:]


def grid_dataset(ds: SparseDataset, grid: Grid2) -> MaskedGrid:
    """Round observations to their nearest cell; average duplicates within a surface."""
    i, j = grid.cell_index(ds.t, ds.s)
    shape = (ds.n_surfaces, grid.d1, grid.d2)
    flat = np.ravel_multi_index((ds.surface_id, i, j), shape)
    size = int(np.prod(shape))
    total = np.bincount(flat, weights=ds.y, minlength=size)
    count = np.bincount(flat, minlength=size)
    mask = count > 0
    values = np.zeros(size)
    values[mask] = total[mask] / count[mask]
    return MaskedGrid(values.reshape(shape), mask.reshape(shape))


def center(samples: MaskedGrid, mean_grid) -> MaskedGrid:
    """Subtract ``mean_grid`` on observed cells; unobserved cells stay zero."""
    mean_grid = np.asarray(mean_grid, dtype=float)
    if mean_grid.shape != samples.shape:
        raise ValueError(f"mean grid shape {mean_grid.shape} does not match samples {samples.shape}")
    values = np.where(samples.mask, samples.values - mean_grid, 0.0)
    return MaskedGrid(values, samples.mask.copy())


# ---------------------------------------------------------------------------
# Black-Scholes


def bs_call_price(spot, strike, tau, rate, sigma):
    """Black-Scholes value of a European call on a non-dividend-paying asset.

    ``tau`` is the time to expiry in years; ``sigma`` the annualised
    volatility.  Vectorises over array arguments.
    """
    spot, strike, tau, sigma = (np.asarray(v, dtype=float) for v in (spot, strike, tau, sigma))
    rate = np.asarray(rate, dtype=float)
    if np.any(spot <= 0) or np.any(strike <= 0) or np.any(tau <= 0) or np.any(sigma <= 0):
        raise ValueError("spot, strike, tau and sigma must be positive")
    vol = sigma * np.sqrt(tau)
    d1 = (np.log(spot / strike) + tau * (rate + 0.5 * sigma**2)) / vol
    d2 = d1 - vol
    price = spot * ndtr(d1) - strike * np.exp(-rate * tau) * ndtr(d2)
    return price if price.ndim else float(price)


def implied_vol(price, spot, strike, tau, rate, *, tol=1e-10, max_sigma=1e3):
    """Volatility reproducing ``price`` under Black-Scholes, by bisection.

    Raises :class:`PriceOutOfBracket` unless
    ``max(spot - strike*exp(-rate*tau), 0) < price < spot``.
    """
    lower = max(spot - strike * math.exp(-rate * tau), 0.0)
    if not (lower < price < spot):
        raise PriceOutOfBracket(f"price {price} outside no-arbitrage bracket ({lower}, {spot})")
    lo, hi = 0.0, 1.0
    while bs_call_price(spot, strike, tau, rate, hi) < price:
        lo, hi = hi, 2.0 * hi
        if hi > max_sigma:
            raise PriceOutOfBracket(f"no volatility below {max_sigma} reaches price {price}")
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if mid <= lo or mid >= hi:
            break
        if bs_call_price(spot, strike, tau, rate, mid) < price:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


@dataclass(frozen=True)
class OptionDomain:
    """Affine maps from (days to expiry, log-moneyness) onto the unit square."""

    tau_days_min: float = 14.0
    tau_days_max: float = 365.0
    logm_min: float = -0.5
    logm_max: float = 0.5
    days_per_year: float = 365.0

    def to_t(self, tau_days):
        return (np.asarray(tau_days, dtype=float) - self.tau_days_min) / (self.tau_days_max - self.tau_days_min)

    def to_s(self, logm):
        return (np.asarray(logm, dtype=float) - self.logm_min) / (self.logm_max - self.logm_min)

    def as_dict(self):
        return {
            "tau_days_min": self.tau_days_min,
            "tau_days_max": self.tau_days_max,
            "logm_min": self.logm_min,
            "logm_max": self.logm_max,
            "days_per_year": self.days_per_year,
        }


def ingest_options(path_or_rows, domain: OptionDomain = OptionDomain(), log_iv: bool = True) -> SparseDataset:
    """Convert an option-chain table to a :class:`SparseDataset`.

    Input columns are ``surface_id,spot,strike,tau_days,rate,price``.  Rows
    outside the domain, or whose price admits no implied volatility, are
    dropped and counted in ``meta``.  Surface labels may be any string; they
    are renumbered ``0..K-1`` in order of first appearance and kept in
    ``meta["surface_labels"]``.  The observed value is the implied
    volatility, or its logarithm when ``log_iv`` is set.
    """
    if isinstance(path_or_rows, (str, Path)):
        with open(path_or_rows, newline="", encoding="utf-8") as fh:
            rows = list(csv.DictReader(fh))
    else:
        rows = list(path_or_rows)
    ids, ts, ss, ys = [], [], [], []
    dropped_domain = dropped_price = 0
    for r in rows:
        spot, strike = float(r["spot"]), float(r["strike"])
        tau_days, rate, price = float(r["tau_days"]), float(r["rate"]), float(r["price"])
        logm = math.log(strike / spot)
        t, s = float(domain.to_t(tau_days)), float(domain.to_s(logm))
        if not (0.0 <= t <= 1.0 and 0.0 <= s <= 1.0):
            dropped_domain += 1
            continue
        try:
            iv = implied_vol(price, spot, strike, tau_days / domain.days_per_year, rate)
        except PriceOutOfBracket:
            dropped_price += 1
            continue
        ids.append(str(r["surface_id"]))
        ts.append(t)
        ss.append(s)
        ys.append(math.log(iv) if log_iv else iv)
    if not ids:
        raise DataError("no usable option quotes")
    # surfaces are renumbered in order of first appearance
    labels = list(dict.fromkeys(ids))
    index = {lab: k for k, lab in enumerate(labels)}
    meta = {
        "surface_labels": labels,
        "domain": domain.as_dict(),
        "log_iv": log_iv,
        "dropped_outside_domain": dropped_domain,
        "dropped_no_implied_vol": dropped_price,
    }
    return SparseDataset(np.array([index[i] for i in ids]), np.array(ts), np.array(ss), np.array(ys), meta=meta)
