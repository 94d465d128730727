"""Separable covariance estimation and prediction for sparsely observed random surfaces."""

from sepsurf.data import Grid2, MaskedGrid, SparseDataset, bs_call_price, implied_vol
from sepsurf.errors import DataError, NumericalError, SepsurfError
from sepsurf.prediction import BlupResult, blup, pointwise_band, simultaneous_band
from sepsurf.separable import FitOptions, SeparableModel, fit_separable
from sepsurf.smoothing import Bandwidths2, ScatterCloud, smooth2d, smooth4d

__version__ = "0.1.0"

__all__ = [
    "Bandwidths2",
    "BlupResult",
    "DataError",
    "FitOptions",
    "Grid2",
    "MaskedGrid",
    "NumericalError",
    "ScatterCloud",
    "SepsurfError",
    "SeparableModel",
    "SparseDataset",
    "blup",
    "bs_call_price",
    "fit_separable",
    "implied_vol",
    "pointwise_band",
    "simultaneous_band",
    "smooth2d",
    "smooth4d",
]
