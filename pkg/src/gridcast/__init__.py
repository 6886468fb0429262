"""Gridded calibration of ensemble wind-speed forecasts.

Station-wise EMOS fitting, intrinsic kriging of the fitted predictive
parameters to a grid, and CRPS/PIT verification.
"""

from .distributions import Family, PredictiveDistribution, cdf, crps, crps_ensemble, quantile
from .emos import EmosModel, LocalParams, RegionalParams, fit_local, fit_regional, predict
from .geostat import CovarianceModel, CovKind, KrigingField, Site, grid_predictive, krige, reml_fit

__version__ = "0.1.0"

__all__ = [
    "Family",
    "PredictiveDistribution",
    "cdf",
    "crps",
    "crps_ensemble",
    "quantile",
    "EmosModel",
    "LocalParams",
    "RegionalParams",
    "fit_local",
    "fit_regional",
    "predict",
    "CovarianceModel",
    "CovKind",
    "KrigingField",
    "Site",
    "grid_predictive",
    "krige",
    "reml_fit",
]
