"""Synthetic station networks with known EMOS truth.

The generator builds, in order:

1. an annual-mean wind speed grid ``wbar`` (log-Gaussian, with a smooth
   and a rough component) and stations placed uniformly inside it;
2. station parameters drawn from covariate-scaled intrinsic random fields::

       a_s       = a_level * wbar_s + Z_a(s)
       b_s       = b_level + Z_b(s) / wbar_s
       log xi_s  = logxi_level * wbar_s + Z_xi(s)

   where each ``Z`` follows the scaled added-dimension covariance;
3. daily ensembles around a signal ``wbar_s * W_t(s)`` with a smooth
   daily weather field ``W_t``;
4. observations drawn by quantile transform from the true predictive
   distribution ``mu = a_s(t) + b_s * sum_k w_k f_k``,
   ``sigma2 = c * xi_s**2 + d * S**2``.

An optional sinusoidal drift in ``a_s(t)`` emulates seasonal changes.
"""

from __future__ import annotations

import datetime as dt
import math
from dataclasses import asdict, dataclass, field
from typing import Dict, Optional, Tuple

import numpy as np
from scipy.spatial.distance import cdist

from . import distributions as dist
from .dataio import CovariateGrid, ForecastDataset, bilinear
from .distributions import Family
from .emos import LocalParams, RegionalParams
from .errors import ParameterError
from .geostat import CovarianceModel, CovKind, Site, simulate_intrinsic

_DECIMALS = 3


@dataclass
class SimulationConfig:
    n_stations: int = 200
    n_days: int = 365
    start_date: str = "2012-01-01"
    hours: Tuple[int, ...] = (18,)
    n_members: int = 20
    family: str = "trunc-logistic"
    # domain and covariate grid
    domain_km: float = 400.0
    grid_spacing_km: float = 10.0
    wbar_level: float = 4.5
    wbar_smooth_sd: float = 0.25
    wbar_smooth_range_km: float = 150.0
    wbar_rough_sd: float = 0.2
    wbar_rough_range_km: float = 20.0
    # station parameter fields (scaled added-dimension covariances)
    a_level: float = 0.1
    a_theta: Tuple[float, float, float] = (3e-5, 4e-3, 1e-2)
    b_level: float = 0.9
    b_theta: Tuple[float, float, float] = (3e-5, 4e-3, 1e-3)
    logxi_level: float = -0.02
    logxi_theta: Tuple[float, float, float] = (1e-6, 3e-4, 1e-3)
    # regional truth
    weights: str = "uniform"  # or "first": member 1 carries the signal
    c: float = 1.0
    d: float = 0.3
    # daily weather
    weather_sd: float = 0.35
    weather_ar: float = 0.7
    anomaly_sd: float = 0.2
    anomaly_range_km: float = 200.0
    spread_min: float = 0.05
    spread_max: float = 0.3
    # seasonal drift of a_s(t)
    drift_amplitude: float = 0.0
    drift_period_days: float = 365.0
    # missing data
    p_missing_obs: float = 0.02
    p_missing_forecast: float = 0.01

    def validate(self):
        if self.n_stations < 3 or self.n_days < 1 or self.n_members < 1:
            raise ParameterError("simulation needs >= 3 stations, >= 1 day and >= 1 member")
        Family.parse(self.family)
        if self.weights not in ("uniform", "first"):
            raise ParameterError(f"unknown weights mode {self.weights!r}")
        if self.c <= 0 or self.d < 0:
            raise ParameterError("truth requires c > 0 and d >= 0")
        if not (0 <= self.p_missing_obs < 1 and 0 <= self.p_missing_forecast < 1):
            raise ParameterError("missing-data probabilities must lie in [0, 1)")
        if self.grid_spacing_km <= 0 or self.domain_km <= 2 * self.grid_spacing_km:
            raise ParameterError("grid spacing must be positive and smaller than the domain")
        if self.spread_min < 0 or self.spread_max < self.spread_min:
            raise ParameterError("invalid ensemble spread range")


@dataclass
class Truth:
    """Ground truth behind a simulated dataset."""

    family: Family
    local: Dict[str, LocalParams]
    regional: RegionalParams
    mu: np.ndarray
    sigma2: np.ndarray
    a_daily: np.ndarray
    config: dict = field(default_factory=dict)

    def distribution(self, hour_index: int, date_index: int, station_index: int):
        return dist.PredictiveDistribution.make(
            self.family,
            self.mu[hour_index, date_index, station_index],
            self.sigma2[hour_index, date_index, station_index],
        )


@dataclass
class Simulation:
    dataset: ForecastDataset
    covariate: CovariateGrid
    truth: Truth


def _stationary_sample(xy, sd, range_km, kind, rng, jitter=1e-8):
    h = cdist(xy, xy)
    if kind == "gauss":
        cov = np.exp(-((h / range_km) ** 2))
    else:
        cov = np.exp(-h / range_km)
    cov = sd * sd * cov + jitter * np.eye(len(xy))
    return np.linalg.cholesky(cov) @ rng.standard_normal(len(xy))


def _covariate_grid(cfg: SimulationConfig, rng) -> CovariateGrid:
    n = int(round(cfg.domain_km / cfg.grid_spacing_km)) + 1
    xs = cfg.grid_spacing_km * np.arange(n)
    gx, gy = np.meshgrid(xs, xs)
    xy = np.column_stack([gx.ravel(), gy.ravel()])
    smooth = _stationary_sample(xy, cfg.wbar_smooth_sd, cfg.wbar_smooth_range_km, "gauss", rng, 1e-6)
    rough = _stationary_sample(xy, cfg.wbar_rough_sd, cfg.wbar_rough_range_km, "exp", rng)
    values = np.exp(math.log(cfg.wbar_level) + smooth + rough)
    return CovariateGrid(n, n, 0.0, 0.0, cfg.grid_spacing_km, cfg.grid_spacing_km, values)


def simulate(config: Optional[SimulationConfig] = None, seed: int = 0) -> Simulation:
    """Generate a reproducible synthetic dataset and its truth record."""
    cfg = config or SimulationConfig()
    cfg.validate()
    family = Family.parse(cfg.family)
    rng = np.random.default_rng(seed)

    grid = _covariate_grid(cfg, rng)
    margin = cfg.grid_spacing_km
    xy = rng.uniform(margin, cfg.domain_km - margin, size=(cfg.n_stations, 2))
    wbar = bilinear(grid, xy[:, 0], xy[:, 1])
    ids = [f"S{i:04d}" for i in range(cfg.n_stations)]
    stations = [Site(ids[i], float(xy[i, 0]), float(xy[i, 1]), float(wbar[i])) for i in range(len(ids))]

    def field_d(theta):
        return simulate_intrinsic(CovarianceModel(CovKind.D, theta), xy, wbar, rng)[0]

    a = cfg.a_level * wbar + field_d(cfg.a_theta)
    b = np.maximum(cfg.b_level + field_d(cfg.b_theta) / wbar, 0.05)
    xi2 = np.exp(2.0 * (cfg.logxi_level * wbar + field_d(cfg.logxi_theta)))
    if family is Family.GAMMA:
        a = np.maximum(a, 0.05)

    m = cfg.n_members
    if cfg.weights == "uniform":
        w_true = np.full(m, 1.0 / m)
    else:
        w_true = np.zeros(m)
        w_true[0] = 1.0
    regional = RegionalParams(w_true, cfg.c, cfg.d)
    local = {ids[i]: LocalParams(ids[i], float(a[i]), float(b[i]), float(xi2[i])) for i in range(len(ids))}

    n_h, n_d, n_s = len(cfg.hours), cfg.n_days, cfg.n_stations
    start = np.datetime64(dt.date.fromisoformat(cfg.start_date), "D")
    dates = start + np.arange(n_d)

    h = cdist(xy, xy)
    anomaly_chol = np.linalg.cholesky(
        cfg.anomaly_sd**2 * np.exp(-((h / cfg.anomaly_range_km) ** 2)) + 1e-6 * np.eye(n_s)
    )
    phases = rng.uniform(0.0, 2.0 * math.pi, n_s)

    forecasts = np.empty((n_h, n_d, n_s, m))
    observations = np.empty((n_h, n_d, n_s))
    mu_true = np.empty((n_h, n_d, n_s))
    s2_true = np.empty((n_h, n_d, n_s))
    a_daily = np.empty((n_d, n_s))
    level = 0.0
    innov = math.sqrt(1.0 - cfg.weather_ar**2)
    for di in range(n_d):
        level = cfg.weather_ar * level + innov * rng.standard_normal()
        a_daily[di] = a + cfg.drift_amplitude * np.sin(2.0 * math.pi * di / cfg.drift_period_days + phases)
        for hi in range(n_h):
            anomaly = anomaly_chol @ rng.standard_normal(n_s)
            weather = np.exp(cfg.weather_sd * level + anomaly - 0.5 * (cfg.weather_sd**2 + cfg.anomaly_sd**2))
            signal = wbar * weather
            spread = rng.uniform(cfg.spread_min, cfg.spread_max, n_s)
            eps = rng.standard_normal((n_s, m))
            f = signal[:, None] * np.exp(spread[:, None] * eps - 0.5 * spread[:, None] ** 2)
            if cfg.weights == "first":
                f[:, 0] = signal
                noise = rng.standard_normal((n_s, m - 1))
                f[:, 1:] = signal[:, None] * np.exp(0.6 * noise - 0.18)
            f = np.round(f, _DECIMALS)
            mu = a_daily[di] + b * (f @ w_true)
            if family is Family.GAMMA:
                mu = np.maximum(mu, 0.05)
            s2 = cfg.c * xi2 + cfg.d * f.var(axis=1)
            u = rng.uniform(1e-12, 1.0 - 1e-12, n_s)
            y = np.round(dist.quantile_array(family, mu, s2, u), _DECIMALS)
            forecasts[hi, di] = f
            observations[hi, di] = y
            mu_true[hi, di] = mu
            s2_true[hi, di] = s2

    miss_obs = rng.random(observations.shape) < cfg.p_missing_obs
    miss_fc = rng.random(observations.shape) < cfg.p_missing_forecast
    observations[miss_obs] = np.nan
    forecasts[miss_fc] = np.nan

    ds = ForecastDataset(stations, dates, tuple(cfg.hours), forecasts, observations)
    truth = Truth(family, local, regional, mu_true, s2_true, a_daily, asdict(cfg))
    return Simulation(ds, grid, truth)
