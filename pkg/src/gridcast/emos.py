"""Two-step EMOS fitting and predictive-distribution construction.

Step one fits a simplified model at each station separately::

    mu_s = a_s + b_s * mean(f),   sigma_s^2 = xi_s^2

Step two keeps (a_s, b_s, xi_s^2) fixed, pools all stations and fits the
member weights and the variance coefficients of the full model::

    mu_s = a_s + b_s * sum_k w_k f_sk,   sigma_s^2 = c * xi_s^2 + d * S_s^2

Both steps minimize the mean closed-form CRPS of the chosen family.
"""

from __future__ import annotations

import datetime as dt
import logging
from dataclasses import dataclass, field
from typing import Dict, Mapping, Optional, Sequence

import numpy as np

from . import distributions as dist
from .distributions import Family, PredictiveDistribution
from .errors import FitError, ParameterError
from .optimizer import EPS, Bounds, minimize_bounded

log = logging.getLogger(__name__)

DEFAULT_WINDOW = 70
HOURS = (6, 12, 18)

# fits whose projected gradient stays above this are reported as failures
_LOOSE_PG = 1e-4


@dataclass(frozen=True)
class EnsembleForecast:
    station_id: str
    valid_date: dt.date
    hour: int
    members: np.ndarray

    def __post_init__(self):
        members = np.asarray(self.members, dtype=float).ravel()
        if members.size == 0 or not np.all(np.isfinite(members)) or np.any(members < 0):
            raise ParameterError("ensemble members must be finite and nonnegative")
        object.__setattr__(self, "members", members)

    @property
    def ens_mean(self) -> float:
        return float(self.members.mean())

    @property
    def ens_var(self) -> float:
        # population variance, divisor m
        return float(self.members.var())


@dataclass
class TrainingSet:
    """Forecast-observation pairs of one station and hour.

    ``n_requested`` is the number of calendar days in the rolling window;
    it is ``None`` for ad-hoc training sets, which disables the skip rule.
    """

    station_id: str
    members: np.ndarray
    obs: np.ndarray
    n_requested: Optional[int] = None

    def __post_init__(self):
        self.members = np.atleast_2d(np.asarray(self.members, dtype=float))
        self.obs = np.asarray(self.obs, dtype=float).ravel()
        if self.members.shape[0] != self.obs.size:
            raise ValueError("members and observations differ in length")

    def __len__(self):
        return self.obs.size

    @property
    def n_missing(self) -> int:
        if self.n_requested is None:
            return 0
        return self.n_requested - len(self)

    @property
    def too_sparse(self) -> bool:
        """True if more than one third of the requested pairs are missing."""
        if len(self) == 0:
            return True
        if self.n_requested is None:
            return False
        return 3 * self.n_missing > self.n_requested


@dataclass(frozen=True)
class LocalParams:
    station_id: str
    a: float
    b: float
    xi2: float


@dataclass(frozen=True)
class RegionalParams:
    weights: np.ndarray
    c: float
    d: float

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float).ravel()
        if w.size == 0 or np.any(w < 0) or abs(w.sum() - 1.0) > 1e-12:
            raise ParameterError("weights must be nonnegative and sum to one")
        if self.c < EPS * (1 - 1e-12) or self.d < 0:
            raise ParameterError("variance coefficients require c >= eps and d >= 0")
        object.__setattr__(self, "weights", w)

    @classmethod
    def simplified(cls, m: int) -> "RegionalParams":
        """Uniform weights, c = 1, d = 0: reproduces the per-station model."""
        return cls(np.full(m, 1.0 / m), 1.0, 0.0)


@dataclass
class EmosModel:
    family: Family
    hour: int
    training_window_days: int
    local: Dict[str, LocalParams]
    regional: RegionalParams
    diagnostics: dict = field(default_factory=dict)

    def predictive_params(self, station_ids: Sequence[str], members):
        """Vectorized (mu, sigma2) for rows of ``members`` (shape (n, m))."""
        members = np.atleast_2d(np.asarray(members, dtype=float))
        a = np.array([self.local[s].a for s in station_ids])
        b = np.array([self.local[s].b for s in station_ids])
        xi2 = np.array([self.local[s].xi2 for s in station_ids])
        return _full_model(a, b, xi2, members, self.regional.weights, self.regional.c, self.regional.d)


def _full_model(a, b, xi2, members, weights, c, d):
    mu = a + b * (members @ weights)
    sigma2 = c * xi2 + d * members.var(axis=-1)
    return mu, sigma2


def assemble_training(data, station, target_date, hour: int, td: int) -> TrainingSet:
    """Pairs from the ``td`` calendar days preceding ``target_date``.

    Days with a missing observation or an incomplete ensemble are dropped;
    days outside the dataset count as missing.
    """
    if td < 1:
        raise ValueError("training window must be at least one day")
    si = data.station_index(station)
    hi = data.hour_index(hour)
    target = np.datetime64(target_date, "D")
    window = target - np.arange(td, 0, -1)
    di = data.date_indices(window)
    di = di[di >= 0]
    f = data.forecasts[hi, di, si, :]
    y = data.observations[hi, di, si]
    keep = np.isfinite(y) & np.all(np.isfinite(f), axis=1)
    return TrainingSet(data.stations[si].id, f[keep], y[keep], n_requested=td)


def _initial_xi2(resid):
    v = float(np.var(resid)) if resid.size > 1 else 1.0
    return max(v, EPS)


def fit_local(pairs: TrainingSet, family, tol: float = 1e-8) -> Optional[LocalParams]:
    """CRPS-minimum fit of the simplified model at one station.

    Returns ``None`` (skip) when more than a third of the requested training
    pairs are missing.
    """
    family = Family.parse(family)
    if pairs.too_sparse:
        return None
    fbar = pairs.members.mean(axis=1)
    y = pairs.obs
    a_lo = EPS if family is Family.GAMMA else -np.inf
    bounds = Bounds(np.array([a_lo, 0.0, EPS]), np.array([np.inf, np.inf, np.inf]))
    x0 = np.array([EPS if family is Family.GAMMA else 0.0, 1.0, _initial_xi2(y - fbar)])

    def objective(x):
        a, b, xi2 = x
        mu = a + b * fbar
        s2 = np.full_like(mu, xi2)
        val, d_mu, d_s2 = dist.crps_and_grad(family, mu, s2, y)
        g = np.array([d_mu.mean(), (d_mu * fbar).mean(), d_s2.mean()])
        return val.mean(), g

    res = minimize_bounded(objective, x0, bounds, tol=tol, grad="joint")
    if not np.isfinite(res.f_opt) or (not res.converged and res.pg_norm > _LOOSE_PG):
        raise FitError(
            f"local fit failed at station {pairs.station_id}: {res.message}",
            best=res.x_opt,
            diagnostics={"pg_norm": res.pg_norm, "iterations": res.iterations},
        )
    a, b, xi2 = res.x_opt
    return LocalParams(pairs.station_id, float(a), float(b), float(xi2))


@dataclass
class PooledData:
    """Training pairs of all stations stacked for the regional step."""

    members: np.ndarray
    obs: np.ndarray
    a: np.ndarray
    b: np.ndarray
    xi2: np.ndarray

    @classmethod
    def build(cls, training: Sequence[TrainingSet], local: Mapping[str, LocalParams]):
        rows = [t for t in training if t.station_id in local and len(t) > 0]
        if not rows:
            raise FitError("no pooled training pairs for the regional fit")
        members = np.concatenate([t.members for t in rows])
        obs = np.concatenate([t.obs for t in rows])
        reps = [len(t) for t in rows]
        a = np.repeat([local[t.station_id].a for t in rows], reps)
        b = np.repeat([local[t.station_id].b for t in rows], reps)
        xi2 = np.repeat([local[t.station_id].xi2 for t in rows], reps)
        return cls(members, obs, a, b, xi2)

    def mean_crps(self, family, regional: RegionalParams) -> float:
        mu, s2 = _full_model(self.a, self.b, self.xi2, self.members, regional.weights, regional.c, regional.d)
        return float(dist.crps_array(family, mu, s2, self.obs).mean())


def fit_regional(
    training: Sequence[TrainingSet],
    local: Mapping[str, LocalParams],
    family,
    tol: float = 1e-8,
) -> RegionalParams:
    """Pooled CRPS-minimum fit of member weights and variance coefficients.

    The weight simplex is parametrized by nonnegative ``v`` with
    ``w = v / sum(v)``; the search starts from uniform weights, c = 1, d = 0.
    """
    family = Family.parse(family)
    pooled = PooledData.build(training, local)
    F = pooled.members
    m = F.shape[1]
    S2 = F.var(axis=1)
    y, a, b, xi2 = pooled.obs, pooled.a, pooled.b, pooled.xi2

    def objective(x):
        v = x[:m]
        vsum = v.sum()
        if vsum <= 0:
            return np.inf, np.zeros_like(x)
        w = v / vsum
        fw = F @ w
        mu = a + b * fw
        s2 = x[m] * xi2 + x[m + 1] * S2
        val, d_mu, d_s2 = dist.crps_and_grad(family, mu, s2, y)
        n = y.size
        g = np.empty_like(x)
        g[:m] = ((d_mu * b) @ (F - fw[:, None])) / (n * vsum)
        g[m] = (d_s2 * xi2).mean()
        g[m + 1] = (d_s2 * S2).mean()
        return val.mean(), g

    x0 = np.concatenate([np.full(m, 1.0 / m), [1.0, 0.0]])
    lower = np.concatenate([np.zeros(m), [EPS, 0.0]])
    bounds = Bounds(lower, np.full(m + 2, np.inf))
    res = minimize_bounded(objective, x0, bounds, tol=tol, grad="joint")
    if not np.isfinite(res.f_opt) or (not res.converged and res.pg_norm > _LOOSE_PG):
        raise FitError(
            f"regional fit failed: {res.message}",
            best=res.x_opt,
            diagnostics={"pg_norm": res.pg_norm, "iterations": res.iterations},
        )
    v = res.x_opt[:m]
    w = v / v.sum()
    w = w / w.sum()
    return RegionalParams(w, float(max(res.x_opt[m], EPS)), float(res.x_opt[m + 1]))


def predict(model: EmosModel, fc: EnsembleForecast) -> PredictiveDistribution:
    """Predictive distribution for one ensemble forecast at a fitted station."""
    if fc.station_id not in model.local:
        raise KeyError(f"station {fc.station_id!r} has no local parameters; interpolate instead")
    mu, s2 = model.predictive_params([fc.station_id], fc.members[None, :])
    return PredictiveDistribution.make(model.family, float(mu[0]), float(s2[0]))
