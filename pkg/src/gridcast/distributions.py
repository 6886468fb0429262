"""Predictive distributions for nonnegative wind speed.

Three families are supported, all parametrized by a location ``mu`` and a
variance ``sigma2``:

* ``trunc-normal``: normal N(mu, sigma2) truncated to [0, inf),
* ``gamma``: gamma distribution with mean ``mu`` and variance ``sigma2``
  (shape ``mu**2 / sigma2``, rate ``mu / sigma2``),
* ``trunc-logistic``: logistic distribution with mean ``mu`` and variance
  ``sigma2`` (scale ``sqrt(3 * sigma2) / pi``) truncated to [0, inf).

For the truncated families ``mu`` and ``sigma2`` refer to the distribution
*before* truncation.

The module has two layers.  The array kernels (``cdf_array``,
``crps_array``, ...) broadcast over numpy arrays and perform no validation;
they are what the fitting code calls in its inner loops.  The record types
(``PredictiveDistribution`` and the per-family parameter classes) validate
their inputs and expose the scalar operations.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from typing import Union

import numpy as np
from scipy import special

from .errors import DomainError, ParameterError

#: Variances at or below this value are rejected as degenerate.
MIN_SIGMA2 = 1e-12

_SQRT_PI = math.sqrt(math.pi)
_SQRT2 = math.sqrt(2.0)
_LOG_SQRT_2PI = 0.5 * math.log(2.0 * math.pi)


class Family(str, enum.Enum):
    TRUNC_NORMAL = "trunc-normal"
    GAMMA = "gamma"
    TRUNC_LOGISTIC = "trunc-logistic"

    @classmethod
    def parse(cls, name: Union[str, "Family"]) -> "Family":
        """Accept the canonical names plus a few common aliases."""
        if isinstance(name, cls):
            return name
        key = str(name).strip().lower().replace("_", "-")
        aliases = {
            "tn": cls.TRUNC_NORMAL,
            "n0": cls.TRUNC_NORMAL,
            "truncnormal": cls.TRUNC_NORMAL,
            "trunc-normal": cls.TRUNC_NORMAL,
            "g": cls.GAMMA,
            "gamma": cls.GAMMA,
            "tl": cls.TRUNC_LOGISTIC,
            "l0": cls.TRUNC_LOGISTIC,
            "trunclogistic": cls.TRUNC_LOGISTIC,
            "trunc-logistic": cls.TRUNC_LOGISTIC,
        }
        try:
            return aliases[key]
        except KeyError:
            raise ValueError(f"unknown distribution family {name!r}") from None


# ---------------------------------------------------------------------------
# Array kernels
# ---------------------------------------------------------------------------


def logistic_scale(sigma2):
    """Scale of a logistic distribution with variance ``sigma2``."""
    return np.sqrt(3.0 * np.asarray(sigma2, dtype=float)) / np.pi


def logit(p):
    """log(p) - log(1 - p)."""
    p = np.asarray(p, dtype=float)
    return np.log(p) - np.log1p(-p)


def _tn_cdf(mu, sigma, t):
    # 1 - S(t)/S(0) with S the untruncated survival function, in log space.
    z = np.maximum(t, 0.0)
    val = -np.expm1(special.log_ndtr((mu - z) / sigma) - special.log_ndtr(mu / sigma))
    return np.where(t < 0.0, 0.0, val)


def _tl_cdf(mu, scale, t):
    z = np.maximum(t, 0.0)
    val = -np.expm1(special.log_expit((mu - z) / scale) - special.log_expit(mu / scale))
    return np.where(t < 0.0, 0.0, val)


def _gamma_cdf(mu, sigma2, t):
    shape = mu * mu / sigma2
    rate = mu / sigma2
    return special.gammainc(shape, rate * np.maximum(t, 0.0))


def cdf_array(family, mu, sigma2, t):
    """Vectorized CDF; zero below the origin for every family."""
    family = Family.parse(family)
    mu, sigma2, t = np.broadcast_arrays(
        np.asarray(mu, dtype=float), np.asarray(sigma2, dtype=float), np.asarray(t, dtype=float)
    )
    if family is Family.TRUNC_NORMAL:
        return _tn_cdf(mu, np.sqrt(sigma2), t)
    if family is Family.TRUNC_LOGISTIC:
        return _tl_cdf(mu, logistic_scale(sigma2), t)
    return _gamma_cdf(mu, sigma2, t)


def quantile_array(family, mu, sigma2, tau):
    """Vectorized quantile function for ``tau`` in (0, 1)."""
    family = Family.parse(family)
    mu = np.asarray(mu, dtype=float)
    sigma2 = np.asarray(sigma2, dtype=float)
    tau = np.asarray(tau, dtype=float)
    if family is Family.TRUNC_NORMAL:
        sigma = np.sqrt(sigma2)
        # upper-tail mass (1 - tau) * Phi(mu / sigma) avoids cancellation
        upper = (1.0 - tau) * special.ndtr(mu / sigma)
        return np.maximum(mu - sigma * special.ndtri(upper), 0.0)
    if family is Family.TRUNC_LOGISTIC:
        scale = logistic_scale(sigma2)
        p0 = special.expit(-mu / scale)
        log_p = np.log(p0 + tau * (1.0 - p0))
        log_1mp = np.log1p(-tau) + special.log_expit(mu / scale)
        return np.maximum(mu + scale * (log_p - log_1mp), 0.0)
    shape = mu * mu / sigma2
    rate = mu / sigma2
    return special.gammaincinv(shape, tau) / rate


def crps_tn_array(mu, sigma2, y):
    """Closed-form CRPS of the normal distribution truncated at zero.

    The textbook expression divides by ``Phi(mu/sigma)**2``; here every
    ratio is formed in log space so that strongly truncated cases
    (``mu << 0``) do not overflow.
    """
    sigma = np.sqrt(sigma2)
    r = mu / sigma
    z = (y - mu) / sigma
    log_p = special.log_ndtr(r)
    upper_ratio = np.exp(special.log_ndtr(-z) - log_p)
    pdf_ratio = np.exp(-0.5 * z * z - _LOG_SQRT_2PI - log_p)
    tail = np.exp(special.log_ndtr(_SQRT2 * r) - 2.0 * log_p) / _SQRT_PI
    return sigma * (z * (1.0 - 2.0 * upper_ratio) + 2.0 * pdf_ratio - tail)


def crps_gamma_array(mu, sigma2, y):
    """Closed-form CRPS of the gamma distribution in mean/variance form."""
    shape = mu * mu / sigma2
    rate = mu / sigma2
    by = rate * y
    f_a = special.gammainc(shape, by)
    f_a1 = special.gammainc(shape + 1.0, by)
    beta_term = np.exp(special.betaln(shape + 0.5, 0.5)) / np.pi
    return y * (2.0 * f_a - 1.0) - mu * (2.0 * f_a1 - 1.0) - mu * beta_term


def _tl_tail_term(q, p0, log_p0):
    """(-q - p0**2 * log(p0)) / q**2 with p0 = 1 - q; series for small q."""
    small = q < 1e-3
    qs = np.where(small, q, 0.0)
    series = -1.5 + qs * (1.0 / 3.0 + qs * (1.0 / 12.0 + qs / 30.0))
    ql = np.where(small, 1.0, q)
    direct = (-ql - p0 * p0 * log_p0) / (ql * ql)
    return np.where(small, series, direct)


def _log_neg_log_expit(x):
    """log(-log(expit(x))) without underflow for large x."""
    x = np.asarray(x, dtype=float)
    pos = x > 0
    u = np.exp(-np.where(pos, x, 0.0))
    with np.errstate(divide="ignore", invalid="ignore"):
        big = -x + np.log(np.where(u > 0, np.log1p(u) / np.where(u > 0, u, 1.0), 1.0))
        small = np.log(-special.log_expit(np.where(pos, -1.0, x)))
    return np.where(pos, big, small)


def crps_tl_array(mu, sigma2, y):
    """Closed-form CRPS of the logistic distribution truncated at zero.

    Written in terms of q = 1 - F(0) so that no term grows like 1/q when
    the location lies far below zero.
    """
    scale = logistic_scale(sigma2)
    x0 = mu / scale
    xy = (y - mu) / scale
    log_q = special.log_expit(x0)
    q = np.exp(log_q)
    # -2 log F(y) / q, evaluated in log space
    ratio = 2.0 * np.exp(_log_neg_log_expit(xy) - log_q)
    tail = _tl_tail_term(q, special.expit(-x0), special.log_expit(-x0))
    return scale * (xy + log_q + ratio + tail)


_CRPS_KERNELS = {
    Family.TRUNC_NORMAL: crps_tn_array,
    Family.GAMMA: crps_gamma_array,
    Family.TRUNC_LOGISTIC: crps_tl_array,
}


def crps_array(family, mu, sigma2, y):
    """Vectorized closed-form CRPS (no validation)."""
    kernel = _CRPS_KERNELS[Family.parse(family)]
    return kernel(np.asarray(mu, dtype=float), np.asarray(sigma2, dtype=float), np.asarray(y, dtype=float))


def crps_and_grad(family, mu, sigma2, y, rel_step=1e-6):
    """CRPS and its partial derivatives with respect to ``mu`` and ``sigma2``.

    Derivatives are elementwise central differences.  The ``sigma2`` step is
    taken in log space so it stays valid arbitrarily close to zero; the gamma
    family does the same for ``mu`` since it requires ``mu > 0``.

    Returns
    -------
    crps, dcrps_dmu, dcrps_dsigma2 : ndarray
    """
    family = Family.parse(family)
    kernel = _CRPS_KERNELS[family]
    mu = np.asarray(mu, dtype=float)
    sigma2 = np.asarray(sigma2, dtype=float)
    y = np.asarray(y, dtype=float)
    value = kernel(mu, sigma2, y)

    if family is Family.GAMMA:
        up, dn = mu * math.exp(rel_step), mu * math.exp(-rel_step)
        d_mu = (kernel(up, sigma2, y) - kernel(dn, sigma2, y)) / (up - dn)
    else:
        h = rel_step * (1.0 + np.abs(mu))
        d_mu = (kernel(mu + h, sigma2, y) - kernel(mu - h, sigma2, y)) / (2.0 * h)

    up, dn = sigma2 * math.exp(rel_step), sigma2 * math.exp(-rel_step)
    d_s2 = (kernel(mu, up, y) - kernel(mu, dn, y)) / (up - dn)
    return value, d_mu, d_s2


def crps_ensemble_array(members, y):
    """CRPS of empirical ensemble CDFs.

    Parameters
    ----------
    members : array_like, shape (..., m)
    y : array_like, shape (...)
    """
    f = np.sort(np.asarray(members, dtype=float), axis=-1)
    y = np.asarray(y, dtype=float)
    m = f.shape[-1]
    abs_err = np.mean(np.abs(f - y[..., None]), axis=-1)
    # sum_{i,j} |f_i - f_j| = 2 * sum_i (2i - m - 1) f_(i) for sorted members
    ranks = 2.0 * np.arange(1, m + 1) - m - 1.0
    spread = 2.0 * np.sum(ranks * f, axis=-1) / (2.0 * m * m)
    return abs_err - spread


# ---------------------------------------------------------------------------
# Parameter records
# ---------------------------------------------------------------------------


def _check_sigma2(sigma2):
    if not math.isfinite(sigma2) or sigma2 <= MIN_SIGMA2:
        raise ParameterError(f"sigma2 must be finite and > {MIN_SIGMA2:g}, got {sigma2!r}")


@dataclass(frozen=True)
class TruncNormalParams:
    mu: float
    sigma2: float

    def __post_init__(self):
        if not math.isfinite(self.mu):
            raise ParameterError(f"mu must be finite, got {self.mu!r}")
        _check_sigma2(self.sigma2)

    @property
    def sigma(self) -> float:
        return math.sqrt(self.sigma2)


@dataclass(frozen=True)
class GammaParams:
    mu: float
    sigma2: float

    def __post_init__(self):
        if not (math.isfinite(self.mu) and self.mu > 0.0):
            raise ParameterError(f"gamma mean must be finite and > 0, got {self.mu!r}")
        _check_sigma2(self.sigma2)

    @classmethod
    def from_shape_rate(cls, shape: float, rate: float) -> "GammaParams":
        if shape <= 0 or rate <= 0:
            raise ParameterError("gamma shape and rate must be positive")
        return cls(mu=shape / rate, sigma2=shape / rate**2)

    @property
    def shape(self) -> float:
        return self.mu**2 / self.sigma2

    @property
    def rate(self) -> float:
        return self.mu / self.sigma2


@dataclass(frozen=True)
class TruncLogisticParams:
    mu: float
    sigma2: float

    def __post_init__(self):
        if not math.isfinite(self.mu):
            raise ParameterError(f"mu must be finite, got {self.mu!r}")
        _check_sigma2(self.sigma2)

    @classmethod
    def from_scale(cls, mu: float, scale: float) -> "TruncLogisticParams":
        return cls(mu=mu, sigma2=(math.pi * scale) ** 2 / 3.0)

    @property
    def scale(self) -> float:
        return math.sqrt(3.0 * self.sigma2) / math.pi


_PARAM_TYPES = {
    Family.TRUNC_NORMAL: TruncNormalParams,
    Family.GAMMA: GammaParams,
    Family.TRUNC_LOGISTIC: TruncLogisticParams,
}

Params = Union[TruncNormalParams, GammaParams, TruncLogisticParams]


@dataclass(frozen=True)
class PredictiveDistribution:
    """A validated predictive distribution of one of the three families."""

    family: Family
    params: Params

    def __post_init__(self):
        family = Family.parse(self.family)
        object.__setattr__(self, "family", family)
        if not isinstance(self.params, _PARAM_TYPES[family]):
            raise ParameterError(
                f"{type(self.params).__name__} does not match family {family.value}"
            )

    @classmethod
    def make(cls, family, mu: float, sigma2: float) -> "PredictiveDistribution":
        family = Family.parse(family)
        return cls(family, _PARAM_TYPES[family](float(mu), float(sigma2)))

    @property
    def mu(self) -> float:
        return self.params.mu

    @property
    def sigma2(self) -> float:
        return self.params.sigma2

    def cdf(self, t: float) -> float:
        return cdf(self, t)

    def quantile(self, tau: float) -> float:
        return quantile(self, tau)

    def crps(self, y: float) -> float:
        return crps(self, y)


def _check_obs(y):
    if not math.isfinite(y) or y < 0.0:
        raise DomainError(f"observation must be a finite nonnegative wind speed, got {y!r}")


def cdf(d: PredictiveDistribution, t: float) -> float:
    if not math.isfinite(t):
        raise DomainError(f"cdf argument must be finite, got {t!r}")
    return float(cdf_array(d.family, d.mu, d.sigma2, t))


def quantile(d: PredictiveDistribution, tau: float) -> float:
    if not 0.0 < tau < 1.0:
        raise DomainError(f"quantile level must lie in (0, 1), got {tau!r}")
    return float(quantile_array(d.family, d.mu, d.sigma2, tau))


def crps_trunc_normal(p: TruncNormalParams, y: float) -> float:
    _check_obs(y)
    return float(crps_tn_array(p.mu, p.sigma2, y))


def crps_gamma(p: GammaParams, y: float) -> float:
    _check_obs(y)
    return float(crps_gamma_array(p.mu, p.sigma2, y))


def crps_trunc_logistic(p: TruncLogisticParams, y: float) -> float:
    _check_obs(y)
    return float(crps_tl_array(p.mu, p.sigma2, y))


def crps(d: PredictiveDistribution, y: float) -> float:
    """Closed-form CRPS of ``d`` at observation ``y``."""
    _check_obs(y)
    return float(crps_array(d.family, d.mu, d.sigma2, y))


def crps_ensemble(members, y: float) -> float:
    """CRPS of the empirical CDF of an ensemble."""
    f = np.asarray(members, dtype=float).ravel()
    if f.size == 0:
        raise DomainError("ensemble must have at least one member")
    if not np.all(np.isfinite(f)):
        raise DomainError("ensemble members must be finite")
    return float(crps_ensemble_array(f, y))
