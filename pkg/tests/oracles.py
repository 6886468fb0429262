"""Independent reference computations used by the tests.

CDFs are written directly in terms of scipy.special so they share no code
with the closed-form CRPS kernels under test.
"""

import math

import numpy as np
from scipy import integrate, special


def tn_cdf(mu, sigma2, t):
    if t <= 0:
        return 0.0
    s = math.sqrt(sigma2)
    # survival ratio in log space, valid far into the truncated tail
    log_sf = special.log_ndtr((mu - t) / s) - special.log_ndtr(mu / s)
    return -math.expm1(min(log_sf, 0.0))


def tl_cdf(mu, sigma2, t):
    if t <= 0:
        return 0.0
    scale = math.sqrt(3.0 * sigma2) / math.pi
    log_sf = special.log_expit((mu - t) / scale) - special.log_expit(mu / scale)
    return -math.expm1(min(log_sf, 0.0))


def gamma_cdf(mu, sigma2, t):
    if t <= 0:
        return 0.0
    return special.gammainc(mu * mu / sigma2, t * mu / sigma2)


CDFS = {"trunc-normal": tn_cdf, "gamma": gamma_cdf, "trunc-logistic": tl_cdf}


def crps_quadrature(family, mu, sigma2, y):
    """Adaptive quadrature of the CRPS integral, split at y and around mu."""
    F = CDFS[family]
    sd = math.sqrt(sigma2)
    opts = dict(epsabs=1e-13, epsrel=1e-11, limit=500)
    lower = 0.0
    if y > 0:
        pts = [p for p in (mu - 5 * sd, mu, mu + 5 * sd) if 0 < p < y]
        lower = integrate.quad(lambda t: F(mu, sigma2, t) ** 2, 0.0, y, points=pts or None, **opts)[0]
    cut = max(y, mu) + 60.0 * sd
    pts = [p for p in (mu - 5 * sd, mu, mu + 5 * sd) if y < p < cut]
    upper = integrate.quad(lambda t: (1.0 - F(mu, sigma2, t)) ** 2, y, cut, points=pts or None, **opts)[0]
    upper += integrate.quad(lambda t: (1.0 - F(mu, sigma2, t)) ** 2, cut, np.inf, **opts)[0]
    return lower + upper


def crps_monte_carlo_gamma(shape, rate, y, n, rng):
    """Kernel-form estimate E|X - y| - E|X - X'| / 2 and its standard error."""
    x = rng.gamma(shape, 1.0 / rate, size=n)
    xp = rng.gamma(shape, 1.0 / rate, size=n)
    terms = np.abs(x - y) - 0.5 * np.abs(x - xp)
    return float(terms.mean()), float(terms.std(ddof=1) / math.sqrt(n))
