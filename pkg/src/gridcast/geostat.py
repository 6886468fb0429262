"""Intrinsic kriging of predictive-distribution parameters.

Four generalized covariance models are available (``h`` is the planar
distance in km, ``w`` the annual-mean wind speed covariate and ``1{s=t}``
the nugget indicator, which is one only for identical site records):

a. ``-t1*h + t2*1{s=t}`` (Brownian surface plus nugget)
b. ``-t1*h**t3 + t2*1{s=t}`` with ``0 < t3 < 2`` (fractional Brownian)
c. ``-t1*w_s*w_t*h + t2*1{s=t}`` (locally scaled Brownian)
d. ``-w_s*w_t*(t1*h + t2*|w_s - w_t|) + t3*1{s=t}`` (scaled, added dimension)

Kinds a and b are conditionally positive definite with respect to the
constants, kinds c and d with respect to span{w}.  Kriging weights satisfy
the matching unbiasedness constraints, and covariance parameters are
estimated by restricted maximum likelihood on contrasts orthogonal to the
drift space.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy import linalg, special
from scipy.spatial import cKDTree
from scipy.spatial.distance import cdist

from .errors import DegenerateDataError, EstimationError, ParameterError, SingularSystemError
from .optimizer import Bounds, minimize_bounded

#: Sites closer than this (km) are merged before kriging.
DUPLICATE_DISTANCE = 1e-9
#: Kriged means below this are clamped.
MU_FLOOR = 1e-6


@dataclass(frozen=True)
class Site:
    id: str
    x: float
    y: float
    wbar: float = 1.0

    def __post_init__(self):
        if not (math.isfinite(self.x) and math.isfinite(self.y)):
            raise ParameterError(f"site {self.id!r} has non-finite coordinates")
        if not (math.isfinite(self.wbar) and self.wbar > 0):
            raise ParameterError(f"site {self.id!r} needs a positive annual mean wind speed")


class CovKind(str, enum.Enum):
    A = "a"
    B = "b"
    C = "c"
    D = "d"

    @property
    def n_params(self) -> int:
        return 3 if self in (CovKind.B, CovKind.D) else 2

    @property
    def nugget_index(self) -> int:
        return 2 if self is CovKind.D else 1

    @property
    def scaled(self) -> bool:
        """Whether the drift space is span{w} rather than the constants."""
        return self in (CovKind.C, CovKind.D)


@dataclass(frozen=True)
class CovarianceModel:
    kind: CovKind
    theta: Tuple[float, ...]

    def __post_init__(self):
        kind = CovKind(self.kind)
        theta = tuple(float(t) for t in self.theta)
        object.__setattr__(self, "kind", kind)
        object.__setattr__(self, "theta", theta)
        if len(theta) != kind.n_params:
            raise ParameterError(f"kind {kind.value} takes {kind.n_params} parameters, got {len(theta)}")
        if any(not math.isfinite(t) or t < 0 for t in theta):
            raise ParameterError(f"covariance parameters must be finite and nonnegative: {theta}")
        if kind is CovKind.B and not 0.0 < theta[2] < 2.0:
            raise ParameterError("fractional Brownian exponent must lie in (0, 2)")

    @property
    def nugget(self) -> float:
        return self.theta[self.kind.nugget_index]


def _coords(sites: Sequence[Site]):
    xy = np.array([[s.x, s.y] for s in sites], dtype=float).reshape(-1, 2)
    w = np.array([s.wbar for s in sites], dtype=float)
    return xy, w


def drift_matrix(kind: CovKind, w) -> np.ndarray:
    w = np.asarray(w, dtype=float)
    if CovKind(kind).scaled:
        return w[:, None]
    return np.ones((w.size, 1))


def _smooth_part(model: CovarianceModel, h, w1, w2):
    """Covariance without the nugget term for distance matrix ``h``."""
    t = model.theta
    kind = model.kind
    if kind is CovKind.A:
        return -t[0] * h
    if kind is CovKind.B:
        return -t[0] * h ** t[2]
    ww = np.multiply.outer(w1, w2)
    if kind is CovKind.C:
        return -t[0] * ww * h
    dw = np.abs(np.subtract.outer(w1, w2))
    return -ww * (t[0] * h + t[1] * dw)


def gen_cov(model: CovarianceModel, s: Site, t: Site) -> float:
    """Generalized covariance between two sites."""
    h = math.hypot(s.x - t.x, s.y - t.y)
    value = float(_smooth_part(model, np.array(h), np.array(s.wbar), np.array(t.wbar)))
    if s == t:
        value += model.nugget
    return value


def cov_matrix(model: CovarianceModel, xy, w) -> np.ndarray:
    """Data-data covariance matrix; the nugget sits on the diagonal."""
    xy = np.asarray(xy, dtype=float)
    h = cdist(xy, xy)
    k = _smooth_part(model, h, np.asarray(w, dtype=float), np.asarray(w, dtype=float))
    k[np.diag_indices_from(k)] += model.nugget
    return k


def cross_cov(model: CovarianceModel, xy_a, w_a, xy_b, w_b) -> np.ndarray:
    """Covariance between two distinct site sets (no nugget)."""
    h = cdist(np.asarray(xy_a, dtype=float), np.asarray(xy_b, dtype=float))
    return _smooth_part(model, h, np.asarray(w_a, dtype=float), np.asarray(w_b, dtype=float))


@dataclass
class KrigingField:
    """Values of one predictive parameter (``mu`` or ``logsigma``) at sites."""

    target: str
    sites: List[Site]
    values: np.ndarray
    model: Optional[CovarianceModel] = None

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float).ravel()
        if len(self.sites) != self.values.size:
            raise ValueError("one value per site is required")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("field values must be finite")

    def with_model(self, model: CovarianceModel) -> "KrigingField":
        return KrigingField(self.target, list(self.sites), self.values.copy(), model)


def merge_duplicates(xy, w, z, ids=None, tol=DUPLICATE_DISTANCE):
    """Average sites closer than ``tol``; returns merged arrays and kept ids."""
    xy, w, z = np.asarray(xy, float), np.asarray(w, float), np.asarray(z, float)
    n = len(z)
    ids = list(ids) if ids is not None else [str(i) for i in range(n)]
    pairs = cKDTree(xy).query_pairs(tol) if n > 1 else set()
    if not pairs:
        return xy, w, z, ids
    parent = list(range(n))

    def find(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    for i, j in pairs:
        ri, rj = find(i), find(j)
        if ri != rj:
            parent[max(ri, rj)] = min(ri, rj)
    roots = sorted({find(i) for i in range(n)})
    groups = {r: [i for i in range(n) if find(i) == r] for r in roots}
    xy_m = np.array([xy[groups[r]].mean(axis=0) for r in roots])
    w_m = np.array([w[groups[r]].mean() for r in roots])
    z_m = np.array([z[groups[r]].mean() for r in roots])
    return xy_m, w_m, z_m, [ids[r] for r in roots]


# ---------------------------------------------------------------------------
# REML
# ---------------------------------------------------------------------------


def contrast_basis(F) -> np.ndarray:
    """Orthonormal basis of the null space of ``F.T`` (generalized increments)."""
    q, r, _ = linalg.qr(F, pivoting=True)
    diag = np.abs(np.diag(r))
    rank = int(np.sum(diag > diag.max() * 1e-12)) if diag.size else 0
    return q[:, rank:]


class _RemlProblem:
    """Negative restricted log-likelihood over transformed parameters.

    Parameters are ``log(theta)``, except the exponent of kind b, which uses
    ``logit(theta3 / 2)``.
    """

    def __init__(self, kind: CovKind, xy, w, z):
        self.kind = CovKind(kind)
        self.h = cdist(xy, xy)
        self.w = w
        F = drift_matrix(self.kind, w)
        self.A = contrast_basis(F)
        self.u = self.A.T @ z
        self.n_contrasts = self.u.size
        n = z.size
        eye = np.eye(n)
        ww = np.multiply.outer(w, w)
        if self.kind is CovKind.A:
            self.K = [-self.h, eye]
        elif self.kind is CovKind.C:
            self.K = [-ww * self.h, eye]
        elif self.kind is CovKind.D:
            self.K = [-ww * self.h, -ww * np.abs(np.subtract.outer(w, w)), eye]
        else:
            self.K = None
        if self.K is not None:
            self.G = [self.A.T @ k @ self.A for k in self.K]
        else:
            self.G_nug = self.A.T @ self.A
            pos = self.h > 0
            self.log_h = np.where(pos, np.log(np.where(pos, self.h, 1.0)), 0.0)

    def theta(self, eta):
        eta = np.asarray(eta, dtype=float)
        if self.kind is CovKind.B:
            return np.array([math.exp(eta[0]), math.exp(eta[1]), 2.0 * special.expit(eta[2])])
        return np.exp(eta)

    def eta(self, theta):
        theta = np.asarray(theta, dtype=float)
        out = np.log(np.maximum(theta, 1e-300))
        if self.kind is CovKind.B:
            out[2] = special.logit(theta[2] / 2.0)
        return out

    def _components(self, theta):
        """Contrast covariance Sigma and its derivatives w.r.t. theta."""
        if self.K is not None:
            sigma = sum(t * g for t, g in zip(theta, self.G))
            return sigma, self.G
        hp = self.h ** theta[2]
        g1 = self.A.T @ (-hp) @ self.A
        g3 = self.A.T @ (-theta[0] * hp * self.log_h) @ self.A
        sigma = theta[0] * g1 + theta[1] * self.G_nug
        return sigma, [g1, self.G_nug, g3]

    def value_and_grad(self, eta):
        theta = self.theta(eta)
        sigma, derivs = self._components(theta)
        try:
            chol = linalg.cho_factor(sigma, lower=True, check_finite=False)
        except linalg.LinAlgError:
            return np.inf, np.zeros_like(eta)
        alpha = linalg.cho_solve(chol, self.u, check_finite=False)
        logdet = 2.0 * np.sum(np.log(np.diag(chol[0])))
        value = 0.5 * logdet + 0.5 * float(self.u @ alpha)
        inv = linalg.cho_solve(chol, np.eye(sigma.shape[0]), check_finite=False)
        dtheta = np.array([0.5 * np.sum(inv * g) - 0.5 * float(alpha @ g @ alpha) for g in derivs])
        # chain rule to the transformed parameters
        jac = theta.copy()
        if self.kind is CovKind.B:
            jac[2] = theta[2] * (1.0 - theta[2] / 2.0)
        return value, dtheta * jac

    def initial_theta(self):
        scale = float(self.u @ self.u) / self.n_contrasts
        if self.K is not None:
            traces = [np.trace(g) / self.n_contrasts for g in self.G]
        else:
            traces = [np.trace(self.A.T @ (-self.h) @ self.A) / self.n_contrasts, 1.0]
        share = scale / len(traces)
        theta = [share / tr if tr > 1e-12 else share for tr in traces]
        if self.kind is CovKind.B:
            theta.append(1.0)
        return np.array(theta), scale


def neg_restricted_loglik(kind, theta, sites: Sequence[Site], values) -> float:
    """Negative restricted log-likelihood (up to a constant) at ``theta``."""
    xy, w = _coords(sites)
    prob = _RemlProblem(kind, xy, w, np.asarray(values, dtype=float))
    return prob.value_and_grad(prob.eta(theta))[0]


def reml_fit(field: KrigingField, kind=None, theta0=None, tol: float = 1e-6) -> CovarianceModel:
    """Estimate covariance parameters by restricted maximum likelihood.

    ``kind`` defaults to the kind of ``field.model``.
    """
    if kind is None:
        if field.model is None:
            raise ValueError("covariance kind required")
        kind = field.model.kind
    kind = CovKind(kind)
    xy, w = _coords(field.sites)
    xy, w, z, _ = merge_duplicates(xy, w, field.values)
    if z.size < 3:
        raise EstimationError(f"REML needs at least 3 distinct sites, got {z.size}")
    prob = _RemlProblem(kind, xy, w, z)
    if prob.n_contrasts < 2:
        raise EstimationError("too few generalized increments to estimate the covariance")
    unorm = float(np.linalg.norm(prob.u))
    if unorm <= 1e-10 * (float(np.linalg.norm(z)) + 1e-300):
        raise DegenerateDataError(
            "data lie in the drift space: all generalized increments vanish"
        )
    init, scale = prob.initial_theta()
    if theta0 is not None:
        init = np.asarray(theta0, dtype=float)
    eta0 = prob.eta(init)
    span = 25.0
    log_scale = math.log(scale)
    lo = np.full(kind.n_params, log_scale - span)
    hi = np.full(kind.n_params, log_scale + span)
    # the distance-slope parameters live on a per-km scale
    if kind is CovKind.B:
        lo[2], hi[2] = -12.0, 12.0
    eta0 = np.clip(eta0, lo, hi)
    res = minimize_bounded(prob.value_and_grad, eta0, Bounds(lo, hi), tol=tol, grad="joint")
    if not np.isfinite(res.f_opt) or (not res.converged and res.pg_norm > 1e-3 * prob.n_contrasts):
        raise EstimationError(
            f"REML optimization did not converge ({res.message}, pg={res.pg_norm:.3g})"
        )
    return CovarianceModel(kind, tuple(prob.theta(res.x_opt)))


# ---------------------------------------------------------------------------
# Kriging
# ---------------------------------------------------------------------------


class Kriger:
    """Factorized intrinsic-kriging system for one field.

    The factorization is computed once; ``predict`` can then be called for
    any number of targets.
    """

    def __init__(self, field: KrigingField, model: Optional[CovarianceModel] = None):
        model = model or field.model
        if model is None:
            raise ValueError("kriging needs a covariance model")
        self.model = model
        self.records = {s: i for i, s in enumerate(field.sites)}
        xy, w = _coords(field.sites)
        ids = list(range(len(field.sites)))
        self.xy, self.w, self.z, kept = merge_duplicates(xy, w, field.values, ids)
        self.merged = len(kept) != len(ids)
        # record -> merged index, only meaningful for records that survived unmerged
        self._record_index = {}
        if not self.merged:
            self._record_index = {s: i for s, i in self.records.items()}
        self.F = drift_matrix(model.kind, self.w)
        n, p = self.F.shape
        if n <= p - 1:
            raise SingularSystemError("not enough sites for the drift constraints")
        K = cov_matrix(model, self.xy, self.w)
        M = np.zeros((n + p, n + p))
        M[:n, :n] = K
        M[:n, n:] = self.F
        M[n:, :n] = self.F.T
        lu, piv = linalg.lu_factor(M, check_finite=False)
        diag = np.abs(np.diag(lu))
        if not np.all(np.isfinite(diag)) or diag.min() <= 1e-13 * max(diag.max(), 1.0):
            raise SingularSystemError(self._singular_message())
        self._lu = (lu, piv)
        self.n = n

    def _singular_message(self):
        if self.xy.shape[0] < 2:
            return "singular kriging system"
        d, idx = cKDTree(self.xy).query(self.xy, k=2)
        i = int(np.argmin(d[:, 1]))
        j = int(idx[i, 1])
        return (
            f"singular kriging system; closest sites are #{i} and #{j} "
            f"({d[i, 1]:.3g} km apart)"
        )

    def predict(self, targets: Sequence[Site]):
        """Kriged values and kriging variances at ``targets``."""
        xy_t, w_t = _coords(targets)
        k0 = cross_cov(self.model, self.xy, self.w, xy_t, w_t)
        c00 = np.full(len(targets), self.model.nugget)
        for j, t in enumerate(targets):
            i = self._record_index.get(t)
            if i is not None:
                k0[i, j] += self.model.nugget
        f0 = drift_matrix(self.model.kind, w_t).T
        rhs = np.vstack([k0, f0])
        sol = linalg.lu_solve(self._lu, rhs, check_finite=False)
        lam = sol[: self.n]
        nu = sol[self.n :]
        pred = lam.T @ self.z
        var = c00 - np.sum(lam * k0, axis=0) - np.sum(nu * f0, axis=0)
        return pred, np.maximum(var, 0.0)


def krige(field: KrigingField, target: Site, model: Optional[CovarianceModel] = None):
    """Kriged value and kriging variance at a single target."""
    pred, var = Kriger(field, model).predict([target])
    return float(pred[0]), float(var[0])


@dataclass(frozen=True)
class GriddedPrediction:
    location: Site
    mu_hat: float
    krig_var_mu: float
    sigma_hat2: float
    sigma_tilde2: float
    clamped: bool = False


def grid_predictive_arrays(mu_field: KrigingField, logsigma_field: KrigingField, targets):
    """Array form of :func:`grid_predictive`.

    Returns a dict with ``mu_hat``, ``krig_var_mu``, ``sigma_hat2``,
    ``sigma_tilde2`` and the boolean ``clamped`` mask.
    """
    mu_hat, krig_var = Kriger(mu_field).predict(targets)
    log_sigma, _ = Kriger(logsigma_field).predict(targets)
    clamped = mu_hat < MU_FLOOR
    mu_hat = np.where(clamped, MU_FLOOR, mu_hat)
    sigma_hat2 = np.exp(2.0 * log_sigma)
    return {
        "mu_hat": mu_hat,
        "krig_var_mu": krig_var,
        "sigma_hat2": sigma_hat2,
        "sigma_tilde2": sigma_hat2 + krig_var,
        "clamped": clamped,
    }


def grid_predictive(mu_field: KrigingField, logsigma_field: KrigingField, targets) -> List[GriddedPrediction]:
    """Interpolated predictive parameters with kriging-variance inflation."""
    out = grid_predictive_arrays(mu_field, logsigma_field, targets)
    return [
        GriddedPrediction(
            t,
            float(out["mu_hat"][i]),
            float(out["krig_var_mu"][i]),
            float(out["sigma_hat2"][i]),
            float(out["sigma_tilde2"][i]),
            bool(out["clamped"][i]),
        )
        for i, t in enumerate(targets)
    ]


# ---------------------------------------------------------------------------
# Simulation
# ---------------------------------------------------------------------------


def simulate_intrinsic(model: CovarianceModel, xy, w, rng: np.random.Generator, size: int = 1):
    """Draw realizations of the intrinsic field at the given sites.

    Values are generated as increments relative to an anchor site, which is
    a valid realization up to an element of the drift space.

    Returns an array of shape (size, n).
    """
    xy = np.asarray(xy, dtype=float)
    w = np.asarray(w, dtype=float)
    n = w.size
    K = cov_matrix(model, xy, w)
    F = drift_matrix(model.kind, w)
    anchor = int(np.argmin(np.sum((xy - xy.mean(axis=0)) ** 2, axis=1)))
    # B z removes the drift interpolating z at the anchor; rows of B are increments
    B = np.eye(n) - F @ np.linalg.solve(F[[anchor]], np.eye(n)[[anchor]])
    C = B @ K @ B.T
    C = 0.5 * (C + C.T)
    vals, vecs = np.linalg.eigh(C)
    root = vecs * np.sqrt(np.clip(vals, 0.0, None))
    return rng.standard_normal((size, n)) @ root.T
