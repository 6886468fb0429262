"""Bound-constrained smooth minimization.

A thin contract layer over the L-BFGS-B implementation in scipy: history
size 10, iterates projected onto the box, convergence judged on the
infinity norm of the projected gradient.  The layer adds start-point
validation, central-difference gradients, recovery from non-finite
objective values and a record of accepted iterates.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from scipy import optimize

from .errors import InvalidStartError

#: Lower offset used to express strict inequalities such as c > 0.
EPS = 1e-8

DEFAULT_TOL = 1e-8
DEFAULT_MAX_ITER = 500
HISTORY = 10


@dataclass(frozen=True)
class Bounds:
    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        lo = np.asarray(self.lower, dtype=float).ravel()
        hi = np.asarray(self.upper, dtype=float).ravel()
        if lo.shape != hi.shape:
            raise ValueError("lower and upper bounds differ in length")
        if np.any(lo > hi) or np.any(np.isnan(lo)) or np.any(np.isnan(hi)):
            raise ValueError("bounds require lower <= upper componentwise")
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)

    @classmethod
    def unbounded(cls, n: int) -> "Bounds":
        return cls(np.full(n, -np.inf), np.full(n, np.inf))

    @classmethod
    def from_pairs(cls, pairs: Sequence[tuple]) -> "Bounds":
        lo = [-np.inf if p[0] is None else p[0] for p in pairs]
        hi = [np.inf if p[1] is None else p[1] for p in pairs]
        return cls(np.array(lo, dtype=float), np.array(hi, dtype=float))

    def __len__(self):
        return self.lower.size

    def project(self, x):
        return np.clip(x, self.lower, self.upper)

    def contains(self, x) -> bool:
        x = np.asarray(x, dtype=float)
        return bool(np.all(x >= self.lower) and np.all(x <= self.upper))

    def as_scipy(self):
        return [
            (None if math.isinf(lo) else lo, None if math.isinf(hi) else hi)
            for lo, hi in zip(self.lower, self.upper)
        ]


@dataclass
class OptimResult:
    x_opt: np.ndarray
    f_opt: float
    iterations: int
    converged: bool
    pg_norm: float
    message: str = ""
    n_evals: int = 0
    history: list = field(default_factory=list)


def projected_gradient(x, g, bounds: Bounds):
    """Gradient with components removed where a bound blocks descent."""
    pg = np.array(g, dtype=float)
    at_lower = (x <= bounds.lower) & (pg > 0)
    at_upper = (x >= bounds.upper) & (pg < 0)
    pg[at_lower | at_upper] = 0.0
    return pg


def fd_gradient(fun: Callable, x, bounds: Optional[Bounds] = None, rel_step=1e-6, f0=None):
    """Central-difference gradient with step ``rel_step * (1 + |x_i|)``.

    Near a bound the difference becomes one-sided so that ``fun`` is only
    evaluated at feasible points.
    """
    x = np.asarray(x, dtype=float)
    g = np.empty_like(x)
    lo = bounds.lower if bounds is not None else np.full(x.size, -np.inf)
    hi = bounds.upper if bounds is not None else np.full(x.size, np.inf)
    for i in range(x.size):
        h = rel_step * (1.0 + abs(x[i]))
        up = x.copy()
        dn = x.copy()
        up[i] = min(x[i] + h, hi[i])
        dn[i] = max(x[i] - h, lo[i])
        if up[i] == dn[i]:
            g[i] = 0.0
            continue
        if up[i] == x[i] or dn[i] == x[i]:
            base = fun(x) if f0 is None else f0
            f0 = base
            other = dn if up[i] == x[i] else up
            g[i] = (fun(other) - base) / (other[i] - x[i])
        else:
            g[i] = (fun(up) - fun(dn)) / (up[i] - dn[i])
    return g


def minimize_bounded(
    objective: Callable,
    x0,
    bounds: Optional[Bounds] = None,
    tol: float = DEFAULT_TOL,
    grad: Optional[Callable] = None,
    max_iter: int = DEFAULT_MAX_ITER,
    ftol: float = 1e-15,
    restarts: int = 3,
) -> OptimResult:
    """Minimize ``objective`` over a box.

    Parameters
    ----------
    objective : callable
        ``objective(x) -> float``; if ``grad`` is the string ``"joint"`` it
        must instead return ``(f, g)``.
    x0 : array_like
        Feasible starting point.
    bounds : Bounds, optional
        Box constraints; unbounded if omitted.
    tol : float
        Convergence threshold on the projected-gradient infinity norm.
    grad : callable or "joint", optional
        Analytic gradient.  Central differences are used when omitted.
    max_iter : int
        Iteration cap, shared by all restarts.
    restarts : int
        How often a run that stopped short of ``tol`` is restarted from the
        best point found.

    Raises
    ------
    InvalidStartError
        If ``x0`` is infeasible or the objective is not finite there.
    """
    x0 = np.asarray(x0, dtype=float).ravel().copy()
    bounds = bounds if bounds is not None else Bounds.unbounded(x0.size)
    if len(bounds) != x0.size:
        raise ValueError("bounds length does not match the parameter dimension")
    if not bounds.contains(x0):
        raise InvalidStartError("starting point violates the bounds")

    joint = grad == "joint"

    def evaluate(x):
        if joint:
            f, g = objective(x)
            return float(f), np.asarray(g, dtype=float)
        f = float(objective(x))
        if not math.isfinite(f):
            return f, np.zeros_like(x)
        if grad is None:
            g = fd_gradient(objective, x, bounds, f0=f)
        else:
            g = np.asarray(grad(x), dtype=float)
        return f, g

    f_start, g_start = evaluate(x0)
    if not math.isfinite(f_start) or not np.all(np.isfinite(g_start)):
        raise InvalidStartError(f"objective or gradient not finite at x0 (f={f_start!r})")

    best = {"x": x0.copy(), "f": f_start, "g": g_start}
    n_evals = [1]
    penalty = [abs(f_start) * 1e6 + 1e6]

    def wrapped(x):
        x = bounds.project(x)
        n_evals[0] += 1
        f, g = evaluate(x)
        if not math.isfinite(f) or not np.all(np.isfinite(g)):
            # a large finite value makes the line search backtrack
            return penalty[0], np.zeros_like(x)
        if f < best["f"]:
            best.update(x=x.copy(), f=f, g=g)
        return f, g

    history = [f_start]

    def callback(xk):
        history.append(best["f"])

    iterations = 0
    message = ""
    x_start = x0
    # a stalled line search is retried from the best point with fresh memory
    for _ in range(1 + restarts):
        res = optimize.minimize(
            wrapped,
            x_start,
            jac=True,
            method="L-BFGS-B",
            bounds=bounds.as_scipy(),
            callback=callback,
            options={
                "maxcor": HISTORY,
                "gtol": tol,
                "ftol": ftol,
                "maxiter": max(max_iter - iterations, 1),
                "maxls": 40,
            },
        )
        iterations += int(res.nit)
        message = str(res.message)
        pg = projected_gradient(best["x"], best["g"], bounds)
        if pg.size == 0 or np.max(np.abs(pg)) <= tol or iterations >= max_iter:
            break
        if np.array_equal(best["x"], x_start) and res.nit == 0:
            break
        x_start = best["x"].copy()

    x_best = best["x"]
    f_best = best["f"]
    pg = projected_gradient(x_best, best["g"], bounds)
    pg_norm = float(np.max(np.abs(pg))) if pg.size else 0.0
    return OptimResult(
        x_opt=x_best,
        f_opt=f_best,
        iterations=iterations,
        converged=pg_norm <= tol,
        pg_norm=pg_norm,
        message=message,
        n_evals=n_evals[0],
        history=history,
    )
