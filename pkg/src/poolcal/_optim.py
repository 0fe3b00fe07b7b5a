"""Small dense maximizers shared by the fitting routines.

Both routines maximize a smooth objective given a callable returning
(value, gradient).  They never raise on non-convergence; callers inspect
the returned status instead.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

ARMIJO_C1 = 1e-4
MAX_BACKTRACKS = 60


@dataclass
class MaximizeResult:
    x: np.ndarray
    value: float
    gradient: np.ndarray
    converged: bool
    iterations: int

    @property
    def gradient_norm(self) -> float:
        return float(np.max(np.abs(self.gradient))) if self.gradient.size else 0.0


def _backtrack(value_and_grad, x, f, g, direction):
    """Armijo backtracking along an ascent direction; returns None on failure."""
    slope = float(g @ direction)
    t = 1.0
    for _ in range(MAX_BACKTRACKS):
        candidate = x + t * direction
        f_new, g_new = value_and_grad(candidate)
        if np.isfinite(f_new) and f_new >= f + ARMIJO_C1 * t * slope:
            return candidate, f_new, g_new
        t *= 0.5
    return None


def maximize_bfgs(
    value_and_grad,
    x0,
    *,
    gtol: float = 1e-8,
    max_iterations: int = 200,
    coefficient_bound: float = 50.0,
) -> MaximizeResult:
    """BFGS quasi-Newton ascent with Armijo backtracking line search."""
    x = np.asarray(x0, dtype=float).copy()
    n = x.size
    f, g = value_and_grad(x)
    if not np.isfinite(f):
        raise ValueError("objective is not finite at the starting point")
    hinv = np.eye(n)

    iterations = 0
    for iterations in range(1, max_iterations + 1):
        if np.max(np.abs(g)) <= gtol:
            return MaximizeResult(x, f, g, True, iterations - 1)
        direction = hinv @ g
        if float(g @ direction) <= 0.0:
            hinv = np.eye(n)
            direction = g.copy()
        step = _backtrack(value_and_grad, x, f, g, direction)
        if step is None:
            return MaximizeResult(x, f, g, bool(np.max(np.abs(g)) <= gtol), iterations)
        x_new, f_new, g_new = step
        s = x_new - x
        y = g - g_new  # gradient change of the negated objective
        sy = float(s @ y)
        if sy > 1e-12 * np.linalg.norm(s) * np.linalg.norm(y):
            rho = 1.0 / sy
            hy = hinv @ y
            hinv = (
                hinv
                + np.outer(s, s) * (rho + rho * rho * float(y @ hy))
                - rho * (np.outer(hy, s) + np.outer(s, hy))
            )
        x, f, g = x_new, f_new, g_new
        if np.max(np.abs(x)) > coefficient_bound:
            warnings.warn(
                "coefficient magnitude exceeded "
                f"{coefficient_bound:g}; stopping (possible separation)",
                stacklevel=2,
            )
            return MaximizeResult(x, f, g, False, iterations)
    converged = bool(np.max(np.abs(g)) <= gtol)
    return MaximizeResult(x, f, g, converged, max_iterations)


def maximize_newton(
    value_and_grad,
    hessian,
    x0,
    *,
    gtol: float = 1e-8,
    max_iterations: int = 100,
    coefficient_bound: float = 50.0,
) -> MaximizeResult:
    """Damped Newton ascent; falls back to gradient steps when the Hessian
    is singular or does not yield an ascent direction."""
    x = np.asarray(x0, dtype=float).copy()
    f, g = value_and_grad(x)
    if not np.isfinite(f):
        raise ValueError("objective is not finite at the starting point")

    iterations = 0
    for iterations in range(1, max_iterations + 1):
        if np.max(np.abs(g)) <= gtol:
            return MaximizeResult(x, f, g, True, iterations - 1)
        h = hessian(x)
        try:
            direction = np.linalg.solve(-h, g)
        except np.linalg.LinAlgError:
            direction = g.copy()
        if float(g @ direction) <= 0.0:
            direction = g.copy()
        step = _backtrack(value_and_grad, x, f, g, direction)
        if step is None:
            return MaximizeResult(x, f, g, bool(np.max(np.abs(g)) <= gtol), iterations)
        x, f, g = step
        if np.max(np.abs(x)) > coefficient_bound:
            warnings.warn(
                "coefficient magnitude exceeded "
                f"{coefficient_bound:g}; stopping (possible separation)",
                stacklevel=2,
            )
            return MaximizeResult(x, f, g, False, iterations)
    converged = bool(np.max(np.abs(g)) <= gtol)
    return MaximizeResult(x, f, g, converged, max_iterations)


def central_difference_jacobian(fun, x, *, relative_step: float = 1e-6) -> np.ndarray:
    """Central-difference Jacobian of a vector-valued function.

    Column k holds d fun / d x_k with step ``relative_step * max(1, |x_k|)``.
    """
    x = np.asarray(x, dtype=float)
    columns = []
    for k in range(x.size):
        h = relative_step * max(1.0, abs(x[k]))
        e = np.zeros_like(x)
        e[k] = h
        columns.append((np.asarray(fun(x + e)) - np.asarray(fun(x - e))) / (2.0 * h))
    return np.column_stack(columns) if columns else np.zeros((0, 0))
