"""Limited-memory BFGS with a strong Wolfe line search.

Small, dependency-free and deterministic: every inner product is an
ordered numpy reduction, so repeated runs (and runs under different BLAS
thread counts) produce bitwise identical iterates.  The implementation
follows the classic two-loop recursion with history scaling by s.y/y.y,
and the bracket/zoom line search that enforces

    f(x+a d) <= f(x) + c1 a g.d      (sufficient decrease)
    |g(x+a d).d| <= c2 |g.d|         (curvature)
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

STATUS_CONVERGED = "converged"
STATUS_MAX_ITER = "max-iterations"
STATUS_LINE_SEARCH = "line-search-failure"


@dataclass
class MinimizeResult:
    x: np.ndarray
    loss: float
    grad: np.ndarray
    status: str
    iterations: int
    history: list = field(default_factory=list)  # (iteration, loss, grad norm, step)


def _dot(a, b) -> float:
    return float(np.sum(a * b))


def _interpolate(lo, hi):
    # Bisection is enough: cubic steps save few evaluations at these
    # problem sizes and complicate reproducibility arguments.
    return 0.5 * (lo + hi)


def _zoom(fun, x, d, f0, g0d, a_lo, a_hi, f_lo, c1, c2, max_zoom=25):
    """Shrink [a_lo, a_hi] until a strong Wolfe point appears."""
    f_best = None
    for _ in range(max_zoom):
        a = _interpolate(a_lo, a_hi)
        f_a, g_a = fun(x + a * d)
        gd = _dot(g_a, d)
        if f_a > f0 + c1 * a * g0d or f_a >= f_lo:
            a_hi = a
        else:
            if abs(gd) <= -c2 * g0d:
                return a, f_a, g_a
            if gd * (a_hi - a_lo) >= 0:
                a_hi = a_lo
            a_lo, f_lo = a, f_a
            f_best = (a, f_a, g_a)
        if abs(a_hi - a_lo) < 1e-16 * max(1.0, abs(a_lo)):
            break
    # No point satisfied the curvature condition; fall back to the best
    # sufficient-decrease point if one was seen.
    return f_best if f_best is not None else (None, None, None)


def wolfe_line_search(fun, x, f0, g0, d, c1=1e-4, c2=0.9, a_init=1.0, a_max=1e8, max_iter=25):
    """Strong Wolfe search along d.  Returns (alpha, f, g) or (None, None, None)."""
    g0d = _dot(g0, d)
    if g0d >= 0:
        return None, None, None
    a_prev, f_prev = 0.0, f0
    a = a_init
    for it in range(max_iter):
        f_a, g_a = fun(x + a * d)
        if not np.isfinite(f_a):
            # Step escaped the region where the loss is sane; back off.
            a = 0.5 * (a_prev + a)
            if a - a_prev < 1e-16:
                return None, None, None
            continue
        if f_a > f0 + c1 * a * g0d or (it > 0 and f_a >= f_prev):
            return _zoom(fun, x, d, f0, g0d, a_prev, a, f_prev, c1, c2)
        gd = _dot(g_a, d)
        if abs(gd) <= -c2 * g0d:
            return a, f_a, g_a
        if gd >= 0:
            return _zoom(fun, x, d, f0, g0d, a, a_prev, f_a, c1, c2)
        a_prev, f_prev = a, f_a
        a = min(2.0 * a, a_max)
    return None, None, None


def _two_loop(g, s_list, y_list, rho_list):
    q = g.copy()
    alphas = []
    for s, y, rho in zip(reversed(s_list), reversed(y_list), reversed(rho_list)):
        a = rho * _dot(s, q)
        alphas.append(a)
        q -= a * y
    if s_list:
        s, y = s_list[-1], y_list[-1]
        q *= _dot(s, y) / _dot(y, y)
    for (s, y, rho), a in zip(zip(s_list, y_list, rho_list), reversed(alphas)):
        b = rho * _dot(y, q)
        q += (a - b) * s
    return q


def minimize(fun, x0, max_iter=200, history_size=10, c1=1e-4, c2=0.9,
             grad_tol=1e-8, log=None) -> MinimizeResult:
    """Minimize fun(x) -> (loss, grad).  Returns the best iterate seen.

    A failed line search first wipes the curvature memory and retries
    with steepest descent; a second failure ends the run.  NaN loss at
    the starting point is an error.
    """
    x = np.asarray(x0, dtype=np.float64).copy()
    f, g = fun(x)
    if not np.isfinite(f):
        raise FloatingPointError(f"loss at the starting point is {f}")
    best_f, best_x, best_g = f, x.copy(), g.copy()
    s_list, y_list, rho_list = [], [], []
    status = STATUS_MAX_ITER
    records = []
    iteration = 0
    if log is not None:
        log(0, f, float(np.max(np.abs(g))), 0.0)
    for iteration in range(1, max_iter + 1):
        gnorm = float(np.max(np.abs(g)))
        if gnorm <= grad_tol:
            status = STATUS_CONVERGED
            iteration -= 1
            break
        d = -_two_loop(g, s_list, y_list, rho_list)
        if _dot(g, d) >= 0:
            s_list, y_list, rho_list = [], [], []
            d = -g
        a_init = 1.0 if s_list else min(1.0, 1.0 / max(gnorm, 1e-12))
        a, f_new, g_new = wolfe_line_search(fun, x, f, g, d, c1, c2, a_init=a_init)
        if a is None and s_list:
            s_list, y_list, rho_list = [], [], []
            d = -g
            a_init = min(1.0, 1.0 / max(gnorm, 1e-12))
            a, f_new, g_new = wolfe_line_search(fun, x, f, g, d, c1, c2, a_init=a_init)
        if a is None:
            status = STATUS_LINE_SEARCH
            iteration -= 1
            break
        s = a * d
        y = g_new - g
        sy = _dot(s, y)
        if sy > 1e-10 * np.sqrt(_dot(s, s)) * np.sqrt(_dot(y, y)):
            s_list.append(s)
            y_list.append(y)
            rho_list.append(1.0 / sy)
            if len(s_list) > history_size:
                s_list.pop(0)
                y_list.pop(0)
                rho_list.pop(0)
        x = x + s
        f, g = f_new, g_new
        if not np.isfinite(f):
            raise FloatingPointError(f"loss became {f} at iteration {iteration}")
        if f < best_f:
            best_f, best_x, best_g = f, x.copy(), g.copy()
        records.append((iteration, f, float(np.max(np.abs(g))), a))
        if log is not None:
            log(iteration, f, float(np.max(np.abs(g))), a)
    return MinimizeResult(best_x, best_f, best_g, status, iteration, records)
