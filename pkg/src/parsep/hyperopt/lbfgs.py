"""Box-constrained limited-memory BFGS.

Projected variant: the two-loop direction is restricted to variables that are
not pinned at a bound, and the backtracking Armijo search follows the
projected path ``P(x + a d)``.
"""
from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from typing import Callable

import numpy as np


@dataclass
class LBFGSResult:
    x: np.ndarray
    f: float
    grad: np.ndarray
    n_iter: int
    converged: bool
    trace: list[float] = field(default_factory=list)  # objective at each accepted iterate


def _two_loop(g: np.ndarray, pairs) -> np.ndarray:
    q = g.copy()
    alphas = []
    for s, y, rho in reversed(pairs):
        a = rho * (s @ q)
        alphas.append(a)
        q -= a * y
    if pairs:
        s, y, _ = pairs[-1]
        q *= (s @ y) / (y @ y)
    for (s, y, rho), a in zip(pairs, reversed(alphas)):
        b = rho * (y @ q)
        q += (a - b) * s
    return -q


def minimize(fun: Callable[[np.ndarray], tuple[float, np.ndarray]], x0: np.ndarray,
             lower: np.ndarray | None = None, upper: np.ndarray | None = None,
             memory: int = 10, max_iter: int = 200, gtol: float = 1e-9, ftol: float = 1e-14,
             c1: float = 1e-4, max_backtracks: int = 40) -> LBFGSResult:
    """Minimize ``fun`` (returning value and gradient) inside ``[lower, upper]``."""
    n = len(x0)
    lo = np.full(n, -np.inf) if lower is None else np.asarray(lower, dtype=np.float64)
    hi = np.full(n, np.inf) if upper is None else np.asarray(upper, dtype=np.float64)

    def proj(z):
        return np.minimum(np.maximum(z, lo), hi)

    x = proj(np.asarray(x0, dtype=np.float64))
    f, g = fun(x)
    trace = [f]
    pairs: deque = deque(maxlen=memory)
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        if np.max(np.abs(x - proj(x - g))) <= gtol:
            converged = True
            break
        pinned = ((x <= lo) & (g > 0)) | ((x >= hi) & (g < 0))
        d = _two_loop(g, list(pairs))
        d[pinned] = 0.0
        if g @ d >= 0:
            pairs.clear()
            d = -g.copy()
            d[pinned] = 0.0
        step = 1.0 if pairs else min(1.0, 1.0 / max(np.linalg.norm(d), 1e-12))
        for _ in range(max_backtracks):
            x_new = proj(x + step * d)
            f_new, g_new = fun(x_new)
            if np.isfinite(f_new) and f_new <= f + c1 * (g @ (x_new - x)):
                break
            step *= 0.5
        else:
            break
        s, yv = x_new - x, g_new - g
        sy = s @ yv
        if sy > 1e-10 * np.linalg.norm(s) * np.linalg.norm(yv):
            pairs.append((s, yv, 1.0 / sy))
        done = abs(f - f_new) <= ftol * max(abs(f), abs(f_new), 1.0)
        x, f, g = x_new, f_new, g_new
        trace.append(f)
        if done and np.max(np.abs(x - proj(x - g))) <= max(gtol, 1e-6):
            converged = True
            break
    return LBFGSResult(x, float(f), g, it, converged, trace)
