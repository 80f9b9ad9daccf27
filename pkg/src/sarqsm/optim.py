"""One-dimensional bounded minimization: coarse grid, then bounded Brent."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize_scalar

from .report import DegenerateFitError, FitFailure

__all__ = ["GridBrentResult", "grid_then_brent"]


@dataclass
class GridBrentResult:
    x: float
    fun: float
    grid: np.ndarray
    grid_values: np.ndarray
    trace: list = field(default_factory=list)
    nfev: int = 0
    skipped: int = 0


def grid_then_brent(f, bounds, n_grid: int = 21, xtol: float = 1e-8,
                    maxiter: int = 500) -> GridBrentResult:
    """Minimize ``f`` on ``[lo, hi]``.

    ``f`` is evaluated on ``n_grid`` equispaced points; points where it raises
    :class:`DegenerateFitError` (or returns a non-finite value) are skipped
    with a warning.  Brent's bounded method then refines inside the two grid
    cells adjacent to the best point.
    """
    lo, hi = map(float, bounds)
    grid = np.linspace(lo, hi, n_grid)
    vals = np.full(n_grid, np.nan)
    trace = []

    def safe(x):
        try:
            v = float(f(x))
        except (DegenerateFitError, np.linalg.LinAlgError):
            v = np.nan
        trace.append((float(x), v))
        return v

    for k, x in enumerate(grid):
        vals[k] = safe(x)
    ok = np.isfinite(vals)
    if not ok.any():
        raise FitFailure(f"objective is degenerate at every grid point on [{lo}, {hi}]")
    skipped = int((~ok).sum())
    if skipped:
        warnings.warn(f"{skipped} grid point(s) skipped as degenerate", RuntimeWarning, stacklevel=2)
    k = int(np.nanargmin(np.where(ok, vals, np.inf)))
    a = grid[max(k - 1, 0)]
    b = grid[min(k + 1, n_grid - 1)]

    def guarded(x):
        v = safe(x)
        return v if np.isfinite(v) else np.inf

    res = minimize_scalar(guarded, bounds=(a, b), method="bounded",
                          options={"xatol": xtol, "maxiter": maxiter})
    x, fx = float(res.x), float(res.fun)
    if not fx <= vals[k]:
        x, fx = float(grid[k]), float(vals[k])
    return GridBrentResult(x, fx, grid, vals, trace, nfev=len(trace), skipped=skipped)
