"""Fused single-pass kernel for the concentrated score matching objective.

A sweep over the rows of W' accumulates z'z, Z'z and Z'Z for
z = S'S y and Z = S'X, then a p x p Cholesky gives beta and the residual
sum of squares.  Without numba the module reports ``HAVE_NUMBA = False``
and callers fall back to vectorized NumPy.
"""

from __future__ import annotations

import numpy as np

try:
    import numba
except ImportError:  # pragma: no cover - exercised only without numba
    numba = None

HAVE_NUMBA = numba is not None

__all__ = ["HAVE_NUMBA", "concentrated_core"]


def _core(lam, y, Wy, X, WtX, indptr, indices, data, gram, b, sy, beta):
    """Fill ``beta`` and return (rss, status); status 1 flags a singular Z'Z.

    ``sy`` is scratch space of length n that receives S y.
    """
    n, p = X.shape
    zz = 0.0
    for a in range(p):
        b[a] = 0.0
        for c in range(p):
            gram[a, c] = 0.0
    for i in range(n):
        sy[i] = y[i] - lam * Wy[i]
    for i in range(n):
        acc = 0.0
        for k in range(indptr[i], indptr[i + 1]):
            acc += data[k] * sy[indices[k]]
        zi = sy[i] - lam * acc
        zz += zi * zi
        for a in range(p):
            za = X[i, a] - lam * WtX[i, a]
            b[a] += za * zi
            for c in range(a + 1):
                gram[a, c] += za * (X[i, c] - lam * WtX[i, c])
    # in-place lower Cholesky of gram
    dmax = 0.0
    for a in range(p):
        if gram[a, a] > dmax:
            dmax = gram[a, a]
    for a in range(p):
        s = gram[a, a]
        for c in range(a):
            s -= gram[a, c] * gram[a, c]
        if not s > 1e-24 * dmax or dmax <= 0.0:
            return np.nan, 1
        d = np.sqrt(s)
        gram[a, a] = d
        for r in range(a + 1, p):
            t = gram[r, a]
            for c in range(a):
                t -= gram[r, c] * gram[a, c]
            gram[r, a] = t / d
    # forward then back substitution
    for a in range(p):
        t = b[a]
        for c in range(a):
            t -= gram[a, c] * beta[c]
        beta[a] = t / gram[a, a]
    fit = 0.0
    for a in range(p):
        fit += beta[a] * beta[a]
    for a in range(p - 1, -1, -1):
        t = beta[a]
        for c in range(a + 1, p):
            t -= gram[c, a] * beta[c]
        beta[a] = t / gram[a, a]
    # ||z - Z beta||^2 = z'z - ||L^{-1} Z'z||^2
    return zz - fit, 0


concentrated_core = numba.njit(cache=True)(_core) if HAVE_NUMBA else None
