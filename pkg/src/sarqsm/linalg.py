"""Sparse weights storage and the S(lambda) = I - lambda W operator family.

Every estimator in the package works with the shift operator
``S(lam) = I - lam * W`` without materializing it.  Products with ``S`` and
``S'`` cost O(nnz + n); traces of ``S'S`` come from three scalars cached per
weights matrix; solves and log-determinants use sparse or dense
factorizations depending on the caller's needs.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from typing import Literal

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu, gmres, spilu, LinearOperator

__all__ = [
    "DEFAULT_LAMBDA_BOUNDS",
    "SingularShiftError",
    "SparseWeights",
    "ShiftOperator",
    "TraceCache",
    "LogDetEvaluator",
    "apply_shift",
    "solve_shift",
    "trace_sts",
    "log_abs_det_shift",
]

DEFAULT_LAMBDA_BOUNDS = (-0.995, 0.995)

_SINGULAR_TOL = 1e-14

LogDetStrategy = Literal["dense_lu", "eigen_precompute", "sparse_lu"]


class SingularShiftError(np.linalg.LinAlgError):
    """S(lambda) is singular (or numerically so) at the requested lambda."""

    def __init__(self, lam: float, detail: str = ""):
        self.lam = lam
        msg = f"S(lambda) = I - lambda*W is singular at lambda={lam!r}"
        if detail:
            msg += f": {detail}"
        super().__init__(msg)


@dataclass(frozen=True, eq=False)
class SparseWeights:
    """Row-compressed n x n spatial weights matrix.

    Parameters
    ----------
    matrix : scipy.sparse matrix or array_like
        The weights. Converted to canonical CSR (sorted indices, no explicit
        zeros, no duplicates).
    row_normalized : bool
        Whether each nonzero row is known to sum to one.

    Notes
    -----
    A CSR copy of ``W'`` is built lazily on first use so that ``S' v`` is as
    cheap as ``S v``.
    """

    matrix: sp.csr_matrix
    row_normalized: bool = False
    zero_rows: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        m = self.matrix
        if not sp.issparse(m):
            m = sp.csr_matrix(np.asarray(m, dtype=float))
        m = sp.csr_matrix(m, dtype=float, copy=True)
        if m.shape[0] != m.shape[1]:
            raise ValueError(f"weights matrix must be square, got shape {m.shape}")
        m.sum_duplicates()
        m.eliminate_zeros()
        m.sort_indices()
        if not np.all(np.isfinite(m.data)):
            raise ValueError("weights matrix has non-finite entries")
        if np.any(m.diagonal() != 0):
            raise ValueError("weights matrix must have a zero diagonal")
        object.__setattr__(self, "matrix", m)
        if self.zero_rows is None:
            object.__setattr__(self, "zero_rows", np.flatnonzero(np.diff(m.indptr) == 0))
        if self.row_normalized:
            rs = np.asarray(m.sum(axis=1)).ravel()
            nz = np.diff(m.indptr) > 0
            if np.any(np.abs(rs[nz] - 1.0) > 1e-12):
                raise ValueError("row_normalized flag set but rows do not sum to one")

    @property
    def n(self) -> int:
        return self.matrix.shape[0]

    @property
    def nnz(self) -> int:
        return self.matrix.nnz

    @property
    def row_ptr(self) -> np.ndarray:
        return self.matrix.indptr

    @property
    def col_idx(self) -> np.ndarray:
        return self.matrix.indices

    @property
    def values(self) -> np.ndarray:
        return self.matrix.data

    @cached_property
    def transpose_csr(self) -> sp.csr_matrix:
        t = self.matrix.T.tocsr()
        t.sort_indices()
        return t

    @cached_property
    def traces(self) -> "TraceCache":
        return TraceCache.from_weights(self)

    def toarray(self) -> np.ndarray:
        return self.matrix.toarray()

    def matvec(self, v: np.ndarray, transpose: bool = False) -> np.ndarray:
        m = self.transpose_csr if transpose else self.matrix
        return m @ v

    @classmethod
    def from_dense(cls, a, row_normalized: bool = False) -> "SparseWeights":
        return cls(sp.csr_matrix(np.asarray(a, dtype=float)), row_normalized=row_normalized)


@dataclass(frozen=True)
class TraceCache:
    """Exact trace summaries of W used by polynomial-in-lambda traces.

    ``tr_W`` = tr(W), ``frob_W_sq`` = tr(W'W), ``tr_WW`` = tr(W W).
    """

    tr_W: float
    frob_W_sq: float
    tr_WW: float

    @classmethod
    def from_weights(cls, weights: SparseWeights) -> "TraceCache":
        m = weights.matrix
        tr_w = float(m.diagonal().sum())
        frob = float(np.dot(m.data, m.data))
        # tr(WW) = sum_ij w_ij w_ji
        tr_ww = float(m.multiply(weights.transpose_csr).sum())
        return cls(tr_w, frob, tr_ww)


@dataclass(frozen=True)
class ShiftOperator:
    """S(lambda) = I - lambda W, applied matrix-free."""

    weights: SparseWeights
    lam: float

    @property
    def n(self) -> int:
        return self.weights.n

    def matvec(self, v: np.ndarray) -> np.ndarray:
        return apply_shift(self, v)

    def rmatvec(self, v: np.ndarray) -> np.ndarray:
        return apply_shift(self, v, transpose=True)

    def tocsr(self) -> sp.csr_matrix:
        return (sp.identity(self.n, format="csr") - self.lam * self.weights.matrix).tocsr()

    def toarray(self) -> np.ndarray:
        return np.eye(self.n) - self.lam * self.weights.toarray()

    @cached_property
    def factor(self):
        """Sparse LU of S(lambda), computed once per operator."""
        try:
            return splu(self.tocsr().tocsc())
        except RuntimeError as exc:  # "Factor is exactly singular"
            raise SingularShiftError(self.lam, str(exc)) from exc


def apply_shift(op: ShiftOperator, v, transpose: bool = False) -> np.ndarray:
    """Return ``S(lam) v`` (or ``S(lam)' v``).

    ``v`` may be a vector of length n or an (n, k) array.
    """
    v = np.asarray(v, dtype=float)
    if v.shape[0] != op.n:
        raise ValueError(f"dimension mismatch: operator is {op.n}x{op.n}, got {v.shape[0]} rows")
    if op.lam == 0.0:
        return v.copy()
    return v - op.lam * op.weights.matvec(v, transpose=transpose)


DIRECT_SOLVE_MAX_N = 2000


def solve_shift(op: ShiftOperator, b, transpose: bool = False, method: str = "direct",
                tol: float = 1e-10) -> np.ndarray:
    """Solve ``S(lam) x = b`` (or ``S(lam)' x = b``).

    Parameters
    ----------
    op : ShiftOperator
    b : array_like
        Right-hand side, shape (n,) or (n, k).
    transpose : bool
        Solve with ``S'`` instead.
    method : {"direct", "iterative", "auto"}
        Sparse LU (cached on ``op``) or ILU-preconditioned GMRES.  ``auto``
        uses the LU up to ``DIRECT_SOLVE_MAX_N`` unknowns; beyond that the
        fill-in on random networks makes GMRES far cheaper.
    tol : float
        Relative residual tolerance for the iterative path.

    Raises
    ------
    SingularShiftError
        If the factorization breaks down or GMRES does not converge.
    """
    b = np.asarray(b, dtype=float)
    if b.shape[0] != op.n:
        raise ValueError(f"dimension mismatch: operator is {op.n}x{op.n}, got {b.shape[0]} rows")
    if op.lam == 0.0:
        return b.copy()
    if method == "auto":
        method = "direct" if op.n <= DIRECT_SOLVE_MAX_N else "iterative"
    if method == "direct":
        x = op.factor.solve(b, trans="T" if transpose else "N")
        if not np.all(np.isfinite(x)):
            raise SingularShiftError(op.lam, "non-finite solution")
        return x
    if method != "iterative":
        raise ValueError(f"unknown solve method {method!r}")

    a = op.tocsr()
    if transpose:
        a = a.T.tocsr()
    cols = b.reshape(op.n, -1)
    out = np.empty_like(cols)
    m = None
    for k in range(cols.shape[1]):
        # S is usually well conditioned (for a row-normalized W and |lam| < 1
        # it is diagonally dominant), so plain GMRES is tried first.  The ILU
        # preconditioner is built only when that stalls, because its fill-in
        # on random networks is expensive.
        x, info = (None, 1) if m is not None else gmres(
            a, cols[:, k], rtol=tol, atol=0.0, restart=50, maxiter=4)
        if info != 0:
            if m is None:
                ilu = spilu(a.tocsc(), drop_tol=1e-4, fill_factor=4)
                m = LinearOperator(a.shape, ilu.solve)
            x, info = gmres(a, cols[:, k], M=m, rtol=tol, atol=0.0, restart=50, maxiter=1000)
        if info != 0:
            raise SingularShiftError(op.lam, f"GMRES did not converge (info={info})")
        out[:, k] = x
    return out.reshape(b.shape)


def trace_sts(cache: TraceCache, n: int, lam: float) -> float:
    """tr{S(lam)' S(lam)} = n - 2 lam tr(W) + lam^2 tr(W'W), in O(1)."""
    return n - 2.0 * lam * cache.tr_W + lam * lam * cache.frob_W_sq


class LogDetEvaluator:
    """log|det S(lam)| for repeated lambdas on one weights matrix.

    ``eigen_precompute`` pays one O(n^3) eigenvalue decomposition up front
    (done in the constructor so callers can time it); afterwards each
    evaluation is O(n).  ``dense_lu`` and ``sparse_lu`` refactorize per call.
    """

    def __init__(self, weights: SparseWeights, strategy: LogDetStrategy = "eigen_precompute"):
        if strategy not in ("dense_lu", "eigen_precompute", "sparse_lu"):
            raise ValueError(f"unknown log-det strategy {strategy!r}")
        self.weights = weights
        self.strategy = strategy
        self.eigenvalues = None
        self._dense = None
        if strategy == "eigen_precompute":
            self.eigenvalues = np.linalg.eigvals(weights.toarray())
        elif strategy == "dense_lu":
            self._dense = weights.toarray()

    def __call__(self, lam: float) -> float:
        if lam == 0.0:
            return 0.0
        n = self.weights.n
        if self.strategy == "eigen_precompute":
            mod = np.abs(1.0 - lam * self.eigenvalues)
            if mod.min() < _SINGULAR_TOL:
                raise SingularShiftError(lam, "eigenvalue 1/lambda of W")
            return float(np.sum(np.log(mod)))
        if self.strategy == "dense_lu":
            sign, logdet = np.linalg.slogdet(np.eye(n) - lam * self._dense)
            if sign == 0 or not np.isfinite(logdet):
                raise SingularShiftError(lam)
            return float(logdet)
        lu = ShiftOperator(self.weights, lam).factor
        d = np.abs(lu.U.diagonal())
        if d.min() < _SINGULAR_TOL:
            raise SingularShiftError(lam, "zero pivot in sparse LU")
        return float(np.sum(np.log(d)))


def log_abs_det_shift(weights: SparseWeights, lam: float,
                      strategy: LogDetStrategy = "dense_lu") -> float:
    """One-shot log|det S(lam)|.  Use :class:`LogDetEvaluator` in loops."""
    return LogDetEvaluator(weights, strategy)(lam)


def default_logdet_strategy(n: int) -> LogDetStrategy:
    return "eigen_precompute" if n <= 2000 else "sparse_lu"
