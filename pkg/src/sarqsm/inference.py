"""Plug-in asymptotic covariances and Wald statistics.

Notation used throughout: S = I - lam W, G = W S^{-1} (= S^{-1} W),
P = S S', g = G X beta and C = P G + S W'.  Every block of the score
covariance, the expected Hessian and the joint score covariance used by
the efficiency-improved estimator is a combination of a handful of traces,
a few diagonals (diag G, diag C, diag P) and products of P, S' with the
vectors g and X.  Those ingredients are gathered once, either exactly from
a dense G (moderate n) or by Rademacher probing with sparse solves, and
the blocks are then assembled from them.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy.stats import norm

from .linalg import ShiftOperator, SingularShiftError, solve_shift
from .lqform import MomentDiagonals
from .model import ParamVector, SarData, make_rng, residuals
from .report import FitReport

__all__ = [
    "N_DENSE_MAX",
    "DEFAULT_PROBES",
    "InferenceFailure",
    "TraceEstimate",
    "AsymptoticCovariances",
    "moment_plugins",
    "trace_estimator",
    "qsm_sandwich",
    "improved_sandwich",
    "qmle_covariance",
    "wald_report",
    "attach_inference",
]

N_DENSE_MAX = 2000
DEFAULT_PROBES = 200


class InferenceFailure(np.linalg.LinAlgError):
    """A matrix that must be inverted for the sandwich is singular."""


@dataclass(frozen=True)
class TraceEstimate:
    value: float
    se: float = 0.0
    probes: int = 0


def _as_operator(op):
    if isinstance(op, spla.LinearOperator):
        return op
    return spla.aslinearoperator(op)


def trace_estimator(op, mode: str = "exact_dense", probes: int = DEFAULT_PROBES,
                    seed=0) -> TraceEstimate:
    """Trace of a square operator (matrix, sparse matrix or ``LinearOperator``).

    ``exact_dense`` applies the operator to the identity; ``stochastic``
    averages z'Az over Rademacher probes z and reports the standard error
    of that average.
    """
    A = _as_operator(op)
    n, m = A.shape
    if n != m:
        raise ValueError("trace needs a square operator")
    if mode == "exact_dense":
        return TraceEstimate(float(np.trace(A.matmat(np.eye(n)))))
    if mode != "stochastic":
        raise ValueError(f"unknown trace mode {mode!r}")
    if probes < 2:
        raise ValueError("need at least two probes")
    rng = make_rng(seed)
    Z = rng.choice(np.array([-1.0, 1.0]), size=(n, probes))
    vals = np.einsum("ij,ij->j", Z, A.matmat(Z))
    return TraceEstimate(float(vals.mean()), float(vals.std(ddof=1) / np.sqrt(probes)), probes)


def moment_plugins(data: SarData, theta_hat: ParamVector) -> MomentDiagonals:
    """Homoskedastic plug-ins: m2 = s2_hat, m3 = mean(e^3), m4 = mean(e^4)."""
    e = residuals(data, theta_hat)
    n = data.n
    return MomentDiagonals.constant(n, theta_hat.sigma2, float(np.mean(e**3)), float(np.mean(e**4)))


def _tr_prod(A, B) -> float:
    """tr(A B) for sparse A, B."""
    return float(A.multiply(B.T).sum())


@dataclass
class _Ingredients:
    n: int
    p: int
    s2: float
    tr: dict
    tr_se: dict
    c: np.ndarray  # diag(C)
    Gd: np.ndarray  # diag(G)
    Pd: np.ndarray  # diag(P)
    g: np.ndarray
    Pg: np.ndarray
    Stg: np.ndarray
    X: np.ndarray
    PX: np.ndarray
    StX: np.ndarray
    backend: str


def _ingredients(data: SarData, theta: ParamVector, n_dense_max: int = N_DENSE_MAX,
                 probes: int = DEFAULT_PROBES, seed=0, backend: str | None = None) -> _Ingredients:
    n, X = data.n, data.X
    W = data.W.matrix
    Wt = data.W.transpose_csr
    I = sp.identity(n, format="csr")
    S = (I - theta.lam * W).tocsr()
    St = S.T.tocsr()
    P = (S @ St).tocsr()
    SWt = (S @ Wt).tocsr()
    op = ShiftOperator(data.W, theta.lam)

    def solve(b):
        try:
            return solve_shift(op, b, method="auto")
        except SingularShiftError as exc:
            raise InferenceFailure(str(exc)) from None

    g = W @ solve(X @ theta.beta)
    tr = {
        "StWStW": _tr_prod(St @ W, St @ W),
        "WStSWt": float((W @ St).multiply(W @ St).sum()),
        "PWWt": _tr_prod(P, W @ Wt),
        "StSStW": _tr_prod(St @ S @ St, W),
        "P2": _tr_prod(P, P),
        "WtW": data.W.traces.frob_W_sq,
        "SWt": float(SWt.diagonal().sum()),
        "P": float(P.diagonal().sum()),
    }
    tr_se = {}
    PSWt = (P @ SWt).tocsr()
    backend = backend or ("dense" if n <= n_dense_max else "stochastic")
    if backend == "dense":
        # a dense LU is far quicker than n sparse triangular solves here
        G = np.linalg.solve(S.toarray(), W.toarray())
        Gd = np.diagonal(G).copy()
        PG = P @ G
        c = _diag_sparse_dense(P, G)
        tr["GtPSWt"] = _sum_sparse_dense(PSWt, G)
        tr["PG_F"] = float(np.einsum("ij,ij->", PG, PG))
        tr["GtSWt"] = _sum_sparse_dense(SWt, G)
        StG = St @ G
        tr["StG_F"] = float(np.einsum("ij,ij->", StG, StG))
        tr["GG"] = float(np.einsum("ij,ji->", G, G))
        tr["G_F"] = float(np.einsum("ij,ij->", G, G))
        tr["G"] = float(Gd.sum())
    elif backend == "stochastic":
        rng = make_rng(seed)
        Z = rng.choice(np.array([-1.0, 1.0]), size=(n, probes))
        U = solve(np.asarray(W @ Z))  # G Z
        PU = P @ U
        est = {
            "GtPSWt": np.einsum("ij,ij->j", PSWt @ Z, U),
            "PG_F": np.einsum("ij,ij->j", PU, PU),
            "GtSWt": np.einsum("ij,ij->j", SWt @ Z, U),
            "StG_F": np.einsum("ij,ij->j", St @ U, St @ U),
            "GG": np.einsum("ij,ij->j", Z, W @ solve(U)),
            "G_F": np.einsum("ij,ij->j", U, U),
            "G": np.einsum("ij,ij->j", Z, U),
        }
        for k, v in est.items():
            tr[k] = float(v.mean())
            tr_se[k] = float(v.std(ddof=1) / np.sqrt(probes))
        Gd = (Z * U).mean(axis=1)
        c = (Z * PU).mean(axis=1)
    else:
        raise ValueError(f"unknown backend {backend!r}")
    c = c + SWt.diagonal()
    return _Ingredients(
        n=n, p=data.p, s2=theta.sigma2, tr=tr, tr_se=tr_se, c=c, Gd=Gd, Pd=P.diagonal(),
        g=g, Pg=P @ g, Stg=St @ g, X=X, PX=P @ X, StX=St @ X, backend=backend,
    )


def _sum_sparse_dense(A, D) -> float:
    """sum(A o D) for sparse A and dense D."""
    A = A.tocoo()
    return float(np.dot(A.data, D[A.row, A.col]))


def _diag_sparse_dense(A, D) -> np.ndarray:
    """diag(A D) for sparse A and dense D."""
    A = A.tocoo()
    return np.bincount(A.row, weights=A.data * D[A.col, A.row], minlength=A.shape[0])


def _sym_from_blocks(ll, bl, sl, bb, bs, ss, p) -> np.ndarray:
    k = p + 2
    M = np.zeros((k, k))
    M[0, 0] = ll
    M[1:-1, 0] = M[0, 1:-1] = bl
    M[-1, 0] = M[0, -1] = sl
    M[1:-1, 1:-1] = bb
    M[1:-1, -1] = M[-1, 1:-1] = bs
    M[-1, -1] = ss
    return M


def _v_s(ig: _Ingredients) -> np.ndarray:
    n, s2, t = ig.n, ig.s2, ig.tr
    ll = ((2 * t["StWStW"] + t["WStSWt"] + 2 * t["GtPSWt"] + 2 * t["PWWt"] + t["PG_F"]) / (n * s2**2)
          + float(ig.Pg @ ig.Pg) / (n * s2**3))
    bl = ig.PX.T @ ig.Pg / (n * s2**3)
    bb = ig.PX.T @ ig.PX / (n * s2**3)
    sl = 4 * t["StSStW"] / (n * s2**3)
    ss = 2 * t["P2"] / (n * s2**4)
    return _sym_from_blocks(ll, bl, sl, bb, 0.0, ss, ig.p)


def _omega_s(ig: _Ingredients, moms: MomentDiagonals) -> np.ndarray:
    n, s2 = ig.n, ig.s2
    u3, u4, c, Pd = moms.ups3, moms.ups4, ig.c, ig.Pd
    ll = (float(np.sum(u4 * c * c)) + 2 * float(np.sum(ig.Pg * u3 * c))) / (n * s2**4)
    bl = ig.PX.T @ (u3 * c) / (n * s2**4)
    sl = (float(np.sum(Pd * u4 * c)) + float(np.sum(ig.Pg * u3 * Pd))) / (n * s2**5)
    bs = ig.PX.T @ (u3 * Pd) / (n * s2**5)
    ss = float(np.sum(Pd * Pd * u4)) / (n * s2**6)
    return _sym_from_blocks(ll, bl, sl, np.zeros((ig.p, ig.p)), bs, ss, ig.p)


def _u_s(ig: _Ingredients) -> np.ndarray:
    n, s2, t = ig.n, ig.s2, ig.tr
    ll = ((t["WtW"] + 2 * t["GtSWt"] + t["StG_F"]) / (n * s2)
          + float(ig.Stg @ ig.Stg) / (n * s2**2))
    bl = ig.StX.T @ ig.Stg / (n * s2**2)
    bb = ig.StX.T @ ig.StX / (n * s2**2)
    sl = 2 * t["SWt"] / (n * s2**2)
    ss = t["P"] / (n * s2**3)
    return _sym_from_blocks(ll, bl, sl, bb, 0.0, ss, ig.p)


def _v_m(ig: _Ingredients) -> np.ndarray:
    n, s2, t = ig.n, ig.s2, ig.tr
    ll = (t["GG"] + t["G_F"]) / n + float(ig.g @ ig.g) / (n * s2)
    bl = ig.X.T @ ig.g / (n * s2)
    sl = t["G"] / (n * s2)
    bb = ig.X.T @ ig.X / (n * s2)
    ss = 1.0 / (2 * s2**2)
    return _sym_from_blocks(ll, bl, sl, bb, 0.0, ss, ig.p)


def _omega_m(ig: _Ingredients, moms: MomentDiagonals) -> np.ndarray:
    n, s2 = ig.n, ig.s2
    u3, u4, Gd = moms.ups3, moms.ups4, ig.Gd
    ll = (float(np.sum(u4 * Gd * Gd)) + 2 * float(np.sum(ig.g * u3 * Gd))) / (n * s2**2)
    bl = ig.X.T @ (u3 * Gd) / (n * s2**2)
    sl = (float(np.sum(u4 * Gd)) + float(u3 @ ig.g)) / (2 * n * s2**3)
    bs = ig.X.T @ u3 / (2 * n * s2**3)
    ss = float(np.sum(u4)) / (4 * n * s2**4)
    return _sym_from_blocks(ll, bl, sl, np.zeros((ig.p, ig.p)), bs, ss, ig.p)


def _v_sm(ig: _Ingredients) -> np.ndarray:
    n, s2, t = ig.n, ig.s2, ig.tr
    ll = ((2 * t["GtSWt"] + t["WtW"] + t["StG_F"]) / (n * s2)
          + float(ig.Stg @ ig.Stg) / (n * s2**2))
    bl = ig.StX.T @ ig.Stg / (n * s2**2)
    bb = ig.StX.T @ ig.StX / (n * s2**2)
    sl = 2 * t["SWt"] / (n * s2**2)
    ss = t["P"] / (n * s2**3)
    return _sym_from_blocks(ll, bl, sl, bb, 0.0, ss, ig.p)


def _omega_sm(ig: _Ingredients, moms: MomentDiagonals) -> np.ndarray:
    """Rows index the score matching score, columns the likelihood score."""
    n, s2, p = ig.n, ig.s2, ig.p
    u3, u4, c, Gd, Pd, g = moms.ups3, moms.ups4, ig.c, ig.Gd, ig.Pd, ig.g
    M = np.zeros((p + 2, p + 2))
    M[0, 0] = (float(np.sum(c * u4 * Gd)) + float(np.sum(ig.Pg * u3 * Gd))
               + float(np.sum(c * u3 * g))) / (n * s2**3)
    M[0, 1:-1] = ig.X.T @ (c * u3) / (n * s2**3)
    M[0, -1] = (float(np.sum(c * u4)) + float(u3 @ ig.Pg)) / (2 * n * s2**4)
    M[1:-1, 0] = ig.PX.T @ (u3 * Gd) / (n * s2**3)
    M[1:-1, -1] = ig.PX.T @ u3 / (2 * n * s2**4)
    M[-1, 0] = (float(np.sum(Pd * u4 * Gd)) + float(np.sum(Pd * u3 * g))) / (n * s2**4)
    M[-1, 1:-1] = ig.X.T @ (Pd * u3) / (n * s2**4)
    M[-1, -1] = float(np.sum(Pd * u4)) / (2 * n * s2**5)
    return M


@dataclass
class AsymptoticCovariances:
    """Blocks of the asymptotic covariance of sqrt(n)(theta_hat - theta0).

    ``sandwich_*`` are covariances before division by n.  The likelihood
    related blocks and ``Xi`` stay ``None`` unless the improved estimator's
    covariance was requested.
    """

    V_S: np.ndarray
    Omega_S: np.ndarray
    U_S: np.ndarray
    sandwich_qsm: np.ndarray | None = None
    V_M: np.ndarray | None = None
    Omega_M: np.ndarray | None = None
    V_SM: np.ndarray | None = None
    Omega_SM: np.ndarray | None = None
    Xi: np.ndarray | None = None
    sandwich_improved: np.ndarray | None = None
    sandwich_qmle: np.ndarray | None = None
    backend: str = "dense"
    trace_se: dict = field(default_factory=dict)

    @property
    def V(self) -> np.ndarray:
        return np.block([[self.V_S, self.V_SM], [self.V_SM.T, self.V_M]])

    @property
    def Omega(self) -> np.ndarray:
        return np.block([[self.Omega_S, self.Omega_SM], [self.Omega_SM.T, self.Omega_M]])


def _inv(M, what: str) -> np.ndarray:
    try:
        inv = np.linalg.inv(M)
    except np.linalg.LinAlgError:
        raise InferenceFailure(f"{what} is singular") from None
    if not np.all(np.isfinite(inv)) or np.linalg.cond(M) > 1e14:
        raise InferenceFailure(f"{what} is numerically singular")
    return inv


def _sym(M):
    return 0.5 * (M + M.T)


def qsm_sandwich(data: SarData, theta_hat: ParamVector, moms: MomentDiagonals | None = None,
                 **kw) -> AsymptoticCovariances:
    """U_S^{-1} (V_S + Omega_S) U_S^{-1} with every block evaluated at ``theta_hat``.

    Keyword arguments (``n_dense_max``, ``probes``, ``seed``, ``backend``)
    control how S^{-1}-bearing traces and diagonals are obtained.
    """
    moms = moms if moms is not None else moment_plugins(data, theta_hat)
    ig = _ingredients(data, theta_hat, **kw)
    V, Om, U = _v_s(ig), _omega_s(ig, moms), _u_s(ig)
    Ui = _inv(U, "U_S")
    sand = _sym(Ui @ (V + Om) @ Ui)
    return AsymptoticCovariances(V, Om, U, sandwich_qsm=sand, backend=ig.backend, trace_se=ig.tr_se)


def xi_matrix(U_S: np.ndarray, V_M: np.ndarray) -> np.ndarray:
    """Linear map from the stacked scores (-dD, dl) to the improved estimator."""
    k = U_S.shape[0]
    Ui = _inv(U_S, "U_S")
    Vmm = _inv(V_M[1:, 1:], "V_M without its lambda row and column")
    top = Ui[0]
    Xi = np.zeros((k, 2 * k))
    Xi[0, :k] = top
    Xi[1:, :k] = -(Vmm @ V_M[1:, :1]) @ top[None, :]
    Xi[1:, k + 1:] = Vmm
    return Xi


def improved_sandwich(data: SarData, theta_tilde_hat: ParamVector,
                      moms: MomentDiagonals | None = None, **kw) -> AsymptoticCovariances:
    """Xi (V + Omega) Xi' for (lam_hat, beta_tilde(lam_hat), s2_tilde(lam_hat))."""
    th = theta_tilde_hat
    moms = moms if moms is not None else moment_plugins(data, th)
    ig = _ingredients(data, th, **kw)
    V_S, Om_S, U_S = _v_s(ig), _omega_s(ig, moms), _u_s(ig)
    V_M, Om_M = _v_m(ig), _omega_m(ig, moms)
    V_SM, Om_SM = _v_sm(ig), _omega_sm(ig, moms)
    out = AsymptoticCovariances(V_S, Om_S, U_S, V_M=V_M, Omega_M=Om_M, V_SM=V_SM,
                                Omega_SM=Om_SM, backend=ig.backend, trace_se=ig.tr_se)
    Ui = _inv(U_S, "U_S")
    out.sandwich_qsm = _sym(Ui @ (V_S + Om_S) @ Ui)
    out.Xi = xi_matrix(U_S, V_M)
    out.sandwich_improved = _sym(out.Xi @ (out.V + out.Omega) @ out.Xi.T)
    return out


def qmle_covariance(data: SarData, theta_tilde: ParamVector, moms: MomentDiagonals | None = None,
                    **kw) -> AsymptoticCovariances:
    """V_M^{-1} + V_M^{-1} Omega_M V_M^{-1} for the QMLE.

    V_M is both the score covariance under normality and minus the expected
    Hessian of the log-likelihood, so the sandwich collapses to this form.
    """
    moms = moms if moms is not None else moment_plugins(data, theta_tilde)
    ig = _ingredients(data, theta_tilde, **kw)
    V_M, Om_M = _v_m(ig), _omega_m(ig, moms)
    Vi = _inv(V_M, "V_M")
    out = AsymptoticCovariances(_v_s(ig), _omega_s(ig, moms), _u_s(ig), V_M=V_M, Omega_M=Om_M,
                                backend=ig.backend, trace_se=ig.tr_se)
    out.sandwich_qmle = _sym(Vi + Vi @ Om_M @ Vi)
    return out


def wald_report(theta_hat: ParamVector, cov: np.ndarray, n: int):
    """Standard errors sqrt(diag(cov)/n) and two-sided normal p-values.

    Every parameter, sigma^2 included, is tested against zero.  Entries with a
    negative variance get NaN standard errors and p-values; their indices are
    returned as the third element.
    """
    est = theta_hat.as_array()
    d = np.diag(np.asarray(cov, dtype=float)) / n
    bad = np.flatnonzero(~(d >= 0))
    se = np.sqrt(np.where(d >= 0, d, np.nan))
    with np.errstate(divide="ignore", invalid="ignore"):
        z = np.where(se > 0, np.abs(est) / se, np.where(est == 0, 0.0, np.inf))
    pv = 2.0 * norm.sf(z)
    pv[bad] = np.nan
    return se, pv, bad.tolist()


def attach_inference(report: FitReport, data: SarData, **kw) -> FitReport:
    """Fill ``cov``, ``std_errors`` and ``p_values`` of a fit in place.

    A singular matrix does not discard the estimates: the failure is noted
    under ``diagnostics["inference_error"]``.
    """
    try:
        if report.method == "qsm":
            ac = qsm_sandwich(data, report.theta, **kw)
            cov = ac.sandwich_qsm
        elif report.method == "qsm_improved":
            ac = improved_sandwich(data, report.theta, **kw)
            cov = ac.sandwich_improved
        elif report.method == "qmle":
            ac = qmle_covariance(data, report.theta, **kw)
            cov = ac.sandwich_qmle
        else:
            raise ValueError(f"unknown method {report.method!r}")
    except InferenceFailure as exc:
        report.diagnostics["inference_error"] = str(exc)
        return report
    se, pv, bad = wald_report(report.theta, cov, data.n)
    report.cov, report.std_errors, report.p_values = cov, se, pv
    report.diagnostics["inference_backend"] = ac.backend
    if ac.trace_se:
        report.diagnostics["trace_mc_se"] = ac.trace_se
    if bad:
        report.diagnostics["negative_variance"] = bad
    return report
