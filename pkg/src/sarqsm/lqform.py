"""Conditional moments of linear-quadratic forms s = (e'A_j e)_j + B'e.

Closed forms for the mean vector and covariance matrix given independent
errors with (possibly heterogeneous) second, third and fourth moments, and
a Monte Carlo sampler used to check them.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .model import ErrorDistribution, make_rng

__all__ = [
    "LqForm",
    "MomentDiagonals",
    "LqSample",
    "symmetrize",
    "lq_mean",
    "lq_cov",
    "lq_sample",
    "random_lqform",
    "lq_check",
]


def symmetrize(G):
    """[G]_s = (G + G') / 2 for dense or sparse G."""
    if sp.issparse(G):
        return ((G + G.T) * 0.5).tocsr()
    G = np.asarray(G, dtype=float)
    return 0.5 * (G + G.T)


def _diag(A) -> np.ndarray:
    return A.diagonal() if sp.issparse(A) else np.diagonal(A).copy()


class LqForm:
    """Matrices defining s = (e'A_1 e, ..., e'A_d e)' + B'e.

    Each ``A_j`` (dense or sparse) is symmetrized on ingest, which leaves the
    quadratic forms unchanged.
    """

    def __init__(self, A, B=None):
        A = list(A)
        if not A:
            raise ValueError("need at least one quadratic matrix")
        self.A = [symmetrize(a) for a in A]
        n = self.A[0].shape[0]
        d = len(self.A)
        for a in self.A:
            if a.shape != (n, n):
                raise ValueError("all A_j must be n x n with a common n")
        B = np.zeros((n, d)) if B is None else np.asarray(B, dtype=float).reshape(n, d)
        self.B = B

    @property
    def n(self) -> int:
        return self.A[0].shape[0]

    @property
    def d(self) -> int:
        return len(self.A)

    def evaluate(self, E: np.ndarray) -> np.ndarray:
        """s for each row of ``E`` (shape (m, n)); returns (m, d)."""
        E = np.atleast_2d(E)
        out = E @ self.B
        for j, a in enumerate(self.A):
            ae = (a @ E.T).T if sp.issparse(a) else E @ a
            out[:, j] += np.einsum("ij,ij->i", ae, E)
        return out


@dataclass(frozen=True)
class MomentDiagonals:
    """Per-observation conditional moments E[e_i^s], s = 2, 3, 4."""

    m2: np.ndarray
    m3: np.ndarray
    m4: np.ndarray

    def __post_init__(self):
        for name in ("m2", "m3", "m4"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=float))
        if np.any(self.m2 <= 0):
            raise ValueError("second moments must be positive")
        if np.any(self.m4 < self.m2**2 * (1 - 1e-12)):
            raise ValueError("fourth moments violate m4 >= m2^2")

    @classmethod
    def constant(cls, n: int, m2: float, m3: float, m4: float) -> "MomentDiagonals":
        return cls(np.full(n, m2), np.full(n, m3), np.full(n, m4))

    @classmethod
    def from_distribution(cls, n: int, err: ErrorDistribution, sigma2: float = 1.0):
        s = np.sqrt(sigma2)
        return cls.constant(n, sigma2 * err.moment(2), s**3 * err.moment(3), sigma2**2 * err.moment(4))

    @property
    def ups3(self) -> np.ndarray:
        return self.m3

    @property
    def ups4(self) -> np.ndarray:
        """mu4 - 3 mu2^2 (zero for Gaussian errors)."""
        return self.m4 - 3.0 * self.m2**2


def lq_mean(lq: LqForm, moms: MomentDiagonals) -> np.ndarray:
    """E[s | F] = (tr(Ups2 A_j))_j."""
    return np.array([float(moms.m2 @ _diag(a)) for a in lq.A])


def _tr_weighted_pair(a1, a2, w) -> float:
    """tr(diag(w) A1 diag(w) A2) for symmetric A2."""
    if sp.issparse(a1) or sp.issparse(a2):
        a1 = sp.csr_matrix(a1)
        left = sp.diags(w) @ a1 @ sp.diags(w)
        return float(left.multiply(a2).sum())
    return float(np.einsum("ik,ik->", w[:, None] * a1 * w[None, :], a2))


def lq_cov(lq: LqForm, moms: MomentDiagonals) -> np.ndarray:
    """Cov[s | F].

    Sum of four pieces: 2 tr(Ups2 A_j Ups2 A_k), B'Ups2 B, the fourth-cumulant
    term and the symmetrized third-moment cross term.  Hadamard products with
    a diagonal matrix only see diagonals, so the last two reduce to weighted
    sums over diag(A_j).
    """
    d = lq.d
    m2, u3, u4 = moms.m2, moms.ups3, moms.ups4
    diags = np.column_stack([_diag(a) for a in lq.A])
    quad = np.empty((d, d))
    for j in range(d):
        for k in range(j, d):
            quad[j, k] = quad[k, j] = 2.0 * _tr_weighted_pair(lq.A[j], lq.A[k], m2)
    lin = lq.B.T @ (m2[:, None] * lq.B)
    kurt = diags.T @ (u4[:, None] * diags)
    cross = lq.B.T @ (u3[:, None] * diags)
    return quad + lin + kurt + cross + cross.T


@dataclass
class LqSample:
    """Monte Carlo summary of s over ``draws`` independent error vectors."""

    draws: int
    mean: np.ndarray
    cov: np.ndarray
    mean_se: np.ndarray
    cov_se: np.ndarray
    standardized: np.ndarray | None = None

    def standardized_skewness(self) -> np.ndarray:
        z = self.standardized
        zc = z - z.mean(axis=0)
        return (zc**3).mean(axis=0) / (zc**2).mean(axis=0) ** 1.5

    def standardized_excess_kurtosis(self) -> np.ndarray:
        z = self.standardized
        zc = z - z.mean(axis=0)
        return (zc**4).mean(axis=0) / (zc**2).mean(axis=0) ** 2 - 3.0


def lq_sample(lq: LqForm, err: ErrorDistribution, draws: int, seed=0, sigma2: float = 1.0,
              chunk: int = 100_000, keep_standardized: bool = False) -> LqSample:
    """Draw ``draws`` error vectors and summarize s.

    Standard errors of the covariance entries come from the empirical fourth
    moments of s: the products (s_a - c_a)(s_b - c_b), centred at the mean
    of the first chunk, are treated as i.i.d. draws whose variance gives the
    standard error of their average.
    """
    if draws < 2:
        raise ValueError("need at least two draws")
    rng = make_rng(seed)
    n, d = lq.n, lq.d
    scale = np.sqrt(sigma2)
    center = None
    s1 = np.zeros(d)
    s1sq = np.zeros(d)
    prod = np.zeros((d, d))
    prod_sq = np.zeros((d, d))
    keep = [] if keep_standardized else None
    mu = None
    if keep_standardized:
        mu = lq_mean(lq, MomentDiagonals.from_distribution(n, err, sigma2))
    done = 0
    while done < draws:
        m = min(chunk, draws - done)
        E = scale * err.sample(rng, (m, n))
        s = lq.evaluate(E)
        if center is None:
            center = s.mean(axis=0)
        c = s - center
        s1 += c.sum(axis=0)
        s1sq += (c**2).sum(axis=0)
        pr = c[:, :, None] * c[:, None, :]
        prod += pr.sum(axis=0)
        prod_sq += (pr**2).sum(axis=0)
        if keep is not None:
            keep.append((s - mu) / np.sqrt(n))
        done += m
    N = float(draws)
    cbar = s1 / N
    mean = center + cbar
    var = s1sq / N - cbar**2
    mean_se = np.sqrt(var / N)
    eprod = prod / N
    cov = (eprod - np.outer(cbar, cbar)) * N / (N - 1)
    cov_se = np.sqrt(np.maximum(prod_sq / N - eprod**2, 0.0) / N)
    std = np.concatenate(keep) if keep is not None else None
    return LqSample(draws, mean, cov, mean_se, cov_se, std)


def random_lqform(n: int, d: int, seed=0, density: float = 0.2, dense: bool = False) -> LqForm:
    """Random instance: sparse CSR (or dense) asymmetric A_j, Gaussian B."""
    rng = make_rng(seed)
    mats = []
    for _ in range(d):
        if dense:
            g = rng.standard_normal((n, n)) / np.sqrt(n)
        else:
            g = sp.random(n, n, density=density, format="csr", random_state=rng,
                          data_rvs=rng.standard_normal)
        mats.append(g)
    return LqForm(mats, rng.standard_normal((n, d)))


@dataclass
class LqCheckResult:
    closed_mean: np.ndarray
    closed_cov: np.ndarray
    sample: LqSample
    mean_z: np.ndarray
    cov_z: np.ndarray
    mean_tol: float
    cov_tol: float

    @property
    def passed(self) -> bool:
        return bool(np.all(np.abs(self.mean_z) <= self.mean_tol)
                    and np.all(np.abs(self.cov_z) <= self.cov_tol))


def lq_check(lq: LqForm, err: ErrorDistribution, draws: int = 2_000_000, seed=0,
             sigma2: float = 1.0, mean_tol: float = 4.0, cov_tol: float = 5.0,
             cov_fn=lq_cov) -> LqCheckResult:
    """Compare closed-form moments with a Monte Carlo run, in MC standard errors."""
    moms = MomentDiagonals.from_distribution(lq.n, err, sigma2)
    mu = lq_mean(lq, moms)
    cv = cov_fn(lq, moms)
    smp = lq_sample(lq, err, draws, seed=seed, sigma2=sigma2)
    with np.errstate(divide="ignore", invalid="ignore"):
        mz = np.where(smp.mean_se > 0, (smp.mean - mu) / smp.mean_se,
                      np.where(np.isclose(smp.mean, mu, atol=1e-12), 0.0, np.inf))
        cz = np.where(smp.cov_se > 0, (smp.cov - cv) / smp.cov_se,
                      np.where(np.isclose(smp.cov, cv, atol=1e-12), 0.0, np.inf))
    return LqCheckResult(mu, cv, smp, mz, cz, mean_tol, cov_tol)
