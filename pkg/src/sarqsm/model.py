"""SAR data containers and the data-generating process y = lam0 W y + X beta0 + eps."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Literal

import numpy as np

from .linalg import DEFAULT_LAMBDA_BOUNDS, ShiftOperator, SparseWeights, apply_shift, solve_shift

__all__ = [
    "SarData",
    "ParamVector",
    "ErrorDistribution",
    "make_rng",
    "simulate_sar",
    "residuals",
]


def make_rng(seed) -> np.random.Generator:
    """Seeded generator on the counter-based Philox bit generator.

    All randomness in the package flows through this function so a given
    integer seed reproduces the same stream on every platform.
    """
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.Generator(np.random.Philox(seed))


@dataclass(frozen=True, eq=False)
class SarData:
    """One estimation problem: response ``y``, regressors ``X`` and weights ``W``."""

    y: np.ndarray
    X: np.ndarray
    W: SparseWeights

    def __post_init__(self):
        y = np.ascontiguousarray(self.y, dtype=float).ravel()
        X = np.asarray(self.X, dtype=float)
        if X.ndim == 1:
            X = X[:, None]
        X = np.ascontiguousarray(X)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "X", X)
        n = self.W.n
        if y.shape[0] != n or X.shape[0] != n:
            raise ValueError(f"inconsistent sizes: len(y)={y.shape[0]}, X has {X.shape[0]} rows, W is {n}x{n}")
        if X.shape[1] > n:
            raise ValueError(f"need p <= n, got p={X.shape[1]}, n={n}")
        if not (np.all(np.isfinite(y)) and np.all(np.isfinite(X))):
            raise ValueError("y and X must be finite")

    @property
    def n(self) -> int:
        return self.W.n

    @property
    def p(self) -> int:
        return self.X.shape[1]

    def check_rank(self) -> None:
        """Raise ``np.linalg.LinAlgError`` unless p < n and X has full column rank.

        Fitting needs both; construction only requires p <= n so that the
        objective functions can be evaluated on tiny examples.
        """
        if self.p >= self.n:
            raise np.linalg.LinAlgError(f"need p < n to fit, got p={self.p}, n={self.n}")
        if self.p == 0:
            return
        r = np.linalg.qr(self.X, mode="r")
        d = np.abs(np.diag(r))
        if d.min() <= d.max() * max(self.X.shape) * np.finfo(float).eps:
            raise np.linalg.LinAlgError("regressor matrix X is rank deficient")


@dataclass(frozen=True, eq=False)
class ParamVector:
    """theta = (lambda, beta', sigma^2)'."""

    lam: float
    beta: np.ndarray
    sigma2: float

    def __post_init__(self):
        object.__setattr__(self, "beta", np.asarray(self.beta, dtype=float).ravel())
        object.__setattr__(self, "lam", float(self.lam))
        object.__setattr__(self, "sigma2", float(self.sigma2))
        if not self.sigma2 > 0:
            raise ValueError(f"sigma2 must be positive, got {self.sigma2}")

    def __eq__(self, other) -> bool:
        if not isinstance(other, ParamVector):
            return NotImplemented
        return np.array_equal(self.as_array(), other.as_array())

    __hash__ = None

    @property
    def p(self) -> int:
        return self.beta.shape[0]

    def as_array(self) -> np.ndarray:
        return np.concatenate([[self.lam], self.beta, [self.sigma2]])

    @classmethod
    def from_array(cls, theta) -> "ParamVector":
        theta = np.asarray(theta, dtype=float)
        return cls(theta[0], theta[1:-1], theta[-1])

    def check_bounds(self, bounds=DEFAULT_LAMBDA_BOUNDS) -> None:
        lo, hi = bounds
        if not lo <= self.lam <= hi:
            raise ValueError(f"lambda={self.lam} outside parameter space [{lo}, {hi}]")


@dataclass(frozen=True)
class ErrorDistribution:
    """Law of the unit-variance, mean-zero error draws.

    ``mixture_normal`` defaults to 0.9 N(0, 5/9) + 0.1 N(0, 5), whose variance
    is exactly one.  ``custom`` takes ``sampler(rng, size) -> ndarray`` that
    must itself be mean-zero with unit variance.
    """

    kind: Literal["standard_normal", "mixture_normal", "custom"] = "standard_normal"
    weights: tuple = (0.9, 0.1)
    variances: tuple = (5.0 / 9.0, 5.0)
    sampler: Callable | None = field(default=None, compare=False)

    def __post_init__(self):
        if self.kind == "mixture_normal":
            if len(self.weights) != len(self.variances):
                raise ValueError("mixture weights and variances differ in length")
            if abs(sum(self.weights) - 1.0) > 1e-12:
                raise ValueError("mixture weights must sum to one")
        elif self.kind == "custom" and self.sampler is None:
            raise ValueError("custom error distribution needs a sampler")
        elif self.kind not in ("standard_normal", "mixture_normal", "custom"):
            raise ValueError(f"unknown error distribution {self.kind!r}")

    @classmethod
    def normal(cls) -> "ErrorDistribution":
        return cls("standard_normal")

    @classmethod
    def mixture(cls) -> "ErrorDistribution":
        return cls("mixture_normal")

    @property
    def variance(self) -> float:
        if self.kind == "mixture_normal":
            return float(np.dot(self.weights, self.variances))
        return 1.0

    def moment(self, k: int) -> float:
        """Raw moment E[eps^k] for the built-in laws (k = 2, 3, 4)."""
        normal = {2: 1.0, 3: 0.0, 4: 3.0}
        if self.kind == "standard_normal":
            return normal[k]
        if self.kind == "mixture_normal":
            return float(sum(w * normal[k] * v ** (k / 2) for w, v in zip(self.weights, self.variances)))
        raise ValueError("moments of a custom distribution are unknown")

    def sample(self, rng: np.random.Generator, size) -> np.ndarray:
        if self.kind == "standard_normal":
            return rng.standard_normal(size)
        if self.kind == "mixture_normal":
            comp = rng.choice(len(self.weights), size=size, p=self.weights)
            sd = np.sqrt(np.asarray(self.variances))[comp]
            return sd * rng.standard_normal(size)
        return np.asarray(self.sampler(rng, size), dtype=float)


def simulate_sar(theta0: ParamVector, X, W: SparseWeights, err: ErrorDistribution | None = None,
                 seed=0, eps: np.ndarray | None = None) -> SarData:
    """Draw ``y = S(lam0)^{-1} (X beta0 + sigma0 * e)`` with unit-variance ``e``.

    Pass ``eps`` (already on the sigma0 scale) to bypass the draw.
    """
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    if eps is None:
        err = err or ErrorDistribution()
        eps = np.sqrt(theta0.sigma2) * err.sample(make_rng(seed), W.n)
    rhs = X @ theta0.beta + eps
    y = solve_shift(ShiftOperator(W, theta0.lam), rhs, method="auto", tol=1e-13)
    return SarData(y, X, W)


def residuals(data: SarData, theta: ParamVector) -> np.ndarray:
    """eps_hat = S(lam) y - X beta."""
    return apply_shift(ShiftOperator(data.W, theta.lam), data.y) - data.X @ theta.beta
