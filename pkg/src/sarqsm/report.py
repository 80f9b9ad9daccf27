"""Fit results shared by all estimators."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Literal

import numpy as np

from .model import ParamVector

__all__ = ["FitReport", "DegenerateFitError", "FitFailure"]


class DegenerateFitError(ArithmeticError):
    """A profiled quantity is undefined at some lambda (rank loss, zero denominator)."""

    def __init__(self, msg: str, lam: float | None = None):
        self.lam = lam
        super().__init__(msg if lam is None else f"{msg} (lambda={lam!r})")


class FitFailure(RuntimeError):
    """No admissible lambda was found over the parameter space."""


@dataclass
class FitReport:
    """Estimates plus (optionally) their asymptotic covariance.

    ``cov`` is the covariance of sqrt(n) (theta_hat - theta0); standard errors
    are ``sqrt(diag(cov) / n)``.  It stays ``None`` when inference was not
    requested, in which case ``std_errors`` and ``p_values`` are NaN.
    """

    method: Literal["qsm", "qsm_improved", "qmle"]
    theta: ParamVector
    n: int
    timing_ms: float = 0.0
    cov: np.ndarray | None = None
    std_errors: np.ndarray | None = None
    p_values: np.ndarray | None = None
    diagnostics: dict = field(default_factory=dict)

    def __post_init__(self):
        k = self.theta.p + 2
        if self.std_errors is None:
            self.std_errors = np.full(k, np.nan)
        if self.p_values is None:
            self.p_values = np.full(k, np.nan)

    @property
    def lam(self) -> float:
        return self.theta.lam

    @property
    def beta(self) -> np.ndarray:
        return self.theta.beta

    @property
    def sigma2(self) -> float:
        return self.theta.sigma2

    def param_names(self, x_names=None) -> list[str]:
        p = self.theta.p
        x_names = list(x_names) if x_names is not None else [f"beta{j + 1}" for j in range(p)]
        return ["lambda", *x_names, "sigma2"]

    def to_dict(self, x_names=None) -> dict:
        names = self.param_names(x_names)
        est = self.theta.as_array()
        return {
            "method": self.method,
            "n": self.n,
            "timing_ms": self.timing_ms,
            "parameters": [
                {"name": nm, "estimate": float(e), "std_error": _num(s), "p_value": _num(pv)}
                for nm, e, s, pv in zip(names, est, self.std_errors, self.p_values)
            ],
            "cov": None if self.cov is None else np.asarray(self.cov).tolist(),
            "diagnostics": {k: _jsonable(v) for k, v in self.diagnostics.items()},
        }


def _num(x):
    x = float(x)
    return None if not np.isfinite(x) else x


def _jsonable(v):
    if dataclasses.is_dataclass(v) and not isinstance(v, type):
        return {f.name: _jsonable(getattr(v, f.name)) for f in dataclasses.fields(v)}
    if isinstance(v, dict):
        return {str(k): _jsonable(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_jsonable(x) for x in v]
    if isinstance(v, np.ndarray):
        return _jsonable(v.tolist())
    if isinstance(v, (np.floating, np.integer)):
        v = v.item()
    if isinstance(v, float) and not np.isfinite(v):
        return None
    return v
