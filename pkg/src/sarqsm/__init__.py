"""Quasi-score matching estimation of spatial autoregressive models.

The SAR model ``y = lambda W y + X beta + eps`` is fitted by minimizing a
score matching criterion that never touches ``log|det(I - lambda W)|``,
alongside the Gaussian QMLE baseline, plug-in sandwich inference, moment
tools for linear-quadratic forms and a Monte Carlo harness.
"""

from __future__ import annotations

from .inference import (
    AsymptoticCovariances,
    attach_inference,
    improved_sandwich,
    moment_plugins,
    qmle_covariance,
    qsm_sandwich,
    trace_estimator,
    wald_report,
)
from .linalg import ShiftOperator, SparseWeights, log_abs_det_shift
from .lqform import LqForm, MomentDiagonals, lq_cov, lq_mean, lq_sample
from .model import ErrorDistribution, ParamVector, SarData, make_rng, simulate_sar
from .netgen import gen_bernoulli, gen_sbm, read_edge_list, row_normalize, write_edge_list
from .qmle import QmleOptions, fit_qmle
from .qsm import QsmOptions, fit_improved, fit_qsm, fit_qsm_pair
from .report import DegenerateFitError, FitFailure, FitReport
from .simharness import MetricsTable, SimDesign, emit_table, run_design

__version__ = "0.1.0"

__all__ = [
    "AsymptoticCovariances",
    "DegenerateFitError",
    "ErrorDistribution",
    "FitFailure",
    "FitReport",
    "LqForm",
    "MetricsTable",
    "MomentDiagonals",
    "ParamVector",
    "QmleOptions",
    "QsmOptions",
    "SarData",
    "ShiftOperator",
    "SimDesign",
    "SparseWeights",
    "attach_inference",
    "emit_table",
    "fit_improved",
    "fit_qmle",
    "fit_qsm",
    "fit_qsm_pair",
    "gen_bernoulli",
    "gen_sbm",
    "improved_sandwich",
    "log_abs_det_shift",
    "lq_cov",
    "lq_mean",
    "lq_sample",
    "make_rng",
    "moment_plugins",
    "qmle_covariance",
    "qsm_sandwich",
    "read_edge_list",
    "row_normalize",
    "run_design",
    "simulate_sar",
    "trace_estimator",
    "wald_report",
    "write_edge_list",
]
