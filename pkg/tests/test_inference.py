from __future__ import annotations

from unittest import mock

import numpy as np
import pytest
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from hypothesis import given, settings
from hypothesis import strategies as st

from sarqsm import (
    ErrorDistribution,
    LqForm,
    MomentDiagonals,
    ParamVector,
    SarData,
    attach_inference,
    fit_qmle,
    fit_qsm_pair,
    improved_sandwich,
    lq_cov,
    moment_plugins,
    qmle_covariance,
    qsm_sandwich,
    simulate_sar,
    trace_estimator,
    wald_report,
)
from sarqsm.inference import InferenceFailure, xi_matrix
from sarqsm.qsm import score_at, score_decomposition

from conftest import random_instance, random_weights
from oracles import likelihood_score_lq, transcribe_blocks

BLOCKS = ("V_S", "Omega_S", "U_S", "V_M", "Omega_M", "V_SM", "Omega_SM", "Xi",
          "sandwich_qsm", "sandwich_improved")


def _mixture_moms(n, s2=1.0):
    return MomentDiagonals.from_distribution(n, ErrorDistribution.mixture(), s2)


def _skewed_moms(n, s2=1.3):
    # nonzero third moment so every Upsilon-3 term is exercised
    return MomentDiagonals.constant(n, s2, 0.7 * s2**1.5, 6.0 * s2**2)


def _compare(ac, ref, rtol=1e-9):
    for name in BLOCKS:
        got, want = getattr(ac, name), ref[name]
        scale = max(np.abs(want).max(), 1e-300)
        err = np.abs(got - want).max() / scale
        assert err < rtol, f"{name}: relative error {err:.2e}"


@pytest.mark.parametrize("seed", range(6))
def test_blocks_match_dense_transcription(seed):
    n = 15 + 5 * seed
    data, th = random_instance(n, seed, p=2 + seed % 2, lam=0.2 + 0.1 * (seed % 3))
    theta = ParamVector(th.lam - 0.05, th.beta + 0.1, 1.3)
    moms = _skewed_moms(n)
    ac = improved_sandwich(data, theta, moms)
    ref = transcribe_blocks(data.W, data.X, theta.lam, theta.beta, theta.sigma2,
                            float(moms.m3[0]), float(moms.m4[0]))
    _compare(ac, ref)


def test_gaussian_moments_zero_the_omega_blocks():
    data, th = random_instance(30, 1)
    moms = MomentDiagonals.from_distribution(30, ErrorDistribution.normal(), th.sigma2)
    ac = improved_sandwich(data, th, moms)
    for name in ("Omega_S", "Omega_M", "Omega_SM"):
        assert np.all(getattr(ac, name) == 0.0), name
    qm = qmle_covariance(data, th, moms)
    np.testing.assert_allclose(qm.sandwich_qmle, np.linalg.inv(qm.V_M), rtol=1e-12)


@pytest.mark.parametrize("seed", range(3))
def test_scores_are_linear_quadratic_forms_with_these_covariances(seed):
    """V + Omega equals the lq covariance of the stacked (-dD, dl) scores at theta0."""
    n = 25
    data, th = random_instance(n, seed)
    moms = _skewed_moms(n, th.sigma2)
    dec = score_decomposition(data, th)
    A_l, B_l = likelihood_score_lq(data.W, data.X, th.lam, th.beta, th.sigma2)
    A = [-a for a in dec.quadratic_matrices()] + A_l
    B = np.hstack([-dec.B, B_l])
    ac = improved_sandwich(data, th, moms)
    np.testing.assert_allclose(lq_cov(LqForm(A, B), moms) / n, ac.V + ac.Omega, rtol=1e-10,
                               atol=1e-12)


def test_expected_hessian_equals_U_S():
    """n U_S is the conditional mean of the Hessian of D_n at theta0.

    Each Hessian entry is a quadratic polynomial in eps, so averaging it
    over eps = +-sigma sqrt(n) e_i (i = 1..n) reproduces the expectation
    exactly.  Hessians come from central differences of the analytic score.
    """
    n = 12
    base, th = random_instance(n, 3)
    xb = base.X @ th.beta
    k = th.p + 2
    h = 1e-5
    H = np.zeros((k, k))
    scale = np.sqrt(th.sigma2 * n)
    for i in range(n):
        for sgn in (1.0, -1.0):
            eps = np.zeros(n)
            eps[i] = sgn * scale
            data = simulate_sar(th, base.X, base.W, eps=eps)
            x0 = th.as_array()
            for j in range(k):
                e = np.zeros(k)
                e[j] = h
                H[:, j] += (score_at(data, ParamVector.from_array(x0 + e))
                            - score_at(data, ParamVector.from_array(x0 - e))) / (2 * h)
    H /= 2 * n
    del xb
    moms = MomentDiagonals.from_distribution(n, ErrorDistribution.normal(), th.sigma2)
    U = qsm_sandwich(base, th, moms).U_S
    np.testing.assert_allclose(0.5 * (H + H.T), n * U, rtol=1e-6, atol=1e-6 * np.abs(n * U).max())


def test_symmetry_and_psd():
    data, _ = random_instance(200, 4)
    a, b, _ = fit_qsm_pair(data)
    ac = improved_sandwich(data, b.theta)
    for name in ("V_S", "U_S", "V_M", "sandwich_qsm", "sandwich_improved"):
        M = getattr(ac, name)
        np.testing.assert_allclose(M, M.T, rtol=0, atol=1e-12 * np.abs(M).max())
    for name in ("sandwich_qsm", "sandwich_improved"):
        assert np.linalg.eigvalsh(getattr(ac, name)).min() >= -1e-10


def test_xi_top_row():
    data, th = random_instance(40, 5)
    ac = improved_sandwich(data, th, _mixture_moms(40))
    k = th.p + 2
    np.testing.assert_allclose(ac.Xi[0, :k], np.linalg.inv(ac.U_S)[0], rtol=1e-12)
    assert np.all(ac.Xi[0, k:] == 0)
    np.testing.assert_allclose(xi_matrix(ac.U_S, ac.V_M), ac.Xi, rtol=1e-12)


def test_xi_singular_vm_fails():
    with pytest.raises(InferenceFailure, match="V_M"):
        xi_matrix(np.eye(3), np.zeros((3, 3)))


def test_stochastic_backend_tracks_dense():
    data, _ = random_instance(400, 6)
    a, b, _ = fit_qsm_pair(data)
    dense = improved_sandwich(data, b.theta)
    stoch = improved_sandwich(data, b.theta, backend="stochastic", probes=400, seed=1)
    assert stoch.backend == "stochastic" and set(stoch.trace_se) >= {"G", "G_F"}
    for k in ("G", "G_F", "GG"):
        assert stoch.trace_se[k] >= 0
    np.testing.assert_allclose(np.sqrt(np.diag(stoch.sandwich_qsm)),
                               np.sqrt(np.diag(dense.sandwich_qsm)), rtol=0.03)
    np.testing.assert_allclose(np.sqrt(np.diag(stoch.sandwich_improved)),
                               np.sqrt(np.diag(dense.sandwich_improved)), rtol=0.03)


def test_unknown_backend():
    data, th = random_instance(20, 1)
    with pytest.raises(ValueError, match="backend"):
        qsm_sandwich(data, th, backend="gpu")


def test_improved_beta2_variance_not_larger():
    for seed in range(3):
        data, _ = random_instance(300, seed)
        a, b, _ = fit_qsm_pair(data)
        plain = qsm_sandwich(data, a.theta).sandwich_qsm
        imp = improved_sandwich(data, b.theta).sandwich_improved
        assert imp[2, 2] <= plain[2, 2] * (1 + 1e-9)


# trace_estimator -----------------------------------------------------------

def test_trace_identity_stochastic_is_exact():
    t = trace_estimator(sp.identity(57), "stochastic", probes=10, seed=2)
    assert t.value == 57 and t.se == 0 and t.probes == 10


def test_trace_zero_diagonal_exact():
    w = random_weights(30, 1)
    assert trace_estimator(w.matrix, "exact_dense").value == 0.0


def test_trace_stochastic_within_three_se():
    w = random_weights(300, 2).matrix
    S = (sp.identity(300) - 0.5 * w).tocsc()
    lu = spla.splu(S)
    P = S @ S.T
    op = spla.LinearOperator((300, 300), matvec=lambda v: P @ (w @ lu.solve(v)),
                             matmat=lambda V: P @ (w @ lu.solve(V)))
    exact = trace_estimator(op, "exact_dense").value
    est = trace_estimator(op, "stochastic", probes=200, seed=3)
    assert abs(est.value - exact) < 3 * est.se


def test_trace_errors():
    with pytest.raises(ValueError, match="square"):
        trace_estimator(np.ones((2, 3)))
    with pytest.raises(ValueError, match="mode"):
        trace_estimator(np.eye(2), "approx")


# wald_report -----------------------------------------------------------------

def test_wald_zero_estimate_has_unit_p():
    se, p, bad = wald_report(ParamVector(0.0, [0.0], 1.0), np.eye(3), 4)
    assert p[0] == 1.0 and p[1] == 1.0 and bad == []
    np.testing.assert_allclose(se, 0.5)


@pytest.mark.parametrize("z,p", [(1.959963984540054, 0.05), (3.89, 1.0e-4)])
def test_wald_normal_quantiles(z, p):
    _, pv, _ = wald_report(ParamVector(z, [0.0], 1.0), np.eye(3), 1)
    assert pv[0] == pytest.approx(p, rel=0.01)


def test_wald_flags_negative_variance():
    se, p, bad = wald_report(ParamVector(0.3, [1.0], 1.0), np.diag([1.0, -1.0, 1.0]), 10)
    assert bad == [1] and np.isnan(se[1]) and np.isnan(p[1])


# moment plug-ins ---------------------------------------------------------------

def test_moment_plugins_constant_residual(rng):
    n = 20
    X = np.column_stack([np.ones(n), rng.standard_normal(n)])
    th = ParamVector(0.4, [1.0, -1.0], 0.64)
    data = simulate_sar(th, X, random_weights(n, 1), eps=np.full(n, 0.8))
    m = moment_plugins(data, th)
    assert m.m3[0] == pytest.approx(0.8**3, rel=1e-10)
    assert m.m4[0] == pytest.approx(0.8**4, rel=1e-10)
    assert np.all(m.m2 == 0.64)


def test_moment_plugins_gaussian_large_n():
    data, th = random_instance(50_000, 2, degree=5)
    m = moment_plugins(data, th)
    assert abs(m.m3[0]) < 0.05
    assert m.m4[0] / th.sigma2**2 == pytest.approx(3.0, abs=0.1)


def test_moment_plugins_mixture_kurtosis():
    n = 200_000
    data, th = random_instance(n, 3, err="mixture", degree=5)
    m = moment_plugins(data, th)
    target = 0.9 * 3 * (5 / 9) ** 2 + 0.1 * 3 * 25
    # standard error of mean(e^4): sqrt(E e^8 - (E e^4)^2) / sqrt(n)
    e8 = 0.9 * 105 * (5 / 9) ** 4 + 0.1 * 105 * 5**4
    assert abs(m.m4[0] - target) < 4 * np.sqrt((e8 - target**2) / n)


# attach_inference --------------------------------------------------------------

def test_attach_inference_all_methods():
    data, _ = random_instance(150, 7)
    a, b, _ = fit_qsm_pair(data)
    c = fit_qmle(data)
    for rep in (a, b, c):
        attach_inference(rep, data)
        assert rep.cov.shape == (4, 4)
        np.testing.assert_allclose(rep.std_errors, np.sqrt(np.diag(rep.cov) / 150))
        assert np.all((rep.p_values >= 0) & (rep.p_values <= 1))
        assert rep.diagnostics["inference_backend"] == "dense"


def test_attach_inference_keeps_estimates_on_failure():
    data, _ = random_instance(50, 8)
    a, _, _ = fit_qsm_pair(data)
    est = a.theta.as_array().copy()
    with mock.patch("sarqsm.inference.qsm_sandwich", side_effect=InferenceFailure("U_S is singular")):
        attach_inference(a, data)
    assert a.cov is None and np.all(np.isnan(a.std_errors))
    assert "U_S" in a.diagnostics["inference_error"]
    np.testing.assert_array_equal(a.theta.as_array(), est)


@settings(max_examples=10, deadline=None)
@given(seed=st.integers(0, 10**6), lam=st.floats(-0.8, 0.8))
def test_sandwich_is_symmetric_property(seed, lam):
    data, th = random_instance(30, seed, lam=lam)
    ac = improved_sandwich(data, th, _mixture_moms(30))
    for M in (ac.V_S, ac.U_S, ac.sandwich_qsm, ac.sandwich_improved):
        np.testing.assert_allclose(M, M.T, rtol=0, atol=1e-12 * np.abs(M).max())
