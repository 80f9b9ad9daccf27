from __future__ import annotations

import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings
from hypothesis import strategies as st

from sarqsm import ErrorDistribution, LqForm, MomentDiagonals, lq_cov, lq_mean, lq_sample
from sarqsm.lqform import lq_check, random_lqform, symmetrize


def dense_cov_oracle(A, B, m2, m3, m4):
    """Covariance written with explicit diagonal matrices and Hadamard traces."""
    A = [a.toarray() if sp.issparse(a) else a for a in A]
    U2, U3, U4 = np.diag(m2), np.diag(m3), np.diag(m4 - 3 * m2**2)
    n, d = B.shape
    one = np.ones((n, 1))
    out = np.empty((d, d))
    for j in range(d):
        for k in range(d):
            bj = B[:, [j]]
            bk = B[:, [k]]
            cross = np.trace((bj @ one.T) * U3 * A[k]) + np.trace((bk @ one.T) * U3 * A[j])
            out[j, k] = (2 * np.trace(U2 @ A[j] @ U2 @ A[k]) + (B.T @ U2 @ B)[j, k]
                         + np.trace(A[j] * U4 * A[k]) + cross)
    return out


def random_moments(n, seed):
    rng = np.random.default_rng(seed)
    m2 = rng.uniform(0.5, 2.0, n)
    m3 = rng.normal(0, 1, n)
    m4 = m2**2 * rng.uniform(1.5, 8.0, n)
    return MomentDiagonals(m2, m3, m4)


def test_mean_zero_matrices():
    lq = LqForm([np.zeros((5, 5))] * 2, np.ones((5, 2)))
    np.testing.assert_array_equal(lq_mean(lq, MomentDiagonals.constant(5, 1.0, 0.0, 3.0)), 0.0)


def test_mean_identity():
    lq = LqForm([np.eye(7)])
    assert lq_mean(lq, MomentDiagonals.constant(7, 2.5, 0.0, 3 * 2.5**2))[0] == pytest.approx(17.5)


def test_cov_linear_only_gaussian(rng):
    b = rng.standard_normal((9, 1))
    lq = LqForm([np.zeros((9, 9))], b)
    s2 = 1.7
    cov = lq_cov(lq, MomentDiagonals.constant(9, s2, 0.0, 3 * s2**2))
    assert cov[0, 0] == pytest.approx(s2 * float(b[:, 0] @ b[:, 0]), rel=1e-14)


def test_cov_quadratic_only_gaussian(rng):
    a = symmetrize(rng.standard_normal((9, 9)))
    s2 = 0.6
    cov = lq_cov(LqForm([a]), MomentDiagonals.constant(9, s2, 0.0, 3 * s2**2))
    assert cov[0, 0] == pytest.approx(2 * s2**2 * np.trace(a @ a), rel=1e-13)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10**6), n=st.integers(2, 50), d=st.integers(1, 4))
def test_cov_matches_dense_oracle(seed, n, d):
    lq = random_lqform(n, d, seed=seed, density=0.3)
    moms = random_moments(n, seed + 1)
    expect = dense_cov_oracle(lq.A, lq.B, moms.m2, moms.m3, moms.m4)
    got = lq_cov(lq, moms)
    np.testing.assert_allclose(got, expect, rtol=1e-10, atol=1e-10 * np.abs(expect).max())
    np.testing.assert_allclose(lq_mean(lq, moms), [moms.m2 @ a.diagonal() for a in lq.A], rtol=1e-12)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10**6), n=st.integers(2, 30))
def test_symmetrization_invariance(seed, n):
    rng = np.random.default_rng(seed)
    G = [rng.standard_normal((n, n)) for _ in range(3)]
    B = rng.standard_normal((n, 3))
    moms = random_moments(n, seed)
    raw, sym = LqForm(G, B), LqForm([symmetrize(g) for g in G], B)
    np.testing.assert_allclose(lq_mean(raw, moms), lq_mean(sym, moms), rtol=1e-13)
    np.testing.assert_allclose(lq_cov(raw, moms), lq_cov(sym, moms), rtol=1e-13)
    e = rng.standard_normal((4, n))
    direct = np.array([[x @ g @ x for g in G] for x in e]) + e @ B
    np.testing.assert_allclose(raw.evaluate(e), direct, rtol=1e-12, atol=1e-12)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10**6), n=st.integers(2, 30), s2=st.floats(0.1, 10.0))
def test_gaussian_degeneracy(seed, n, s2):
    lq = random_lqform(n, 3, seed=seed, dense=True)
    moms = MomentDiagonals.constant(n, s2, 0.0, 3 * s2**2)
    assert np.all(moms.ups3 == 0) and np.all(moms.ups4 == 0)
    quad = np.array([[2 * s2**2 * np.trace(a @ b) for b in lq.A] for a in lq.A])
    np.testing.assert_allclose(lq_cov(lq, moms), quad + s2 * lq.B.T @ lq.B, rtol=1e-11)


def test_sparse_and_dense_inputs_agree():
    lq = random_lqform(40, 3, seed=4)
    moms = random_moments(40, 4)
    sparse = LqForm([sp.csr_matrix(a) for a in lq.A], lq.B)
    lq = LqForm([a.toarray() for a in lq.A], lq.B)
    np.testing.assert_allclose(lq_cov(sparse, moms), lq_cov(lq, moms), rtol=1e-12)
    np.testing.assert_allclose(lq_mean(sparse, moms), lq_mean(lq, moms), rtol=1e-12)
    e = np.random.default_rng(0).standard_normal((3, 40))
    np.testing.assert_allclose(sparse.evaluate(e), lq.evaluate(e), rtol=1e-12)


def test_moment_diagonal_validation():
    with pytest.raises(ValueError, match="positive"):
        MomentDiagonals.constant(3, 0.0, 0.0, 1.0)
    with pytest.raises(ValueError, match="m4 >= m2"):
        MomentDiagonals.constant(3, 2.0, 0.0, 3.0)


def test_moments_from_mixture():
    m = MomentDiagonals.from_distribution(4, ErrorDistribution.mixture(), sigma2=2.0)
    np.testing.assert_allclose(m.m2, 2.0)
    np.testing.assert_allclose(m.m4 / m.m2**2, 0.9 * 3 * (5 / 9) ** 2 + 0.1 * 75)


def test_lqform_validation():
    with pytest.raises(ValueError):
        LqForm([])
    with pytest.raises(ValueError):
        LqForm([np.eye(3), np.eye(4)])


@pytest.mark.parametrize("err", ["normal", "mixture"])
def test_monte_carlo_agreement(err):
    dist = ErrorDistribution.normal() if err == "normal" else ErrorDistribution.mixture()
    res = lq_check(random_lqform(30, 3, seed=11), dist, draws=300_000, seed=5, sigma2=1.5)
    assert res.passed, (res.mean_z, res.cov_z)


def test_monte_carlo_flags_missing_fourth_cumulant():
    def wrong(lq, moms):
        diags = np.column_stack([a.diagonal() for a in lq.A])
        return lq_cov(lq, moms) - diags.T @ (moms.ups4[:, None] * diags)

    res = lq_check(random_lqform(30, 3, seed=11), ErrorDistribution.mixture(), draws=300_000,
                   seed=5, cov_fn=wrong)
    assert not res.passed


def test_sample_linear_form_is_exactly_normal():
    n = 50
    b = np.zeros((n, 1))
    b[0] = 1.0
    lq = LqForm([np.zeros((n, n))], b)
    smp = lq_sample(lq, ErrorDistribution.normal(), 200_000, seed=3, keep_standardized=True)
    z = smp.standardized[:, 0] * np.sqrt(n)
    assert abs(z.mean()) < 4 / np.sqrt(200_000)
    assert abs(z.var() - 1) < 4 * np.sqrt(2 / 200_000)
    assert abs(smp.standardized_skewness()[0]) < 4 * np.sqrt(6 / 200_000)
    assert abs(smp.standardized_excess_kurtosis()[0]) < 4 * np.sqrt(24 / 200_000)


def test_sample_standard_errors_are_consistent():
    lq = random_lqform(20, 2, seed=2)
    a = lq_sample(lq, ErrorDistribution.normal(), 20_000, seed=1, chunk=3000)
    b = lq_sample(lq, ErrorDistribution.normal(), 20_000, seed=1, chunk=20_000)
    np.testing.assert_allclose(a.mean, b.mean, rtol=1e-12)
    np.testing.assert_allclose(a.cov, b.cov, rtol=1e-9)
    assert np.all(a.mean_se > 0) and np.all(a.cov_se > 0)


def test_clt_skewness_at_n2000():
    n = 2000
    lq = random_lqform(n, 2, seed=8, density=2e-3)
    smp = lq_sample(lq, ErrorDistribution.normal(), 100_000, seed=9, chunk=5000,
                    keep_standardized=True)
    assert np.all(np.abs(smp.standardized_skewness()) < 0.1)
