from __future__ import annotations

import numpy as np
import pytest

from sarqsm import ErrorDistribution, ParamVector, SparseWeights, gen_bernoulli, row_normalize, simulate_sar
from sarqsm.model import make_rng


def random_weights(n: int, seed=0, degree: float = 3.0) -> SparseWeights:
    """Row-normalized directed Bernoulli network with the given mean degree."""
    return row_normalize(gen_bernoulli(n, min(1.0, degree / (n - 1)), seed=seed))


def random_instance(n: int, seed=0, lam: float = 0.3, p: int = 2, err: str = "normal",
                    degree: float = 3.0, sigma2: float = 1.0):
    """(data, theta0) drawn from the model with an intercept plus normal regressors."""
    ss = np.random.SeedSequence([n, seed, p])
    s_w, s_x, s_b, s_e = ss.spawn(4)
    W = random_weights(n, s_w, degree)
    rng = make_rng(s_x)
    X = np.column_stack([np.ones(n), rng.standard_normal((n, p - 1))])
    beta = make_rng(s_b).uniform(-2, 2, p)
    theta0 = ParamVector(lam, beta, sigma2)
    dist = ErrorDistribution.normal() if err == "normal" else ErrorDistribution.mixture()
    return simulate_sar(theta0, X, W, dist, seed=s_e), theta0


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# acceptance reporting ------------------------------------------------------

ACCEPTANCE_LINES: dict = {}


@pytest.fixture
def acceptance_log(request):
    """Record one PASS/FAIL line per acceptance criterion.

    Lines are echoed immediately and repeated, in criterion order, in the
    terminal summary so they survive output capture.
    """
    def log(criterion: int, ok: bool, detail: str) -> bool:
        line = f"ACCEPTANCE {criterion}: {'PASS' if ok else 'FAIL'}  {detail}"
        ACCEPTANCE_LINES[criterion] = line
        capman = request.config.pluginmanager.getplugin("capturemanager")
        with capman.global_and_fixture_disabled():
            print("\n" + line, flush=True)
        return ok

    return log


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[k])
