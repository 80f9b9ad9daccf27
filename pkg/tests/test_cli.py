from __future__ import annotations

import json
import subprocess
import sys
import time

import numpy as np
import pytest

from sarqsm import SarData, attach_inference, fit_qmle, fit_qsm_pair, gen_bernoulli, row_normalize
from sarqsm import ParamVector, SparseWeights, simulate_sar, write_edge_list
from sarqsm.cli import main, read_covariates


def _write_csv(path, header, rows):
    path.write_text(",".join(header) + "\n" + "\n".join(",".join(map(str, r)) for r in rows) + "\n")


@pytest.fixture
def toy(tmp_path):
    (tmp_path / "edges.txt").write_text("0 1\n1 2\n2 0\n0 2\n")
    _write_csv(tmp_path / "cov.csv", ["y"], [[1.0], [2.5], [0.7]])
    return tmp_path


def test_fit_three_node_toy(toy, capsys):
    out = toy / "res"
    code = main(["fit", str(toy / "edges.txt"), str(toy / "cov.csv"), "y", "--out", str(out),
                 "--methods", "qsm"])
    assert code == 0
    rep = json.loads((out / "fit_report.json").read_text())
    lam = rep["fits"][0]["parameters"][0]
    assert lam["name"] == "lambda" and np.isfinite(lam["estimate"])
    assert rep["schema_version"] == 1 and rep["n"] == 3
    assert "lambda" in capsys.readouterr().out


@pytest.fixture
def network_files(tmp_path):
    n = 150
    rng = np.random.default_rng(4)
    adj = gen_bernoulli(n, 6.0 / n, seed=4)
    # a ring guarantees every node has an outgoing edge, so nothing is dropped
    ring = gen_bernoulli(n, 0.0, seed=0).matrix.tolil()
    for i in range(n):
        ring[i, (i + 1) % n] = 1.0
    adj = SparseWeights((adj.matrix + ring.tocsr()).sign())
    W = row_normalize(adj)
    X = np.column_stack([np.ones(n), rng.standard_normal(n), rng.standard_normal(n)])
    data = simulate_sar(ParamVector(0.4, [1.0, 2.0, -1.0], 1.0), X, W, seed=5)
    write_edge_list(adj, tmp_path / "edges.txt")
    region = np.where(X[:, 2] > 0, "north", "south")
    rows = [[repr(float(data.y[i])), repr(float(X[i, 1])), region[i]] for i in range(n)]
    _write_csv(tmp_path / "cov.csv", ["y", "x1", "region"], rows)
    return tmp_path, data, region


def test_fit_round_trip_matches_in_memory(network_files):
    tmp, data, region = network_files
    out = tmp / "res"
    assert main(["fit", str(tmp / "edges.txt"), str(tmp / "cov.csv"), "y", "--out", str(out)]) == 0
    rep = json.loads((out / "fit_report.json").read_text())
    assert rep["n_dropped"] == 0
    assert rep["variables"] == ["lambda", "Intercept", "x1", "region:south", "sigma2"]
    X = np.column_stack([np.ones(data.n), data.X[:, 1], (region == "south").astype(float)])
    mem = SarData(data.y, X, data.W)
    a, b, _ = fit_qsm_pair(mem)
    reports = {r.method: r for r in (fit_qmle(mem), a, b)}
    for r in reports.values():
        attach_inference(r, mem)
    for fit in rep["fits"]:
        r = reports[fit["method"]]
        est = np.array([p["estimate"] for p in fit["parameters"]])
        se = np.array([p["std_error"] for p in fit["parameters"]])
        np.testing.assert_allclose(est, r.theta.as_array(), rtol=1e-12, atol=1e-12)
        np.testing.assert_allclose(se, r.std_errors, rtol=1e-12, atol=1e-12)
    assert (out / "fit_report.txt").read_text().count("p-value") == 3


def test_fit_missing_response_column(toy, capsys):
    code = main(["fit", str(toy / "edges.txt"), str(toy / "cov.csv"), "income"])
    assert code == 2
    assert "'income'" in capsys.readouterr().err


def test_fit_edge_list_error_reports_line(toy, capsys):
    (toy / "edges.txt").write_text("0 1\n1 two\n")
    code = main(["fit", str(toy / "edges.txt"), str(toy / "cov.csv"), "y"])
    assert code == 2
    assert "line 2" in capsys.readouterr().err


def test_fit_isolated_node_policy(tmp_path, capsys):
    (tmp_path / "e.txt").write_text("0 1\n1 2\n2 0\n1 0\n")
    _write_csv(tmp_path / "c.csv", ["y", "x"], [[1, 0.1], [2, 0.5], [0.3, -1], [4, 2]])
    out = tmp_path / "r"
    code = main(["fit", str(tmp_path / "e.txt"), str(tmp_path / "c.csv"), "y", "--isolated",
                 "error", "--out", str(out)])
    assert code == 2 and "no network connections" in capsys.readouterr().err
    code = main(["fit", str(tmp_path / "e.txt"), str(tmp_path / "c.csv"), "y", "--columns", "",
                 "--methods", "qsm", "--out", str(out), "--no-inference"])
    assert code == 0
    rep = json.loads((out / "fit_report.json").read_text())
    assert rep["n_dropped"] == 1 and rep["dropped_nodes"] == [3]


def test_fit_unknown_method(toy, capsys):
    assert main(["fit", str(toy / "edges.txt"), str(toy / "cov.csv"), "y", "--methods", "gmm"]) == 2


def test_read_covariates_categorical(tmp_path):
    _write_csv(tmp_path / "c.csv", ["id", "y", "g"], [["a", 1, "z"], ["b", 2, "x"], ["c", 3, "y"]])
    y, X, names, ids = read_covariates(tmp_path / "c.csv", "y", id_column="id")
    assert names == ["Intercept", "g:y", "g:z"] and ids == ["a", "b", "c"]
    np.testing.assert_array_equal(X, [[1, 0, 1], [1, 0, 0], [1, 1, 0]])


# simulate --------------------------------------------------------------------

def test_simulate_bundled_design_is_fast(tmp_path, monkeypatch, capsys):
    monkeypatch.setenv("SARQSM_RESULTS_DIR", str(tmp_path / "env"))
    t0 = time.perf_counter()
    assert main(["simulate", "table1_n500", "--reps", "1"]) == 0
    assert time.perf_counter() - t0 < 5.0
    for ext in ("md", "csv", "json"):
        assert (tmp_path / "env" / f"table1_n500.{ext}").exists()
    assert "QSM:lambda" in capsys.readouterr().out


def test_simulate_is_deterministic(tmp_path):
    cfg = tmp_path / "d.cfg"
    cfg.write_text("n = 80\nlambda0 = 0.2\nreps = 2\nseed = 3\n")
    main(["simulate", str(cfg), "--out", str(tmp_path / "a")])
    main(["simulate", str(cfg), "--out", str(tmp_path / "b")])
    a = json.loads((tmp_path / "a" / "d.json").read_text())["metrics"]
    b = json.loads((tmp_path / "b" / "d.json").read_text())["metrics"]
    assert a == b


def test_simulate_malformed_key(tmp_path, capsys):
    cfg = tmp_path / "d.cfg"
    cfg.write_text("n = 80\nlambda0 = 0.2\nrepz = 2\n")
    assert main(["simulate", str(cfg)]) == 2
    assert "'repz'" in capsys.readouterr().err


def test_simulate_missing_design(capsys):
    assert main(["simulate", "no_such_design"]) == 2


# lqcheck -----------------------------------------------------------------------

def test_lqcheck_passes(capsys):
    assert main(["lqcheck", "--draws", "2000000"]) == 0
    assert capsys.readouterr().out.strip().endswith("PASS")


def test_lqcheck_zero_quadratic_part(capsys):
    assert main(["lqcheck", "--zero-a", "--draws", "200000"]) == 0


def test_lqcheck_detects_corrupted_covariance(capsys):
    assert main(["lqcheck", "--errors", "mixture", "--corrupt-cov", "--draws", "500000"]) == 1
    assert capsys.readouterr().out.strip().endswith("FAIL")


# bench -------------------------------------------------------------------------

def test_bench_small(tmp_path, capsys):
    assert main(["bench", "--n", "200,400", "--rounds", "2", "--out", str(tmp_path)]) == 0
    res = json.loads((tmp_path / "bench.json").read_text())
    assert [r["n"] for r in res["rows"]] == [200, 400]
    assert "t_M/t_S" in capsys.readouterr().out


def test_bench_bad_sizes(capsys):
    assert main(["bench", "--n", "ten"]) == 2


def test_usage_error_exit_code():
    assert main(["frobnicate"]) == 2


def test_module_entry_point():
    proc = subprocess.run([sys.executable, "-m", "sarqsm", "lqcheck", "--zero-a", "--draws",
                           "20000", "--n", "5", "--d", "1"], capture_output=True, text=True)
    assert proc.returncode == 0 and "PASS" in proc.stdout
