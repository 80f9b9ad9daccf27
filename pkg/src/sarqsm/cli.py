"""Command-line interface: ``sarqsm {fit, simulate, lqcheck, bench}``.

Exit codes: 0 success, 1 numerical or fit failure, 2 input or configuration
error.  The default results directory is taken from ``SARQSM_RESULTS_DIR``
(falling back to ``./results``).
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .inference import attach_inference
from .linalg import SparseWeights
from .lqform import LqForm, lq_check, lq_cov, random_lqform
from .model import ErrorDistribution, SarData
from .netgen import EdgeListError, read_edge_list, row_normalize
from .qmle import fit_qmle
from .qsm import fit_qsm_pair
from .report import DegenerateFitError, FitFailure
from .simharness import (
    ESTIMATORS,
    ConfigError,
    emit_bench,
    emit_table,
    load_design,
    run_bench,
    run_design,
)

SCHEMA_VERSION = 1
RESULTS_ENV = "SARQSM_RESULTS_DIR"
EXIT_OK, EXIT_FIT, EXIT_INPUT = 0, 1, 2

log = logging.getLogger("sarqsm")


class InputError(ValueError):
    """Bad user input (files, columns, flags)."""


def _results_dir(arg) -> Path:
    return Path(arg or os.environ.get(RESULTS_ENV) or "results")


# covariates -----------------------------------------------------------------


def _is_number(s: str) -> bool:
    try:
        float(s)
    except ValueError:
        return False
    return True


def read_covariates(path, response: str, id_column: str | None = None,
                    columns: list | None = None, intercept: bool = True):
    """Read a comma-separated table with a header row.

    Returns ``(y, X, names, ids)``.  Numeric columns enter as they are;
    columns with any non-numeric entry become 0/1 indicators of each level
    except the first in sorted order, named ``column:level``.
    """
    path = Path(path)
    try:
        with path.open(newline="") as fh:
            rows = list(csv.reader(fh))
    except OSError as exc:
        raise InputError(f"cannot read covariates: {exc}") from None
    rows = [r for r in rows if any(c.strip() for c in r)]
    if not rows:
        raise InputError(f"{path}: empty covariate file")
    header = [h.strip() for h in rows[0]]
    body = rows[1:]
    for k, r in enumerate(body, start=2):
        if len(r) != len(header):
            raise InputError(f"{path}: line {k} has {len(r)} fields, header has {len(header)}")
    if response not in header:
        raise InputError(f"response column {response!r} not found in {path} (columns: {header})")
    if id_column is not None and id_column not in header:
        raise InputError(f"id column {id_column!r} not found in {path}")
    col = {h: [r[i].strip() for r in body] for i, h in enumerate(header)}
    yraw = col[response]
    bad = [k for k, v in enumerate(yraw, start=2) if not _is_number(v)]
    if bad:
        raise InputError(f"{path}: response {response!r} is not numeric (line {bad[0]})")
    y = np.array([float(v) for v in yraw])
    use = columns if columns is not None else [h for h in header if h not in (response, id_column)]
    for h in use:
        if h not in header:
            raise InputError(f"covariate column {h!r} not found in {path}")
    n = len(body)
    mats, names = [], []
    if intercept:
        mats.append(np.ones((n, 1)))
        names.append("Intercept")
    for h in use:
        vals = col[h]
        if all(_is_number(v) for v in vals):
            mats.append(np.array([float(v) for v in vals])[:, None])
            names.append(h)
        else:
            levels = sorted(set(vals))
            for lev in levels[1:]:
                mats.append(np.array([v == lev for v in vals], dtype=float)[:, None])
                names.append(f"{h}:{lev}")
    X = np.hstack(mats) if mats else np.empty((n, 0))
    ids = col[id_column] if id_column is not None else None
    return y, X, names, ids


def _drop_isolated(adj):
    """Repeatedly remove nodes with no outgoing edges; returns (adj, kept index)."""
    keep = np.arange(adj.n)
    m = adj.matrix
    while True:
        deg = np.diff(m.indptr)
        ok = deg > 0
        if ok.all():
            return m, keep
        keep = keep[ok]
        m = m[ok][:, ok].tocsr()
        if m.shape[0] == 0:
            return m, keep


def _fmt_p(p):
    if p is None or not np.isfinite(p):
        return "NA"
    return "<1e-4" if p < 1e-4 else f"{p:.4f}"


def format_fit_table(reports, names) -> str:
    """Estimates with standard errors in parentheses and p-values, one column pair per method."""
    labels = ["lambda", *names, "sigma2"]
    heads = [r.method for r in reports]
    width = max(len(s) for s in labels) + 2
    lines = ["".ljust(width) + "".join(f"{h:>28}{'p-value':>10}" for h in heads)]
    for k, lab in enumerate(labels):
        cells = []
        for r in reports:
            est = r.theta.as_array()[k]
            se = r.std_errors[k]
            se_s = "NA" if not np.isfinite(se) else f"{se:.4f}"
            cells.append(f"{f'{est:.4f} ({se_s})':>28}{_fmt_p(r.p_values[k]):>10}")
        lines.append(lab.ljust(width) + "".join(cells))
    lines.append("")
    lines.append("time (ms): " + ", ".join(f"{r.method}={r.timing_ms:.2f}" for r in reports))
    return "\n".join(lines) + "\n"


def _column_list(arg):
    """``--columns`` value: None means all columns, an empty string means none."""
    if arg is None:
        return None
    return [c.strip() for c in arg.split(",") if c.strip()]


def cmd_fit(args) -> int:
    y, X, names, ids = read_covariates(args.covariates, args.response, args.id_column,
                                       _column_list(args.columns),
                                       intercept=not args.no_intercept)
    n = len(y)
    adj = read_edge_list(Path(args.edges), one_based=args.one_based,
                         n=None if ids is not None else n, node_ids=ids)
    m, keep = _drop_isolated(adj)
    dropped = np.setdiff1d(np.arange(n), keep)
    if dropped.size and args.isolated == "error":
        raise InputError(f"{dropped.size} node(s) have no network connections "
                         f"(first: {ids[dropped[0]] if ids else int(dropped[0]) + args.one_based})")
    y, X = y[keep], X[keep]
    if len(y) <= X.shape[1] + 1:
        raise InputError(f"only {len(y)} connected node(s) left for {X.shape[1]} regressor(s)")
    W = row_normalize(SparseWeights(m))
    data = SarData(y, X, W)
    if np.linalg.matrix_rank(X) < X.shape[1]:
        raise InputError("covariate matrix is rank deficient")
    methods = [s.strip() for s in args.methods.split(",")]
    unknown = [s for s in methods if s not in ESTIMATORS]
    if unknown:
        raise InputError(f"unknown method(s) {unknown}; choose from {list(ESTIMATORS)}")
    reports = []
    if {"qsm", "qsm_improved"} & set(methods):
        a, b, _ = fit_qsm_pair(data)
        reports += [r for r in (a, b) if r.method in methods]
    if "qmle" in methods:
        reports.insert(0, fit_qmle(data))
    if not args.no_inference:
        for r in reports:
            attach_inference(r, data, seed=args.seed)
    payload = {
        "schema_version": SCHEMA_VERSION,
        "n": data.n,
        "n_dropped": int(dropped.size),
        "dropped_nodes": [ids[i] for i in dropped] if ids else (dropped + args.one_based).tolist(),
        "variables": ["lambda", *names, "sigma2"],
        "fits": [r.to_dict(names) for r in reports],
    }
    text = format_fit_table(reports, names)
    out = _results_dir(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "fit_report.json").write_text(json.dumps(payload, indent=2))
    (out / "fit_report.txt").write_text(text)
    sys.stdout.write(text)
    return EXIT_OK


def _design_path(name) -> Path:
    """A design file path, or the name of a design bundled with the package."""
    path = Path(name)
    if path.exists():
        return path
    bundled = Path(__file__).parent / "designs" / (path.name if path.suffix else f"{path.name}.cfg")
    if bundled.exists():
        return bundled
    raise InputError(f"design file {name!r} not found")


def cmd_simulate(args) -> int:
    path = _design_path(args.design)
    design = load_design(path)
    if args.reps is not None:
        design = replace(design, reps=args.reps)
    progress = None
    if args.verbose:
        def progress(i, total):
            if i % max(1, total // 10) == 0:
                log.info("replication %d/%d", i, total)
    table = run_design(design, n_jobs=args.threads, progress=progress)
    out = _results_dir(args.out)
    out.mkdir(parents=True, exist_ok=True)
    stem = path.stem
    for fmt, ext in (("markdown", "md"), ("csv", "csv"), ("json", "json")):
        (out / f"{stem}.{ext}").write_text(emit_table(table, fmt))
    sys.stdout.write(emit_table(table, args.format))
    return EXIT_OK


def _corrupted_cov(lq, moms):
    """Deliberately wrong covariance (drops the fourth-cumulant term); test hook."""
    diags = np.column_stack([a.diagonal() for a in lq.A])
    return lq_cov(lq, moms) - diags.T @ (moms.ups4[:, None] * diags)


def cmd_lqcheck(args) -> int:
    err = ErrorDistribution.normal() if args.errors == "normal" else ErrorDistribution.mixture()
    if args.zero_a:
        b = np.zeros((args.n, args.d))
        b[0, :] = 1.0
        lq = LqForm([np.zeros((args.n, args.n))] * args.d, b)
    else:
        lq = random_lqform(args.n, args.d, seed=args.seed)
    cov_fn = _corrupted_cov if args.corrupt_cov else lq_cov
    res = lq_check(lq, err, draws=args.draws, seed=args.seed + 1, cov_fn=cov_fn)
    ok_mean = np.abs(res.mean_z) <= res.mean_tol
    ok_cov = np.abs(res.cov_z) <= res.cov_tol
    for j in range(lq.d):
        print(f"mean[{j}]  closed={res.closed_mean[j]: .6f}  mc={res.sample.mean[j]: .6f}  "
              f"z={res.mean_z[j]: .2f}  {'PASS' if ok_mean[j] else 'FAIL'}")
    for j in range(lq.d):
        for k in range(j, lq.d):
            print(f"cov[{j},{k}]  closed={res.closed_cov[j, k]: .6f}  mc={res.sample.cov[j, k]: .6f}  "
                  f"z={res.cov_z[j, k]: .2f}  {'PASS' if ok_cov[j, k] else 'FAIL'}")
    print("PASS" if res.passed else "FAIL")
    return EXIT_OK if res.passed else EXIT_FIT


def cmd_bench(args) -> int:
    try:
        ns = [int(float(s)) for s in args.n.split(",")]
    except ValueError:
        raise InputError(f"--n must be a comma-separated list of sizes, got {args.n!r}") from None
    res = run_bench(ns, weights_kind=args.weights, seed=args.seed, qmle=not args.no_qmle,
                    rounds=args.rounds)
    sys.stdout.write(emit_bench(res, args.format))
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "bench.json").write_text(emit_bench(res, "json"))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="sarqsm", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    f = sub.add_parser("fit", help="fit a SAR model to an edge list and a covariate table")
    f.add_argument("edges", help="edge list, one 'i j' pair per line, '#' comments")
    f.add_argument("covariates", help="comma-separated covariate table with a header row")
    f.add_argument("response", help="name of the response column")
    f.add_argument("--id-column", help="column holding node labels used in the edge list")
    f.add_argument("--columns", help="comma-separated covariate columns (default: all others)")
    f.add_argument("--no-intercept", action="store_true")
    f.add_argument("--one-based", action="store_true", help="edge list indices start at 1")
    f.add_argument("--isolated", choices=("drop", "error"), default="drop",
                   help="nodes without connections: drop them (default) or fail")
    f.add_argument("--methods", default="qmle,qsm,qsm_improved")
    f.add_argument("--no-inference", action="store_true")
    f.add_argument("--seed", type=int, default=0, help="seed for stochastic trace probes")
    f.add_argument("--out", help=f"results directory (default ${RESULTS_ENV} or ./results)")
    f.set_defaults(func=cmd_fit)

    s = sub.add_parser("simulate", help="run a simulation design file")
    s.add_argument("design")
    s.add_argument("--out")
    s.add_argument("--reps", type=int, help="override the design's replication count")
    s.add_argument("--threads", type=int, default=1, help="worker processes")
    s.add_argument("--format", choices=("markdown", "csv", "json"), default="markdown")
    s.set_defaults(func=cmd_simulate)

    q = sub.add_parser("lqcheck", help="check linear-quadratic form moments by Monte Carlo")
    q.add_argument("--n", type=int, default=30)
    q.add_argument("--d", type=int, default=3)
    q.add_argument("--errors", choices=("normal", "mixture"), default="normal")
    q.add_argument("--draws", type=int, default=2_000_000)
    q.add_argument("--seed", type=int, default=0)
    q.add_argument("--zero-a", action="store_true", help="A_j = 0 and b = e_1")
    q.add_argument("--corrupt-cov", action="store_true", help=argparse.SUPPRESS)
    q.set_defaults(func=cmd_lqcheck)

    b = sub.add_parser("bench", help="time QSM against QMLE over sample sizes")
    b.add_argument("--n", default="500,1000,5000", help="comma-separated sizes")
    b.add_argument("--weights", choices=("bernoulli", "sbm"), default="bernoulli")
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--rounds", type=int, default=40)
    b.add_argument("--no-qmle", action="store_true")
    b.add_argument("--format", choices=("markdown", "csv", "json"), default="markdown")
    b.add_argument("--out")
    b.set_defaults(func=cmd_bench)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse uses 2 for usage errors already
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(message)s")
    try:
        return args.func(args)
    except (InputError, ConfigError, EdgeListError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (FitFailure, DegenerateFitError, np.linalg.LinAlgError) as exc:
        print(f"fit failed: {exc}", file=sys.stderr)
        return EXIT_FIT


if __name__ == "__main__":  # pragma: no cover
    raise SystemExit(main())
