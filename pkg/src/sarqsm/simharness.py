"""Monte Carlo replication engine for accuracy and timing tables.

Each replication draws a fresh network, fresh regressors and fresh errors,
fits the requested estimators and records estimates and wall-clock times.
Summaries follow the usual conventions: BIAS is the mean deviation from the
truth, SD the standard deviation with divisor R (the number of successful
replications) and RMSE = sqrt(BIAS^2 + SD^2).
"""

from __future__ import annotations

import csv
import io
import json
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .inference import InferenceFailure, moment_plugins, qsm_sandwich
from .linalg import DEFAULT_LAMBDA_BOUNDS
from .model import ErrorDistribution, ParamVector, SarData, simulate_sar
from .netgen import gen_bernoulli, gen_sbm, row_normalize
from .qmle import fit_qmle
from .qsm import fit_qsm_pair
from .report import DegenerateFitError, FitFailure

__all__ = [
    "ESTIMATORS",
    "ConfigError",
    "SimDesign",
    "RunResult",
    "MetricsTable",
    "draw_instance",
    "run_replications",
    "summarize",
    "run_design",
    "parse_design",
    "load_design",
    "emit_table",
    "BenchResult",
    "bench_instance",
    "run_bench",
    "emit_bench",
]

ESTIMATORS = ("qsm", "qsm_improved", "qmle")
_FIT_ERRORS = (DegenerateFitError, FitFailure, np.linalg.LinAlgError, ArithmeticError)


class ConfigError(ValueError):
    """Invalid design file or design parameters."""

    def __init__(self, msg: str, key: str | None = None):
        self.key = key
        if key is not None and repr(key) not in msg:
            msg = f"{key!r}: {msg}"
        super().__init__(msg)


@dataclass(frozen=True)
class SimDesign:
    """One cell of a simulation table.

    ``inference`` additionally computes the sandwich standard error of
    lambda_hat in every replication (needed for coverage checks).
    """

    n: int
    lambda0: float
    beta0: tuple = (2.0, 1.0)
    weights_kind: str = "bernoulli"
    error_kind: str = "normal"
    reps: int = 1000
    base_seed: int = 0
    estimators: tuple = ESTIMATORS
    sigma2_0: float = 1.0
    inference: bool = False

    def __post_init__(self):
        object.__setattr__(self, "beta0", tuple(float(b) for b in self.beta0))
        object.__setattr__(self, "estimators", tuple(self.estimators))
        if self.reps < 1:
            raise ConfigError("reps must be at least 1", "reps")
        if self.n < 10:
            raise ConfigError("n must be at least 10", "n")
        lo, hi = DEFAULT_LAMBDA_BOUNDS
        if not lo <= self.lambda0 <= hi:
            raise ConfigError(f"lambda0={self.lambda0} outside [{lo}, {hi}]", "lambda0")
        if self.weights_kind not in ("bernoulli", "sbm"):
            raise ConfigError(f"unknown weights kind {self.weights_kind!r}", "weights")
        if self.error_kind not in ("normal", "mixture"):
            raise ConfigError(f"unknown error kind {self.error_kind!r}", "errors")
        bad = [e for e in self.estimators if e not in ESTIMATORS]
        if bad:
            raise ConfigError(f"unknown estimator(s) {bad}", "estimators")
        if len(self.beta0) < 1:
            raise ConfigError("beta0 needs at least the intercept", "beta0")

    @property
    def p(self) -> int:
        return len(self.beta0)

    @property
    def theta0(self) -> ParamVector:
        return ParamVector(self.lambda0, np.array(self.beta0), self.sigma2_0)

    @property
    def error_distribution(self) -> ErrorDistribution:
        return ErrorDistribution.normal() if self.error_kind == "normal" else ErrorDistribution.mixture()

    def param_names(self) -> list[str]:
        return ["lambda", *[f"beta{j + 1}" for j in range(self.p)], "sigma2"]


def draw_instance(design: SimDesign, rep: int) -> SarData:
    """Data set of replication ``rep``; depends only on (base_seed, rep)."""
    ss_w, ss_x, ss_e = np.random.SeedSequence([design.base_seed, rep]).spawn(3)
    n = design.n
    if design.weights_kind == "bernoulli":
        adj = gen_bernoulli(n, 5.0 / n, seed=ss_w)
    else:
        adj = gen_sbm(n, seed=ss_w)
    W = row_normalize(adj)
    rng_x = np.random.Generator(np.random.Philox(ss_x))
    X = np.column_stack([np.ones(n), rng_x.standard_normal((n, design.p - 1))])
    return simulate_sar(design.theta0, X, W, design.error_distribution, seed=ss_e)


@dataclass
class _Rep:
    estimates: dict
    t_S: float | None
    t_M: float | None
    failures: list
    m2: float | None = None
    m4: float | None = None
    se_lambda: float | None = None


def _one_replication(design: SimDesign, rep: int) -> _Rep:
    data = draw_instance(design, rep)
    est, fails = {}, []
    t_S = t_M = None
    m2 = m4 = se = None
    want = set(design.estimators)
    if want & {"qsm", "qsm_improved"}:
        try:
            a, b, t_S = fit_qsm_pair(data)
            if "qsm" in want:
                est["qsm"] = a.theta.as_array()
            if "qsm_improved" in want:
                est["qsm_improved"] = b.theta.as_array()
            moms = moment_plugins(data, b.theta)
            m2, m4 = float(moms.m2[0]), float(moms.m4[0])
            if design.inference:
                try:
                    ac = qsm_sandwich(data, a.theta)
                    v = ac.sandwich_qsm[0, 0] / design.n
                    se = math.sqrt(v) if v >= 0 else None
                except InferenceFailure:
                    se = None
        except _FIT_ERRORS:
            fails += [e for e in ("qsm", "qsm_improved") if e in want]
    if "qmle" in want:
        try:
            t0 = time.perf_counter()
            r = fit_qmle(data)
            t_M = time.perf_counter() - t0
            est["qmle"] = r.theta.as_array()
        except _FIT_ERRORS:
            fails.append("qmle")
    return _Rep(est, t_S, t_M, fails, m2, m4, se)


def _warm_up() -> None:
    """Load the compiled objective kernel so the first timed fit excludes it."""
    fit_qsm_pair(bench_instance(50))


def _run_chunk(args):
    design, reps = args
    _warm_up()
    return [_one_replication(design, r) for r in reps]


@dataclass
class RunResult:
    """Raw per-replication output of a design."""

    design: SimDesign
    estimates: dict  # estimator -> (R_e, p+2) array of successful fits
    t_S: np.ndarray
    t_M: np.ndarray
    failures: dict
    m2: np.ndarray
    m4: np.ndarray
    se_lambda: np.ndarray


def run_replications(design: SimDesign, n_jobs: int = 1, progress=None) -> RunResult:
    """Run all replications, optionally across ``n_jobs`` worker processes.

    Results are collected in replication order, so the output does not depend
    on ``n_jobs``.
    """
    reps = list(range(design.reps))
    if n_jobs and n_jobs > 1:
        chunks = [reps[i::n_jobs] for i in range(n_jobs)]
        with ProcessPoolExecutor(max_workers=n_jobs) as ex:
            parts = list(ex.map(_run_chunk, [(design, c) for c in chunks]))
        by_rep = {}
        for c, part in zip(chunks, parts):
            by_rep.update(zip(c, part))
        out = [by_rep[r] for r in reps]
    else:
        _warm_up()
        out = []
        for r in reps:
            out.append(_one_replication(design, r))
            if progress is not None:
                progress(r + 1, design.reps)
    k = design.p + 2
    estimates = {
        e: np.array([o.estimates[e] for o in out if e in o.estimates]).reshape(-1, k)
        for e in design.estimators
    }
    failures = {e: sum(e in o.failures for o in out) for e in design.estimators}

    def col(attr):
        return np.array([getattr(o, attr) for o in out if getattr(o, attr) is not None], dtype=float)

    return RunResult(design, estimates, col("t_S"), col("t_M"), failures,
                     col("m2"), col("m4"), col("se_lambda"))


def _clean(x):
    if x is None:
        return None
    x = float(x)
    return x if math.isfinite(x) else None


@dataclass
class MetricsTable:
    """BIAS / SD / RMSE per estimator and parameter, plus timing and diagnostics.

    All entries are plain Python floats (or ``None`` when undefined) so the
    table survives a JSON round trip unchanged.
    """

    design: dict
    param_names: list
    metrics: dict = field(default_factory=dict)  # est -> param -> {bias, sd, rmse}
    t_S: float | None = None
    t_M: float | None = None
    ratio: float | None = None
    failures: dict = field(default_factory=dict)
    diagnostics: dict = field(default_factory=dict)

    @property
    def estimators(self) -> list:
        return list(self.metrics)

    def value(self, estimator: str, param: str, metric: str) -> float:
        return self.metrics[estimator][param][metric]

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "MetricsTable":
        return cls(**json.loads(text))


def _design_dict(d: SimDesign) -> dict:
    out = asdict(d)
    out["beta0"] = list(d.beta0)
    out["estimators"] = list(d.estimators)
    return out


def _moments(x: np.ndarray, truth: float):
    m = math.fsum(x) / len(x)
    bias = m - truth
    sd = math.sqrt(math.fsum((v - m) ** 2 for v in x) / len(x))
    return {"bias": bias, "sd": sd, "rmse": math.sqrt(bias * bias + sd * sd)}


def summarize(run: RunResult) -> MetricsTable:
    d = run.design
    names = d.param_names()
    truth = d.theta0.as_array()
    metrics = {}
    for e in d.estimators:
        est = run.estimates[e]
        if len(est) == 0:
            metrics[e] = {nm: {"bias": None, "sd": None, "rmse": None} for nm in names}
            continue
        metrics[e] = {nm: _moments(est[:, j].tolist(), truth[j]) for j, nm in enumerate(names)}
    t_S = _clean(np.mean(run.t_S)) if run.t_S.size else None
    t_M = _clean(np.mean(run.t_M)) if run.t_M.size else None
    ratio = t_M / t_S if (t_S and t_M) else None
    diag = {"reps": d.reps, "failure_rate": {e: run.failures[e] / d.reps for e in d.estimators}}
    if run.m2.size:
        diag["kurtosis_plugin"] = _clean(np.mean(run.m4) / np.mean(run.m2**2))
    if run.se_lambda.size and "qsm" in run.estimates and len(run.estimates["qsm"]) == run.se_lambda.size:
        lam = run.estimates["qsm"][:, 0]
        covered = np.abs(lam - d.lambda0) <= 1.959963984540054 * run.se_lambda
        diag["mean_se_lambda"] = _clean(run.se_lambda.mean())
        diag["coverage_lambda"] = _clean(covered.mean())
    return MetricsTable(_design_dict(d), names, metrics, t_S, t_M, _clean(ratio),
                        dict(run.failures), diag)


def run_design(design: SimDesign, n_jobs: int = 1, progress=None) -> MetricsTable:
    """Replicate ``design`` and aggregate into a :class:`MetricsTable`."""
    return summarize(run_replications(design, n_jobs=n_jobs, progress=progress))


# design files -------------------------------------------------------------

_KEYS = {"n", "lambda0", "beta0", "weights", "errors", "reps", "seed", "estimators", "inference"}


def parse_design(text: str) -> SimDesign:
    """Parse a flat ``key = value`` design file.

    Recognized keys: n, lambda0, beta0 (comma separated), weights
    (bernoulli|sbm), errors (normal|mixture), reps, seed, estimators (comma
    separated subset of qsm, qsm_improved, qmle) and inference (true|false).
    Blank lines and ``#`` comments are ignored.  Unknown or repeated keys and
    unparsable values raise :class:`ConfigError` naming the key.
    """
    kv = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw.strip()!r}")
        key, val = (s.strip() for s in line.split("=", 1))
        if key not in _KEYS:
            raise ConfigError(f"line {lineno}: unknown key {key!r}", key)
        if key in kv:
            raise ConfigError(f"line {lineno}: key {key!r} given twice", key)
        kv[key] = val
    for req in ("n", "lambda0"):
        if req not in kv:
            raise ConfigError(f"missing required key {req!r}", req)
    args = {}
    try:
        key = "n"
        args["n"] = int(kv["n"])
        key = "lambda0"
        args["lambda0"] = float(kv["lambda0"])
        if "beta0" in kv:
            key = "beta0"
            args["beta0"] = tuple(float(v) for v in kv["beta0"].split(","))
        if "reps" in kv:
            key = "reps"
            args["reps"] = int(kv["reps"])
        if "seed" in kv:
            key = "seed"
            args["base_seed"] = int(kv["seed"])
    except ValueError:
        raise ConfigError(f"bad value for {key!r}: {kv[key]!r}", key) from None
    if "weights" in kv:
        args["weights_kind"] = kv["weights"]
    if "errors" in kv:
        args["error_kind"] = kv["errors"]
    if "estimators" in kv:
        args["estimators"] = tuple(e.strip() for e in kv["estimators"].split(",") if e.strip())
    if "inference" in kv:
        v = kv["inference"].lower()
        if v not in ("true", "false", "1", "0", "yes", "no"):
            raise ConfigError(f"bad value for 'inference': {kv['inference']!r}", "inference")
        args["inference"] = v in ("true", "1", "yes")
    return SimDesign(**args)


def load_design(path) -> SimDesign:
    return parse_design(Path(path).read_text())


# table emission -------------------------------------------------------------

_SYMBOL = {"qmle": "QMLE", "qsm": "QSM", "qsm_improved": "QSM-improved"}
_ORDER = ("qmle", "qsm", "qsm_improved")


def _columns(table: MetricsTable):
    cols = []
    for e in _ORDER:
        if e not in table.metrics:
            continue
        for nm in table.param_names:
            if e == "qsm_improved" and nm == "lambda" and "qsm" in table.metrics:
                continue  # lambda_hat is shared with the plain fit
            cols.append((e, nm))
    return cols


def _fmt(x):
    return "" if x is None else f"{100 * x:.2f}"


def emit_table(table: MetricsTable, fmt: str = "markdown") -> str:
    """Render ``table`` as csv, json or markdown.

    BIAS, SD and RMSE are printed as 100 times their values, as noted in the
    header; timings are in seconds.
    """
    if fmt == "json":
        return table.to_json()
    cols = _columns(table)
    header = ["n", "metric", *[f"{_SYMBOL[e]}:{nm}" for e, nm in cols]]
    n = table.design.get("n", "")
    rows = [[str(n), m.upper(), *[_fmt(table.metrics[e][nm][m]) for e, nm in cols]]
            for m in ("bias", "sd", "rmse")] if cols else []
    timing = (f"t_M={table.t_M:.4g}s" if table.t_M else "t_M=NA") + ", " + \
             (f"t_S={table.t_S:.4g}s" if table.t_S else "t_S=NA") + ", " + \
             (f"t_M/t_S={table.ratio:.2f}" if table.ratio else "t_M/t_S=NA")
    if fmt == "csv":
        buf = io.StringIO()
        buf.write("# BIAS, SD and RMSE are 100 times the true values\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)
        if cols:
            buf.write(f"# {timing}\n")
        return buf.getvalue()
    if fmt == "markdown":
        lines = ["BIAS, SD and RMSE are 100 times the true values.", "",
                 "| " + " | ".join(header) + " |",
                 "|" + "|".join(["---"] * 2 + ["---:"] * len(cols)) + "|"]
        lines += ["| " + " | ".join(r) + " |" for r in rows]
        if cols:
            lines += ["", timing]
        return "\n".join(lines) + "\n"
    raise ValueError(f"unknown table format {fmt!r}")


# timing benchmark -----------------------------------------------------------


@dataclass
class BenchRow:
    n: int
    nnz: int
    t_obj: float  # seconds per concentrated-objective evaluation
    t_S: float
    t_M: float | None
    ratio: float | None


@dataclass
class BenchResult:
    weights_kind: str
    seed: int
    rows: list
    slope_obj: float | None
    slope_S: float | None

    def to_dict(self) -> dict:
        return asdict(self)


def bench_instance(n: int, weights_kind: str = "bernoulli", seed: int = 0) -> SarData:
    """The data set ``run_bench`` times at size ``n`` (the lambda0 = 0.3 Bernoulli reference design)."""
    return draw_instance(SimDesign(n, 0.3, weights_kind=weights_kind, reps=1, base_seed=seed), 0)


def _loglog_slope(ns, ts):
    ns, ts = np.asarray(ns, float), np.asarray(ts, float)
    if ns.size < 2 or np.any(ts <= 0):
        return None
    return float(np.polyfit(np.log(ns), np.log(ts), 1)[0])


def run_bench(n_list, weights_kind: str = "bernoulli", seed: int = 0, qmle: bool = True,
              rounds: int = 40, number: int = 100, fit_repeats: int = 3,
              repeat_max_n: int = 2000, progress=None) -> BenchResult:
    """Time the concentrated objective and the full fits on one data set per n.

    Objective timings interleave the sizes over ``rounds`` rounds of
    ``number`` calls and keep the fastest round, which suppresses the
    scheduler noise that otherwise swamps microsecond timings.  Full fits are
    timed as the minimum over ``fit_repeats`` runs for n <= ``repeat_max_n``
    and once above it.
    """
    from .qsm import ConcentratedPath  # local: keeps module import light

    ns = sorted(int(n) for n in n_list)
    data = {n: bench_instance(n, weights_kind, seed) for n in ns}
    paths = {n: ConcentratedPath(data[n]) for n in ns}
    for n in ns:  # warm-up (compiles the kernel on first use)
        paths[n].objective(0.3)
    best = {n: math.inf for n in ns}
    for _ in range(rounds):
        for n in ns:
            f = paths[n].objective
            t0 = time.perf_counter()
            for _ in range(number):
                f(0.3)
            best[n] = min(best[n], (time.perf_counter() - t0) / number)
    rows = []
    for n in ns:
        k = fit_repeats if n <= repeat_max_n else 1
        t_S = min(fit_qsm_pair(data[n])[2] for _ in range(k))
        t_M = None
        if qmle:
            t_M = math.inf
            for _ in range(k):
                t0 = time.perf_counter()
                fit_qmle(data[n])
                t_M = min(t_M, time.perf_counter() - t0)
        rows.append(BenchRow(n, data[n].W.nnz, best[n], t_S, t_M, t_M / t_S if t_M else None))
        if progress is not None:
            progress(rows[-1])
    return BenchResult(weights_kind, seed, rows, _loglog_slope(ns, [best[n] for n in ns]),
                       _loglog_slope(ns, [r.t_S for r in rows]))


def emit_bench(res: BenchResult, fmt: str = "markdown") -> str:
    if fmt == "json":
        return json.dumps(res.to_dict(), indent=2)
    header = ["n", "nnz(W)", "objective (us)", "t_S (s)", "t_M (s)", "t_M/t_S"]
    rows = [[str(r.n), str(r.nnz), f"{r.t_obj * 1e6:.2f}", f"{r.t_S:.4g}",
             "NA" if r.t_M is None else f"{r.t_M:.4g}",
             "NA" if r.ratio is None else f"{r.ratio:.2f}"] for r in res.rows]
    slope = (f"log-log slope of objective cost: "
             f"{'NA' if res.slope_obj is None else f'{res.slope_obj:.3f}'}; "
             f"of t_S: {'NA' if res.slope_S is None else f'{res.slope_S:.3f}'}")
    if fmt == "csv":
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)
        buf.write(f"# {slope}\n")
        return buf.getvalue()
    lines = ["| " + " | ".join(header) + " |", "|" + "|".join(["---:"] * len(header)) + "|"]
    lines += ["| " + " | ".join(r) + " |" for r in rows]
    return "\n".join(lines + ["", slope]) + "\n"
