"""Benchmark harness: series loading, the 90/10 extrapolation protocol,
multi-trial runs, standardized-RMSE tables and the metric comparison.

Series are normalized before fitting: time is mapped to ``[0, 1]`` and the
targets are standardized with the mean and standard deviation of the
training prefix only, so nothing about the held-out tail leaks into the
search. Every RMSE in a report is in the original units.

Reports are JSON lines written through a single appender. A run directory
looks like::

    reports.jsonl         one record per (series, algorithm, trial)
    timings.jsonl         wall-clock seconds per trial (kept apart so that
                          reports are byte-identical across runs)
    predictions/*.csv     t, y_true, y_mean, y_std for the test tail
    telemetry/*.jsonl     per-generation search telemetry
"""

from __future__ import annotations

import csv
import json
import logging
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from statistics import median

import numpy as np

from .evolve import SearchConfig, SearchStats, evocov, go_with_the_first, random_search
from .expr import hyper_count, serialize
from .estimator import resolve_kernel
from .gp import Dataset, MetricKind, bic, posterior
from .hyperopt import max_fun_call, optimize_hyperparams

__all__ = [
    "FormatError",
    "SeriesSpec",
    "TrialReport",
    "load_series",
    "protocol_split",
    "prepare_series",
    "trial_seeds",
    "run_trials",
    "read_reports",
    "standardize",
    "StandardizedTable",
    "standardized_rmse",
    "hyperparameter_table",
    "read_baselines",
    "metric_comparison",
]

log = logging.getLogger(__name__)

SEARCH_ALGORITHMS = {
    "evocov": evocov,
    "random_search": random_search,
    "go_with_the_first": go_with_the_first,
}
ALGORITHMS = tuple(SEARCH_ALGORITHMS) + ("fixed_builtin",)


class FormatError(ValueError):
    """Malformed series file; ``line`` is 1-based."""

    def __init__(self, line: int, message: str):
        super().__init__(f"line {line}: {message}")
        self.line = line


@dataclass(frozen=True)
class SeriesSpec:
    name: str
    path: str
    n: int
    x_shift: float = 0.0
    x_scale: float = 1.0
    f_shift: float = 0.0
    f_scale: float = 1.0

    def to_x(self, t):
        return (np.asarray(t, dtype=float) - self.x_shift) / self.x_scale

    def to_f(self, y):
        return (np.asarray(y, dtype=float) - self.f_shift) / self.f_scale

    def from_f(self, f):
        return np.asarray(f, dtype=float) * self.f_scale + self.f_shift


def _read_columns(path) -> tuple[np.ndarray, np.ndarray]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise FormatError(1, "empty file")
    width = len(rows[0])
    if width not in (1, 2):
        raise FormatError(1, f"expected columns (t, y) or (y), got {width}")
    t, y = [], []
    for lineno, row in enumerate(rows[1:], start=2):
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) != width:
            raise FormatError(lineno, f"expected {width} fields, got {len(row)}")
        try:
            values = [float(c) for c in row]
        except ValueError:
            raise FormatError(lineno, f"non-numeric value in {row!r}") from None
        if not all(math.isfinite(v) for v in values):
            raise FormatError(lineno, "missing or non-finite value")
        if width == 2:
            if t and values[0] <= t[-1]:
                raise FormatError(lineno, "time column must be strictly increasing")
            t.append(values[0])
        y.append(values[-1])
    if not y:
        raise FormatError(2, "no data rows")
    if width == 1:
        t = list(range(len(y)))
    return np.asarray(t, dtype=float), np.asarray(y, dtype=float)


def load_series(path, normalize: bool = True, fit_rows: int | None = None):
    """Read a CSV series into a normalized :class:`Dataset`.

    The file has a header row and either columns ``t, y`` or a single column
    ``y`` (the row index becomes ``t``). ``fit_rows`` restricts the rows used
    to compute the target standardization (the training prefix).

    Returns ``(dataset, spec, t, y)`` where ``t`` and ``y`` are the raw
    columns.
    """
    path = Path(path)
    t, y = _read_columns(path)
    n = len(y)
    spec = SeriesSpec(path.stem, str(path), n)
    if normalize:
        span = t[-1] - t[0]
        head = y[: fit_rows or n]
        sd = float(np.std(head))
        spec = replace(spec, x_shift=float(t[0]), x_scale=float(span) if span > 0 else 1.0,
                       f_shift=float(np.mean(head)), f_scale=sd if sd > 0 else 1.0)
    return Dataset(spec.to_x(t), spec.to_f(y)), spec, t, y


def protocol_split(ds: Dataset) -> tuple[Dataset, Dataset]:
    """First ``floor(0.9 n)`` points for training, the rest for testing."""
    if ds.n < 10:
        raise ValueError(f"series too short for the 90/10 protocol (n={ds.n} < 10)")
    k = math.floor(0.9 * ds.n)
    return ds.subset(slice(0, k)), ds.subset(slice(k, ds.n))


def prepare_series(path, normalize: bool = True):
    """Load, normalize from the training prefix, and split.

    Returns ``(train, test, spec, t, y)``.
    """
    _, spec, t, y = load_series(path, normalize=False)
    if spec.n < 10:
        raise ValueError(f"series too short for the 90/10 protocol (n={spec.n} < 10)")
    ds, spec, t, y = load_series(path, normalize, fit_rows=math.floor(0.9 * spec.n))
    train, test = protocol_split(ds)
    return train, test, spec, t, y


@dataclass
class TrialReport:
    series: str
    algorithm: str
    trial: int
    seed: int
    status: str = "ok"
    best_expr: str | None = None
    q: int | None = None
    theta: list | None = None
    bic: float | None = None
    metric_score: float | None = None
    test_rmse: float | None = None
    predictions: str | None = None
    telemetry: str | None = None
    error: str | None = None

    @property
    def key(self):
        return (self.series, self.algorithm, self.trial)

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, allow_nan=True)


def trial_seeds(master_seed: int, trials: int) -> list[int]:
    """Distinct per-trial seeds; trial ``i`` gets the same seed for every
    series and algorithm."""
    return [int(s.generate_state(1, np.uint64)[0])
            for s in np.random.SeedSequence(master_seed).spawn(trials)]


def _stem(series: str, algorithm: str, trial: int) -> str:
    return f"{series}__{algorithm}__{trial:03d}"


def _fmt(v: float) -> str:
    return repr(float(v))


@dataclass(frozen=True)
class _Job:
    path: str
    algorithm: str
    cfg: SearchConfig
    kernel: str
    trial: int
    seed: int
    out_dir: str
    normalize: bool = True


def _run_one(job: _Job):
    """Run one trial; returns ``(report, wall_time)``."""
    start = time.perf_counter()
    name = Path(job.path).stem
    report = TrialReport(name, job.algorithm, job.trial, job.seed)
    try:
        train, test, spec, t, y = prepare_series(job.path, job.normalize)
        cfg = job.cfg if job.cfg.psd.d == train.X.shape[1] else \
            replace(job.cfg, psd=replace(job.cfg.psd, d=train.X.shape[1]))
        rng = np.random.default_rng(job.seed)
        telemetry: list[dict] = []
        if job.algorithm == "fixed_builtin":
            expr, kinds = resolve_kernel(job.kernel)
            res = optimize_hyperparams(expr, train, cfg.metric, cfg.budget(train.n),
                                       rng=rng, kinds=kinds, ftol=cfg.ftol,
                                       line_max_evals=cfg.line_max_evals)
            if res.all_penalized:
                raise RuntimeError("kernel could not be evaluated")
            theta = res.theta
            metric = MetricKind.parse(cfg.metric)
            metric_score = -res.score if metric.maximize else res.score
            fit = bic(expr, theta, train)
        else:
            best = SEARCH_ALGORITHMS[job.algorithm](train, cfg, rng, SearchStats(),
                                                    telemetry.append)
            if best.penalized or best.theta is None:
                raise RuntimeError("search found no evaluable kernel")
            expr, theta, metric_score, fit = best.expr, best.theta, best.metric_score, \
                best.fitness
        post = posterior(expr, theta, train, test.X, include_noise=True)
        mean = spec.from_f(post.mean)
        std = np.sqrt(np.diag(post.cov)) * spec.f_scale
        y_test = y[train.n:]
        stem = _stem(name, job.algorithm, job.trial)
        out = Path(job.out_dir)
        pred_rel = f"predictions/{stem}.csv"
        with open(out / pred_rel, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["t", "y_true", "y_mean", "y_std"])
            for row in zip(t[train.n:], y_test, mean, std):
                w.writerow([_fmt(v) for v in row])
        if telemetry:
            tel_rel = f"telemetry/{stem}.jsonl"
            with open(out / tel_rel, "w") as fh:
                for rec in telemetry:
                    fh.write(json.dumps(rec, sort_keys=True) + "\n")
            report.telemetry = tel_rel
        report.best_expr = serialize(expr)
        report.q = hyper_count(expr) + 1
        report.theta = [float(v) for v in theta]
        report.bic = float(fit)
        report.metric_score = float(metric_score)
        report.test_rmse = float(np.sqrt(np.mean((mean - y_test) ** 2)))
        report.predictions = pred_rel
    except Exception as err:  # recorded, never fatal
        report.status = "failed"
        report.error = f"{type(err).__name__}: {err}"
    return report, time.perf_counter() - start


def read_reports(path) -> list[TrialReport]:
    path = Path(path)
    if path.is_dir():
        path = path / "reports.jsonl"
    if not path.exists():
        return []
    out = []
    with open(path) as fh:
        for line in fh:
            if line.strip():
                out.append(TrialReport(**json.loads(line)))
    return out


def _write_reports(path: Path, reports: list[TrialReport]) -> None:
    reports = sorted(reports, key=lambda r: r.key)
    tmp = path.with_suffix(".tmp")
    with open(tmp, "w") as fh:
        for r in reports:
            fh.write(r.to_json() + "\n")
    os.replace(tmp, path)


def run_trials(series, algorithm: str, cfg: SearchConfig | None = None, trials: int = 10,
               out_dir="evocov-runs", master_seed: int = 0, kernel: str = "SE",
               jobs: int = 1, normalize: bool = True) -> list[TrialReport]:
    """Run ``trials`` independent trials of ``algorithm`` on every series.

    Completed ``(series, algorithm, trial)`` entries already in
    ``out_dir/reports.jsonl`` are skipped, so an interrupted run resumes
    where it stopped. Failed trials are recorded with ``status="failed"`` and
    retried on the next run. Returns all reports in the file, sorted.
    """
    if algorithm not in ALGORITHMS:
        raise ValueError(f"unknown algorithm {algorithm!r}; choose from {ALGORITHMS}")
    cfg = SearchConfig() if cfg is None else cfg
    out = Path(out_dir)
    (out / "predictions").mkdir(parents=True, exist_ok=True)
    (out / "telemetry").mkdir(parents=True, exist_ok=True)
    report_path = out / "reports.jsonl"
    existing = {r.key: r for r in read_reports(report_path)}
    seeds = trial_seeds(master_seed, trials)
    todo = []
    for path in series:
        name = Path(path).stem
        for trial, seed in enumerate(seeds):
            prev = existing.get((name, algorithm, trial))
            if prev is not None and prev.status == "ok":
                continue
            todo.append(_Job(str(path), algorithm, cfg if jobs <= 1 else replace(cfg, n_jobs=1),
                             kernel, trial, seed, str(out), normalize))

    def record(report, wall):
        existing[report.key] = report
        with open(report_path, "a") as fh:
            fh.write(report.to_json() + "\n")
        with open(out / "timings.jsonl", "a") as fh:
            fh.write(json.dumps({"series": report.series, "algorithm": report.algorithm,
                                 "trial": report.trial, "wall_time": wall}) + "\n")
        log.info("%s %s trial %d: %s", report.series, algorithm, report.trial,
                 report.status if report.status != "ok" else f"rmse={report.test_rmse:.6g}")

    if jobs > 1 and len(todo) > 1:
        with ProcessPoolExecutor(jobs) as pool:
            for report, wall in pool.map(_run_one, todo):
                record(report, wall)
    else:
        for job in todo:
            record(*_run_one(job))
    _write_reports(report_path, list(existing.values()))
    return sorted(existing.values(), key=lambda r: r.key)


# ---------------------------------------------------------------------------
# tables


def standardize(values: dict, baseline_min: float | None = None) -> dict:
    """Divide every value by the smallest one (or by ``baseline_min`` when
    that is smaller)."""
    finite = [v for v in values.values() if v is not None and math.isfinite(v)]
    if baseline_min is not None:
        finite.append(baseline_min)
    if not finite:
        return {k: math.nan for k in values}
    m = min(finite)
    if m <= 0:
        raise ValueError("RMSEs must be positive to standardize")
    return {k: (v / m if v is not None else math.nan) for k, v in values.items()}


@dataclass
class StandardizedTable:
    series: list[str]
    columns: list[str]
    values: dict = field(default_factory=dict)  # (series, column) -> value

    def column(self, col) -> list[float]:
        return [self.values.get((s, col), math.nan) for s in self.series]

    def mean(self, col) -> float:
        v = [x for x in self.column(col) if math.isfinite(x)]
        return float(np.mean(v)) if v else math.nan

    def median(self, col) -> float:
        v = [x for x in self.column(col) if math.isfinite(x)]
        return float(median(v)) if v else math.nan

    def rows(self, summary: bool = True):
        yield ["series"] + self.columns
        for s in self.series:
            yield [s] + [self.values.get((s, c), math.nan) for c in self.columns]
        if summary:
            yield ["Mean"] + [self.mean(c) for c in self.columns]
            yield ["Median"] + [self.median(c) for c in self.columns]

    def to_csv(self, path, summary: bool = True) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            for row in self.rows(summary):
                w.writerow([c if isinstance(c, str) else _cell(c) for c in row])

    def to_text(self, summary: bool = True) -> str:
        rows = [[c if isinstance(c, str) else _cell(c) for c in row]
                for row in self.rows(summary)]
        widths = [max(len(r[i]) for r in rows) for i in range(len(rows[0]))]
        lines = []
        for r in rows:
            lines.append("  ".join(c.ljust(w) if i == 0 else c.rjust(w)
                                   for i, (c, w) in enumerate(zip(r, widths))).rstrip())
        return "\n".join(lines) + "\n"


def _cell(v: float) -> str:
    return "" if v is None or not math.isfinite(v) else f"{v:.6g}"


def read_baselines(path) -> dict:
    """Reference RMSEs from a CSV with columns ``series, algorithm, rmse``."""
    out: dict = {}
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = {"series", "algorithm", "rmse"} - set(reader.fieldnames or ())
        if missing:
            raise FormatError(1, f"baseline file lacks columns {sorted(missing)}")
        for lineno, row in enumerate(reader, start=2):
            try:
                out[(row["series"], row["algorithm"])] = float(row["rmse"])
            except ValueError:
                raise FormatError(lineno, f"non-numeric rmse {row['rmse']!r}") from None
    return out


def _group_mean(reports, attr):
    groups: dict = {}
    for r in reports:
        v = getattr(r, attr)
        if r.status == "ok" and v is not None:
            groups.setdefault((r.series, r.algorithm), []).append(v)
    return {k: float(np.mean(v)) for k, v in groups.items()}


def standardized_rmse(reports, baselines: dict | None = None) -> StandardizedTable:
    """Mean test RMSE per (series, algorithm), divided by the smallest RMSE on
    that series among all algorithms and injected baselines."""
    means = _group_mean(reports, "test_rmse")
    baselines = baselines or {}
    cells = {**baselines, **means}
    series = sorted({s for s, _ in means})
    columns = sorted({a for _, a in means}) + sorted({a for s, a in baselines
                                                     if s in series and (s, a) not in means})
    table = StandardizedTable(series, columns)
    for s in series:
        row = {a: cells[(s, a)] for a in columns if (s, a) in cells}
        if not row:
            log.warning("no results for series %s; skipped", s)
            continue
        table.values.update({(s, a): v for a, v in standardize(row).items()})
    return table


def hyperparameter_table(reports) -> StandardizedTable:
    """Mean hyperparameter count (noise included) per series and algorithm."""
    means = _group_mean(reports, "q")
    series = sorted({s for s, _ in means})
    columns = sorted({a for _, a in means})
    return StandardizedTable(series, columns, dict(means))


def _metric_job(args):
    path, kernel, metric, ref, seed, normalize = args
    train, test, spec, t, y = prepare_series(path, normalize)
    expr, kinds = resolve_kernel(kernel)
    res = optimize_hyperparams(expr, train, metric, max_fun_call(ref, train.n),
                               rng=seed, kinds=kinds)
    if res.all_penalized:
        return math.nan
    mean = spec.from_f(posterior(expr, res.theta, train, test.X).mean)
    return float(np.sqrt(np.mean((mean - y[train.n:]) ** 2)))


def metric_comparison(series, kernel: str = "SE", metrics=None, ref_fun_call: int = 5000,
                      trials: int = 10, master_seed: int = 0, jobs: int = 1,
                      normalize: bool = True) -> StandardizedTable:
    """Average test RMSE (original units) of ``kernel`` fitted by each metric.

    Each of ``trials`` optimizations starts from random hyperparameters; the
    metric-best hyperparameters give the test RMSE. Rows are metrics, columns
    series.
    """
    metrics = [MetricKind.parse(m) for m in (metrics or list(MetricKind))]
    seeds = trial_seeds(master_seed, trials)
    names = [Path(p).stem for p in series]
    jobs_list = [(str(p), kernel, m.value, ref_fun_call, s, normalize)
                 for m in metrics for p in series for s in seeds]
    if jobs > 1:
        with ProcessPoolExecutor(jobs) as pool:
            results = list(pool.map(_metric_job, jobs_list))
    else:
        results = [_metric_job(j) for j in jobs_list]
    table = StandardizedTable([m.value for m in metrics], names)
    it = iter(results)
    for m in metrics:
        for name in names:
            vals = [next(it) for _ in seeds]
            finite = [v for v in vals if math.isfinite(v)]
            table.values[(m.value, name)] = float(np.mean(finite)) if finite else math.nan
    return table
