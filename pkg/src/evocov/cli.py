"""Command-line interface.

Subcommands::

    evocov search CONFIG.json [--out DIR] [--seed S] [--jobs K]
    evocov eval KERNEL SERIES.csv [--theta v1,v2,...]
    evocov report DIR [--baselines FILE]
    evocov metric-compare SERIES.csv... [--kernel SE] [--trials 10] [--ref 5000]

Exit codes: 0 on success, 1 on configuration or input errors, 2 when some
trials failed (details are in the reports).
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import math
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .bench import (
    ALGORITHMS,
    FormatError,
    hyperparameter_table,
    metric_comparison,
    prepare_series,
    read_baselines,
    read_reports,
    run_trials,
    standardized_rmse,
)
from .estimator import resolve_kernel
from .evolve import SearchConfig
from .expr import EvalError, KernelTypeError, ParseError, hyper_count, serialize, type_check
from .gp import FactorizationError, GPEvaluator, MetricKind, test_rmse
from .hyperopt import max_fun_call, optimize_hyperparams
from .psd import PsdCheckConfig

ENV_OUTPUT_DIR = "EVOCOV_OUTPUT_DIR"
DEFAULT_OUTPUT_DIR = "evocov-runs"

log = logging.getLogger("evocov")


class ConfigError(ValueError):
    pass


@dataclasses.dataclass(frozen=True)
class RunConfig:
    series: tuple[str, ...]
    algorithm: str = "evocov"
    trials: int = 10
    seed: int = 0
    output_dir: str | None = None
    kernel: str = "SE"
    normalize: bool = True
    search: SearchConfig = dataclasses.field(default_factory=SearchConfig)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def _check_keys(data: dict, cls, where: str) -> None:
    if not isinstance(data, dict):
        raise ConfigError(f"{where} must be an object")
    allowed = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - allowed)
    if unknown:
        raise ConfigError(f"unknown key(s) in {where}: {', '.join(unknown)}")


def parse_config(data: dict, base_dir: Path | None = None) -> RunConfig:
    """Build a :class:`RunConfig` from decoded JSON, rejecting unknown keys.
    Relative series paths are resolved against ``base_dir``."""
    _check_keys(data, RunConfig, "config")
    data = dict(data)
    search = dict(data.pop("search", {}) or {})
    _check_keys(search, SearchConfig, "search")
    psd = search.pop("psd", None)
    try:
        if psd is not None:
            _check_keys(psd, PsdCheckConfig, "search.psd")
            search["psd"] = PsdCheckConfig(**psd)
        search_cfg = SearchConfig(**search)
    except (TypeError, ValueError) as err:
        raise ConfigError(f"invalid search settings: {err}") from None
    if "series" not in data:
        raise ConfigError("config needs a 'series' list")
    series = data.pop("series")
    if isinstance(series, str):
        series = [series]
    if base_dir is not None:
        series = [str(p) if Path(p).is_absolute() else str(base_dir / p) for p in series]
    cfg = RunConfig(series=tuple(series), search=search_cfg, **data)
    if cfg.algorithm not in ALGORITHMS:
        raise ConfigError(f"unknown algorithm {cfg.algorithm!r}; choose from {ALGORITHMS}")
    if cfg.trials < 1:
        raise ConfigError("trials must be >= 1")
    return cfg


def load_config(path) -> RunConfig:
    path = Path(path)
    with open(path) as fh:
        try:
            data = json.load(fh)
        except json.JSONDecodeError as err:
            raise ConfigError(f"{path}: {err}") from None
    return parse_config(data, path.parent)


def _output_dir(cli_value, cfg_value=None) -> Path:
    return Path(cli_value or cfg_value or os.environ.get(ENV_OUTPUT_DIR) or DEFAULT_OUTPUT_DIR)


def _error(msg: str) -> int:
    print(f"evocov: error: {msg}", file=sys.stderr)
    return 1


def cmd_search(args) -> int:
    try:
        cfg = load_config(args.config)
    except OSError as err:
        return _error(f"cannot read config: {err}")
    except ConfigError as err:
        return _error(str(err))
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
    out = _output_dir(args.out, cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    header = {"evocov": __version__, "config": cfg.to_dict()}
    header["config"]["output_dir"] = None  # keep the header independent of paths
    header_text = json.dumps(header, sort_keys=True, indent=2)
    (out / "run.json").write_text(header_text + "\n")
    print(header_text)
    for path in cfg.series:
        if not Path(path).is_file():
            return _error(f"series file not found: {path}")
    reports = run_trials(cfg.series, cfg.algorithm, cfg.search, cfg.trials, out, cfg.seed,
                         cfg.kernel, args.jobs, cfg.normalize)
    failed = [r for r in reports if r.status != "ok"]
    for r in reports:
        shown = f"rmse={r.test_rmse:.6g} q={r.q}" if r.status == "ok" else r.error
        print(f"{r.series} {r.algorithm} trial {r.trial}: {shown}")
    if failed:
        print(f"{len(failed)} of {len(reports)} trials failed", file=sys.stderr)
        return 2
    return 0


def _parse_theta(text: str) -> np.ndarray:
    try:
        return np.array([float(v) for v in text.replace(",", " ").split()])
    except ValueError:
        raise ConfigError(f"cannot parse theta {text!r}") from None


def cmd_eval(args) -> int:
    try:
        expr, kinds = resolve_kernel(args.kernel)
        type_check(expr)
        train, test, spec, _, _ = prepare_series(args.series)
        q = hyper_count(expr) + 1
        if args.theta is not None:
            theta = _parse_theta(args.theta)
            if theta.size != q:
                raise ConfigError(f"kernel has {q} hyperparameters (noise last), "
                                  f"got {theta.size}")
        else:
            res = optimize_hyperparams(expr, train, MetricKind.LML,
                                       max_fun_call(args.ref, train.n), rng=args.seed,
                                       kinds=kinds)
            theta = res.theta
        ev = GPEvaluator(expr, train)
        lml, loo = ev.lml(theta), ev.loocv(theta)
        rmse = test_rmse(expr, theta, train, test) * spec.f_scale
    except ParseError as err:
        return _error(f"ParseError: {err}")
    except (KernelTypeError, EvalError) as err:
        return _error(f"{type(err).__name__} at node path {list(err.path)}: {err}")
    except (OSError, FormatError, ConfigError, FactorizationError, ValueError) as err:
        return _error(f"{type(err).__name__}: {err}")
    bic = -2.0 * lml + q * math.log(train.n)
    print(f"kernel     {serialize(expr)}")
    print(f"series     {spec.name} (n={spec.n}, train={train.n}, test={test.n})")
    print(f"theta      {' '.join(f'{v:.6g}' for v in theta)}")
    print(f"q          {q}")
    print(f"LML        {lml:.6f}")
    print(f"LOOCV      {loo:.6f}")
    print(f"BIC        {bic:.6f}")
    print(f"test RMSE  {rmse:.6g}")
    return 0


def cmd_report(args) -> int:
    reports = read_reports(args.dir)
    if not reports:
        return _error(f"no reports found in {args.dir}")
    try:
        baselines = read_baselines(args.baselines) if args.baselines else None
    except (OSError, FormatError) as err:
        return _error(f"baselines: {err}")
    out = Path(args.dir)
    table = standardized_rmse(reports, baselines)
    table.to_csv(out / "standardized_rmse.csv")
    (out / "standardized_rmse.txt").write_text(table.to_text())
    counts = hyperparameter_table(reports)
    counts.to_csv(out / "hyperparameters.csv")
    (out / "hyperparameters.txt").write_text(counts.to_text())
    print("Standardized RMSE")
    print(table.to_text())
    print("Hyperparameters (noise included)")
    print(counts.to_text())
    return 0


def cmd_metric_compare(args) -> int:
    for path in args.series:
        if not Path(path).is_file():
            return _error(f"series file not found: {path}")
    try:
        resolve_kernel(args.kernel)
        metrics = [MetricKind.parse(m) for m in args.metrics] if args.metrics else None
        table = metric_comparison(args.series, args.kernel, metrics, args.ref, args.trials,
                                  args.seed, args.jobs)
    except (ParseError, FormatError, ValueError) as err:
        return _error(f"{type(err).__name__}: {err}")
    out = _output_dir(args.out)
    out.mkdir(parents=True, exist_ok=True)
    table.to_csv(out / "metric_comparison.csv", summary=False)
    (out / "metric_comparison.txt").write_text(table.to_text(summary=False))
    print(table.to_text(summary=False))
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="evocov",
                                description="Evolve Gaussian-process kernels for time series.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("search", help="run kernel searches described by a JSON config")
    s.add_argument("config")
    s.add_argument("--out", help=f"output directory (default: ${ENV_OUTPUT_DIR} or "
                                 f"{DEFAULT_OUTPUT_DIR})")
    s.add_argument("--seed", type=int, help="master seed (overrides the config)")
    s.add_argument("--jobs", type=int, default=1, help="parallel trials")
    s.set_defaults(func=cmd_search)

    e = sub.add_parser("eval", help="score one kernel on one series")
    e.add_argument("kernel", help="builtin name or serialized expression")
    e.add_argument("series")
    e.add_argument("--theta", help="hyperparameters, noise last; fitted by LML if omitted")
    e.add_argument("--ref", type=int, default=300, help="reference budget when fitting")
    e.add_argument("--seed", type=int, default=0)
    e.set_defaults(func=cmd_eval)

    r = sub.add_parser("report", help="standardized RMSE and hyperparameter tables")
    r.add_argument("dir")
    r.add_argument("--baselines", help="CSV of reference RMSEs (series, algorithm, rmse)")
    r.set_defaults(func=cmd_report)

    m = sub.add_parser("metric-compare", help="test RMSE of a kernel fitted by each metric")
    m.add_argument("series", nargs="+")
    m.add_argument("--kernel", default="SE")
    m.add_argument("--metrics", nargs="*", help="subset of metrics (default: all five)")
    m.add_argument("--ref", type=int, default=5000)
    m.add_argument("--trials", type=int, default=10)
    m.add_argument("--seed", type=int, default=0)
    m.add_argument("--jobs", type=int, default=1)
    m.add_argument("--out")
    m.set_defaults(func=cmd_metric_compare)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
