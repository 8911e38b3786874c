import json
import math

import numpy as np
import pytest

from evocov.bench import (
    FormatError,
    hyperparameter_table,
    load_series,
    metric_comparison,
    prepare_series,
    protocol_split,
    read_baselines,
    read_reports,
    run_trials,
    standardize,
    standardized_rmse,
    trial_seeds,
    TrialReport,
)
from evocov.evolve import SearchConfig
from evocov.gp import Dataset

TINY = SearchConfig(population_size=4, generations=2, n_selected=1, ref_fun_call=10,
                    series_len=350)


def write_series(path, n=40, with_t=True, seed=0):
    r = np.random.default_rng(seed)
    t = np.arange(n) * 0.5 + 10
    y = 3 * np.sin(t) + 0.2 * t + 50 + r.normal(0, 0.1, n)
    with open(path, "w") as fh:
        fh.write("t,y\n" if with_t else "y\n")
        for a, b in zip(t, y):
            fh.write(f"{float(a)!r},{float(b)!r}\n" if with_t else f"{float(b)!r}\n")
    return t, y


def test_load_single_column_index(tmp_path):
    p = tmp_path / "s.csv"
    p.write_text("y\n1\n2\n3\n4\n5\n")
    ds, spec, t, y = load_series(p)
    np.testing.assert_allclose(ds.X[:, 0], [0, 0.25, 0.5, 0.75, 1.0])
    assert spec.n == 5 and spec.name == "s"
    assert ds.f.mean() == pytest.approx(0) and ds.f.std() == pytest.approx(1)
    np.testing.assert_allclose(spec.from_f(ds.f), y)


def test_load_errors(tmp_path):
    p = tmp_path / "bad.csv"
    p.write_text("t,y\n0,1\n1,abc\n2,3\n")
    with pytest.raises(FormatError) as info:
        load_series(p)
    assert info.value.line == 3
    p.write_text("t,y\n0,1\n1,nan\n")
    with pytest.raises(FormatError):
        load_series(p)
    p.write_text("t,y\n1,1\n0,2\n")
    with pytest.raises(FormatError, match="increasing"):
        load_series(p)
    with pytest.raises(OSError):
        load_series(tmp_path / "missing.csv")


def test_protocol_split():
    def ds(n):
        return Dataset(np.arange(float(n)), np.zeros(n))
    assert [d.n for d in protocol_split(ds(144))] == [129, 15]
    assert [d.n for d in protocol_split(ds(1000))] == [900, 100]
    with pytest.raises(ValueError):
        protocol_split(ds(9))


def test_normalization_uses_training_prefix_only(tmp_path):
    p = tmp_path / "s.csv"
    t, y = write_series(p, 30)
    train, test, spec, _, _ = prepare_series(p)
    assert spec.f_shift == pytest.approx(y[:27].mean())
    assert spec.f_scale == pytest.approx(y[:27].std())
    assert train.X[0, 0] == 0 and test.X[-1, 0] == 1


def test_denormalized_rmse_roundtrip(tmp_path):
    p = tmp_path / "s.csv"
    write_series(p, 30)
    train, test, spec, _, y = prepare_series(p)
    pred = test.f + 0.3
    norm_rmse = math.sqrt(np.mean((pred - test.f) ** 2))
    orig_rmse = math.sqrt(np.mean((spec.from_f(pred) - y[27:]) ** 2))
    assert orig_rmse == pytest.approx(norm_rmse * spec.f_scale, rel=1e-10)


def test_trial_seeds_distinct():
    s = trial_seeds(0, 10)
    assert len(set(s)) == 10 and s == trial_seeds(0, 10)


def test_run_trials_fixed_builtin_and_resume(tmp_path):
    p = tmp_path / "s.csv"
    write_series(p)
    out = tmp_path / "out"
    reports = run_trials([p], "fixed_builtin", TINY, trials=2, out_dir=out)
    assert [r.trial for r in reports] == [0, 1]
    assert all(r.status == "ok" and math.isfinite(r.test_rmse) for r in reports)
    pred = (out / reports[0].predictions).read_text().splitlines()
    assert pred[0] == "t,y_true,y_mean,y_std" and len(pred) == 1 + 4
    # drop trial 1 and resume: only that trial runs again
    lines = (out / "reports.jsonl").read_text().splitlines()
    (out / "reports.jsonl").write_text(lines[0] + "\n")
    before = (out / "timings.jsonl").read_text().count("\n")
    again = run_trials([p], "fixed_builtin", TINY, trials=2, out_dir=out)
    after = (out / "timings.jsonl").read_text().count("\n")
    assert after - before == 1
    assert [r.to_json() for r in again] == [r.to_json() for r in reports]


def test_run_trials_records_failures(tmp_path):
    p = tmp_path / "s.csv"
    write_series(p)
    reports = run_trials([p], "fixed_builtin", TINY, trials=1, out_dir=tmp_path / "o",
                         kernel="(sqrt -1)")
    assert reports[0].status == "failed" and "RuntimeError" in reports[0].error


def test_run_trials_search_writes_telemetry(tmp_path):
    p = tmp_path / "s.csv"
    write_series(p)
    out = tmp_path / "o"
    (r,) = run_trials([p], "evocov", TINY, trials=1, out_dir=out)
    lines = (out / r.telemetry).read_text().splitlines()
    assert [json.loads(x)["gen"] for x in lines] == [1, 2]


def test_run_trials_parallel_matches_serial(tmp_path):
    p = tmp_path / "s.csv"
    write_series(p)
    a = run_trials([p], "fixed_builtin", TINY, trials=2, out_dir=tmp_path / "a")
    b = run_trials([p], "fixed_builtin", TINY, trials=2, out_dir=tmp_path / "b", jobs=2)
    assert [r.to_json() for r in a] == [r.to_json() for r in b]


def test_standardize_examples():
    assert standardize({"a": 2.0, "b": 4.0}) == {"a": 1.0, "b": 2.0}
    assert standardize({"a": 3.0}) == {"a": 1.0}
    assert standardize({"a": 3.0}, baseline_min=1.5) == {"a": 2.0}


def _report(series, alg, trial, rmse, q=3):
    return TrialReport(series, alg, trial, trial, test_rmse=rmse, q=q)


def test_standardized_table():
    reports = [_report("s1", "evocov", 0, 2.0), _report("s1", "evocov", 1, 4.0),
               _report("s1", "fixed_builtin", 0, 6.0),
               _report("s2", "evocov", 0, 5.0), _report("s2", "fixed_builtin", 0, 1.0),
               TrialReport("s2", "evocov", 1, 1, status="failed")]
    t = standardized_rmse(reports)
    assert t.values[("s1", "evocov")] == 1.0 and t.values[("s1", "fixed_builtin")] == 2.0
    assert t.values[("s2", "evocov")] == 5.0
    assert t.mean("evocov") == 3.0 and t.median("fixed_builtin") == 1.5
    assert min(t.values[(s, a)] for s in t.series for a in t.columns
               if (s, a) in t.values) == 1.0
    text = t.to_text()
    assert "Mean" in text and "Median" in text


def test_standardized_with_baselines(tmp_path):
    b = tmp_path / "b.csv"
    b.write_text("series,algorithm,rmse\ns1,paper,1.5\n")
    t = standardized_rmse([_report("s1", "evocov", 0, 3.0)], read_baselines(b))
    assert t.values[("s1", "evocov")] == 2.0 and t.values[("s1", "paper")] == 1.0
    assert t.columns == ["evocov", "paper"]


def test_hyperparameter_table():
    t = hyperparameter_table([_report("s", "evocov", 0, 1.0, q=4),
                              _report("s", "evocov", 1, 1.0, q=6)])
    assert t.values[("s", "evocov")] == 5.0


def test_read_reports_roundtrip(tmp_path):
    r = _report("s", "evocov", 0, 1.0)
    (tmp_path / "reports.jsonl").write_text(r.to_json() + "\n")
    assert read_reports(tmp_path) == [r]
    assert read_reports(tmp_path / "nothing") == []


def test_metric_comparison_shape(tmp_path):
    paths = []
    for i in range(2):
        p = tmp_path / f"s{i}.csv"
        write_series(p, seed=i)
        paths.append(p)
    t = metric_comparison(paths, "SE", ref_fun_call=20, trials=2)
    assert t.series == ["lml", "loocv", "posterior_lml", "sopl", "traintest_rmse"]
    assert t.columns == ["s0", "s1"]
    assert len(t.values) == 10 and all(math.isfinite(v) for v in t.values.values())


def test_metric_comparison_flat_series(tmp_path):
    p = tmp_path / "flat.csv"
    p.write_text("y\n" + "2.0\n" * 20)
    t = metric_comparison([p], "SE", ref_fun_call=20, trials=1)
    assert all(math.isfinite(v) for v in t.values.values())
