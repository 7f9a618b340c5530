import csv
import io
import math

import pytest

from lipsoc.bench import (
    BenchResult,
    Stats,
    bench_grad,
    depth_to_n,
    fit_slope,
    raw_csv,
    results_csv,
    results_markdown,
    slope_ratio,
    summarize_raw,
)


def _rows(text):
    return list(csv.DictReader(io.StringIO("\n".join(l for l in text.splitlines() if not l.startswith("#")))))


def test_rep_and_warmup_minimums():
    with pytest.raises(ValueError, match="reps"):
        bench_grad([6], [4], reps=1)
    with pytest.raises(ValueError, match="warmup"):
        bench_grad([6], [4], reps=30, warmup=0)


def test_depth_mapping():
    assert [depth_to_n(d) for d in (6, 11, 16, 21)] == [5, 10, 15, 20]
    for bad in (5, 7, 10):
        with pytest.raises(ValueError):
            depth_to_n(bad)


def test_stats_and_slope():
    s = Stats.of([1, 2, 3, 4, 5])
    assert s.median == 3 and s.iqr == 2
    assert fit_slope([1, 2, 3], [2, 4, 6]) == pytest.approx(2.0)
    with pytest.raises(ValueError):
        fit_slope([1], [1])


def test_csv_medians_recompute_from_raw():
    results, raw = bench_grad([6, 11], [3, 6], reps=30, warmup=5, channels=4, batch=1, spatial=32,
                              network=True)
    assert len(results) == 4 and all(r.stats for r in results)
    summary = summarize_raw(raw)
    rows = _rows(results_csv(results, "abc"))
    assert len(rows) == 4
    for row in rows:
        for comp in ("forward", "weight_grad_exact", "weight_grad_fast", "step_exact", "step_fast"):
            again = summary[(row["config_id"], comp)]
            assert float(row[f"{comp}_median"]) == pytest.approx(again.median, rel=1e-8)
            assert float(row[f"{comp}_iqr"]) == pytest.approx(again.iqr, rel=1e-8, abs=1e-15)
    assert len(_rows(raw_csv(raw, "abc"))) == len(raw) == 4 * 6 * 30
    assert results_csv(results, "abc").startswith("# manifest=abc")
    fast, exact, ratio = slope_ratio(results)
    assert ratio == pytest.approx(fast / exact)
    assert "| 11 | 6 |" in results_markdown(results, "abc")


def test_untimed_rows_are_reported():
    r = BenchResult(7, 4, 10, 8, note="skipped: too large")
    assert math.isnan(r.reduction) and r.config_id == "L7-c4-k10-b8"
    assert "skipped" in results_markdown([r], "x")
    assert _rows(results_csv([r], "x"))[0]["reduction"] == ""
