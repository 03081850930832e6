import json

import pytest

from weak2strong.reporting import (TABLE_COLUMNS, RunReport, emit_report, plot_band, plot_curves,
                                   read_log_csv, render_table, reports_from_csv, reports_from_json,
                                   reports_to_csv, reports_to_json, write_log_csv)
from weak2strong.training import EvalLogRow


def _report(base=10, ours=6, **kw):
    fields = dict(dataset="gaussian_mixture", student="mlp-64x64", teacher="mlp-32x32",
                  optimizer="adamw", teacher_metric=0.7731, tau=0.7731, seed=0,
                  first_at_tau_base=base, first_at_tau_ours=ours, speedup=None,
                  best_metric_base=0.8251, best_metric_ours=0.8263)
    fields.update(kw)
    return RunReport(**fields)


def test_speedup_cell_and_columns():
    text = render_table([_report(), _report(None, 6)])
    header, _, row1, row2 = text.splitlines()
    assert [c.strip() for c in header.split("|")] == TABLE_COLUMNS
    assert "1.67×" in row1 and "10 ep → 6 ep" in row1
    assert "—" in row2


def test_speedup_present_iff_both_crossings():
    assert _report().speedup == pytest.approx(10 / 6)
    assert _report(None, 6).speedup is None
    assert _report(10, None, speedup=3.0).speedup is None


def test_step_units():
    text = render_table([_report(16000, 6000, unit="step")])
    assert "16k → 6k" in text and "2.67×" in text


def test_csv_and_json_round_trip():
    reports = [_report(), _report(None, 7, seed=3, best_metric_base=0.1 + 0.2),
               _report(19, 37, failed=True, error="diverged")]
    assert reports_from_csv(reports_to_csv(reports)) == reports
    assert reports_from_json(reports_to_json(reports)) == reports


def test_emit_report(tmp_path):
    out = tmp_path / "r.json"
    text = emit_report([_report()], "json", out)
    assert json.loads(out.read_text()) == json.loads(text)
    with pytest.raises(ValueError):
        emit_report([], "table")
    with pytest.raises(ValueError):
        emit_report([_report()], "xml")


def _rows(run_id, n=4):
    return [EvalLogRow(run_id, float(i), 0.5 + 0.1 * i, 0.3, i < 2, 1.5, 0.25, 0.01 * i, i,
                       0.7, 0.2, 2.0, 10 * i, f"fp{i}") for i in range(1, n + 1)]


def test_log_csv_schema_and_round_trip(tmp_path):
    rows = _rows("ours-0")
    path = write_log_csv(tmp_path / "log.csv", rows)
    header = path.read_text().splitlines()[0].split(",")
    assert header[:8] == ["run_id", "index", "metric", "lambda_eff", "gate_active",
                          "grad_norm_base", "grad_norm_distill", "wall_time"]
    assert read_log_csv(path) == rows


def test_svg_outputs(tmp_path):
    svg = plot_curves(tmp_path / "c.svg", {"base": _rows("base-0"), "ours": _rows("ours-0")},
                      tau=0.7, gate_off=2.0).read_text()
    assert svg.startswith("<?xml") and "<svg" in svg
    band = plot_band(tmp_path / "b.svg", [-40.0, -7.0, 3.0], [1.05, 1.33, 1.2],
                     ["weak", "mid", "strong"]).read_text()
    assert "<svg" in band
