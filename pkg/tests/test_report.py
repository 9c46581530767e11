"""Tests for report assembly, emission and reloading."""

import csv
import json

import pytest

from src.evaluation.metrics import ImageMetrics
from src.evaluation.report import (
    REPORT_CSV, REPORT_JSON, SCHEMA_VERSION, ReportError, build_report, emit_report, load_report,
)


def metrics(fold, offset=0.0, count=4):
    return [ImageMetrics(f"f{fold}_{i}", 0.8 + offset + 0.01 * i, 0.7 + offset + 0.01 * i, 0.05, 0.1,
                         60 + 80 * i, fold) for i in range(count)]


@pytest.fixture
def two_pass():
    return metrics(0, 0.05) + metrics(1, 0.05)


@pytest.fixture
def first_pass():
    return metrics(0) + metrics(1)


def test_structure(two_pass, first_pass, logger):
    report = build_report(two_pass, first_pass, 0.5, 0.3, {"seed": 1}, logger=logger)
    assert report["schema_version"] == SCHEMA_VERSION
    assert report["thresholds"] == {"tau_seg": 0.5, "tau_proposal": 0.3}
    assert report["config"] == {"seed": 1}
    assert [f["fold_index"] for f in report["folds"]] == [0, 1]
    assert len(report["size_bins"]) == 3
    assert report["images"][0]["first_pass"]["dice"] == pytest.approx(0.8)
    assert report["summary"]["dice"]["mean"] == pytest.approx(0.865)


def test_paired_test_against_first_pass(two_pass, first_pass, logger):
    report = build_report(two_pass, first_pass, 0.5, 0.3, logger=logger)
    block = report["paired_tests"]["two_pass_vs_first_pass"]
    assert block["n_pairs"] == 8
    assert block["dice"]["rank_biserial"] == pytest.approx(1.0)
    assert report["median_abs_rank_biserial"] == pytest.approx(1.0)


def test_identical_runs_record_undefined_test(two_pass, logger):
    report = build_report(two_pass, two_pass, 0.5, 0.3, logger=logger)
    assert "error" in report["paired_tests"]["two_pass_vs_first_pass"]["dice"]
    assert report["median_abs_rank_biserial"] is None
    logger.warning.assert_called()


def test_baseline_comparison(two_pass, first_pass, tmp_path, logger):
    baseline_dir = tmp_path / "baseline"
    emit_report(build_report(first_pass, first_pass, 0.5, 0.3, logger=logger), str(baseline_dir), logger)
    baseline = load_report(str(baseline_dir))
    report = build_report(two_pass, first_pass, 0.5, 0.3, baseline=baseline, logger=logger)
    assert report["paired_tests"]["two_pass_vs_baseline"]["n_pairs"] == 8


def test_emit_and_reload(two_pass, first_pass, tmp_path, logger):
    report = build_report(two_pass, first_pass, 0.5, 0.3, logger=logger)
    path = emit_report(report, str(tmp_path), logger)
    assert path.endswith(REPORT_JSON)
    assert load_report(path) == json.loads(json.dumps(report))
    with open(tmp_path / REPORT_CSV, newline="", encoding="utf-8") as handle:
        rows = list(csv.DictReader(handle))
    assert len(rows) == 8
    assert rows[0]["image_id"] == "f0_0"
    assert rows[0]["size_bin"] == "0-110"


def test_load_rejects_other_schema(tmp_path):
    path = tmp_path / REPORT_JSON
    path.write_text(json.dumps({"schema_version": 99}), encoding="utf-8")
    with pytest.raises(ReportError):
        load_report(str(path))


def test_load_missing(tmp_path):
    with pytest.raises(ReportError):
        load_report(str(tmp_path / "nope.json"))


def test_emit_to_unwritable_location(two_pass, first_pass, tmp_path, logger):
    blocker = tmp_path / "file"
    blocker.write_text("x", encoding="utf-8")
    report = build_report(two_pass, first_pass, 0.5, 0.3, logger=logger)
    with pytest.raises(ReportError):
        emit_report(report, str(blocker / "sub"), logger)
