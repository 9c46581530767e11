"""Report assembly, emission (JSON + CSV) and reloading."""

import csv
import json
import os
from typing import Any, Dict, List, Optional, Sequence

import numpy as np

from ..logger import RunLogger, get_logger
from .metrics import METRIC_NAMES, FoldSummary, ImageMetrics, cross_fold, fold_mean, size_bin, size_bin_table
from .statistics import StatisticsError, wilcoxon_signed_rank

SCHEMA_VERSION = 1
REPORT_JSON = "report.json"
REPORT_CSV = "report.csv"
PAIRED_METRICS = ("dice", "iou")
CSV_COLUMNS = ("fold", "image_id", *METRIC_NAMES, "tumor_length_px", "size_bin", "first_pass_dice",
               "first_pass_iou")


class ReportError(Exception):
    """Raised when a report cannot be written or read."""
    pass


def _cell(value: Any) -> str:
    return "" if value is None else repr(value)


def _paired(label: str, ours: Dict[str, ImageMetrics], other: Dict[str, Dict[str, float]],
            logger: RunLogger) -> Dict[str, Any]:
    shared = sorted(set(ours) & set(other))
    block: Dict[str, Any] = {"n_pairs": len(shared)}
    for metric in PAIRED_METRICS:
        a = [getattr(ours[i], metric) for i in shared]
        b = [other[i][metric] for i in shared]
        try:
            block[metric] = wilcoxon_signed_rank(a, b).to_dict()
        except StatisticsError as e:
            logger.warning("ReportBuilder", f"Paired test '{label}' on {metric} undefined", {"reason": str(e)})
            block[metric] = {"error": str(e)}
    return block


def build_report(metrics: Sequence[ImageMetrics], first_pass: Sequence[ImageMetrics],
                 tau_seg: float, tau_proposal: float, run_config: Optional[Dict[str, Any]] = None,
                 baseline: Optional[Dict[str, Any]] = None, logger: Optional[RunLogger] = None) -> Dict[str, Any]:
    """
    Assemble the full report.

    Args:
        metrics: Two-pass per-image metrics; ImageMetrics.fold groups them into folds.
        first_pass: Location-free per-image metrics for the same images.
        tau_seg: Final segmentation threshold.
        tau_proposal: Proposal threshold of the first pass.
        run_config: Effective run configuration, echoed verbatim.
        baseline: Optional previously emitted report to compare against by image_id.
        logger: Optional logger.

    Returns:
        Report dict, JSON-serializable.
    """
    logger = logger or get_logger()
    first_by_id = {m.image_id: m for m in first_pass}
    folds: List[FoldSummary] = []
    for fold in sorted({m.fold for m in metrics}):
        folds.append(fold_mean([m for m in metrics if m.fold == fold], fold))

    images = []
    for m in metrics:
        row = m.to_dict()
        row["size_bin"] = size_bin(m.tumor_length_px).value
        first = first_by_id.get(m.image_id)
        row["first_pass"] = {k: getattr(first, k) for k in PAIRED_METRICS} if first else None
        images.append(row)

    ours = {m.image_id: m for m in metrics}
    comparisons = {
        "two_pass_vs_first_pass": _paired("two_pass_vs_first_pass", ours,
                                          {i: f.to_dict() for i, f in first_by_id.items()}, logger),
    }
    if baseline is not None:
        other = {row["image_id"]: row for row in baseline.get("images", [])}
        comparisons["two_pass_vs_baseline"] = _paired("two_pass_vs_baseline", ours, other, logger)

    effects = [abs(block[m]["rank_biserial"]) for block in comparisons.values()
               for m in PAIRED_METRICS if "rank_biserial" in block[m]]

    return {
        "schema_version": SCHEMA_VERSION,
        "sd_kind": "sample (n-1)",
        "thresholds": {"tau_seg": tau_seg, "tau_proposal": tau_proposal},
        "config": dict(run_config or {}),
        "images": images,
        "folds": [s.to_dict() for s in folds],
        "summary": cross_fold(folds) if folds else {},
        "size_bins": size_bin_table(metrics),
        "paired_tests": comparisons,
        "median_abs_rank_biserial": float(np.median(effects)) if effects else None,
    }


def emit_report(report: Dict[str, Any], report_dir: str, logger: Optional[RunLogger] = None) -> str:
    """
    Write report.json and report.csv into report_dir.

    Returns:
        str: Path of report.json.

    Raises:
        ReportError: If the directory is not writable.
    """
    logger = logger or get_logger()
    json_path = os.path.join(report_dir, REPORT_JSON)
    csv_path = os.path.join(report_dir, REPORT_CSV)
    try:
        os.makedirs(report_dir, exist_ok=True)
        with open(json_path, "w", encoding="utf-8", newline="\n") as handle:
            json.dump(report, handle, indent=2, sort_keys=True)
            handle.write("\n")
        with open(csv_path, "w", encoding="utf-8", newline="") as handle:
            writer = csv.writer(handle, lineterminator="\n")
            writer.writerow(CSV_COLUMNS)
            for row in report["images"]:
                first = row.get("first_pass") or {}
                writer.writerow([row["fold"], row["image_id"], *(_cell(row[k]) for k in METRIC_NAMES),
                                 row["tumor_length_px"], row["size_bin"],
                                 _cell(first.get("dice")), _cell(first.get("iou"))])
    except OSError as e:
        raise ReportError(f"cannot write report to {report_dir}: {e}")
    logger.info("ReportBuilder", "Report written", {"json": json_path, "csv": csv_path,
                                                    "images": len(report["images"])})
    return json_path


def load_report(path: str) -> Dict[str, Any]:
    """Read a report.json (or the directory holding one)."""
    if os.path.isdir(path):
        path = os.path.join(path, REPORT_JSON)
    try:
        with open(path, encoding="utf-8") as handle:
            report = json.load(handle)
    except (OSError, json.JSONDecodeError) as e:
        raise ReportError(f"cannot read report {path}: {e}")
    if report.get("schema_version") != SCHEMA_VERSION:
        raise ReportError(f"{path}: unsupported schema_version {report.get('schema_version')}")
    return report
