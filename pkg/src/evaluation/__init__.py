"""Metrics, paired statistics, overlays, reports and the cross-validation harness."""
