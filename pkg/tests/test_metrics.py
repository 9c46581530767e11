"""Tests for pixel metrics, size bins and fold aggregation."""

import numpy as np
import pytest

from src.evaluation.metrics import (
    FoldSummary, ImageMetrics, PixelCounts, SizeBin, cross_fold, dice, fnr, fold_mean, fpr, image_metrics, iou,
    pixel_counts, size_bin, size_bin_table, tumor_length,
)
from src.evaluation.statistics import StatisticsError
from src.tensor import ShapeError

# Five-fold validation rows: (dice, iou, fpr, fnr)
FOLD_ROWS = [
    (0.8846, 0.8241, 0.0984, 0.0670),
    (0.8910, 0.8302, 0.1280, 0.0659),
    (0.8583, 0.7987, 0.1077, 0.0835),
    (0.8649, 0.8033, 0.0857, 0.0771),
    (0.8836, 0.8181, 0.0771, 0.0944),
]
PRINTED_MEANS = {"dice": 0.8765, "iou": 0.8149, "fpr": 0.0994, "fnr": 0.0776}


def brute_force(pred, truth):
    tp = fp = fn = tn = 0
    for p, t in zip(pred.ravel(), truth.ravel()):
        if p and t:
            tp += 1
        elif p:
            fp += 1
        elif t:
            fn += 1
        else:
            tn += 1
    return tp, fp, fn, tn


class TestPixelMetrics:
    def test_worked_counts(self):
        c = PixelCounts(tp=1, fp=2, fn=0, tn=1)
        assert fpr(c) == pytest.approx(2 / 3)
        assert fnr(c) == 0.0
        assert dice(c) == pytest.approx(0.5)
        assert iou(c) == pytest.approx(1 / 3)

    def test_perfect_prediction(self):
        mask = np.zeros((4, 4), dtype=np.uint8)
        mask[1:3, 1:3] = 1
        m = image_metrics("a", mask, mask)
        assert (m.dice, m.fpr, m.fnr) == (pytest.approx(1.0), 0.0, 0.0)
        assert m.iou == pytest.approx(1.0)

    def test_both_empty(self):
        m = image_metrics("a", np.zeros((4, 4)), np.zeros((4, 4)))
        assert (m.dice, m.iou, m.fpr, m.fnr) == (1.0, 1.0, 0.0, 0.0)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            pixel_counts(np.zeros((2, 2)), np.zeros((3, 3)))

    def test_matches_oracle_on_random_masks(self):
        rng = np.random.default_rng(2024)
        for _ in range(1000):
            pred = rng.random((8, 8)) < rng.random()
            truth = rng.random((8, 8)) < rng.random()
            tp, fp, fn, tn = brute_force(pred, truth)
            c = pixel_counts(pred, truth)
            assert (c.tp, c.fp, c.fn, c.tn) == (tp, fp, fn, tn)
            if tp + fp + fn:
                assert dice(c) == 2 * tp / (2 * tp + fp + fn + 1e-8)
                assert iou(c) == tp / (tp + fp + fn + 1e-8)
                assert dice(c) >= iou(c)
            assert fpr(c) == fp / (fp + tn + 1e-8)
            if tp + fn:
                assert fnr(c) == fn / (fn + tp + 1e-8)


class TestTumorLength:
    def test_rescaled_to_reference_frame(self):
        truth = np.zeros((32, 32), dtype=np.uint8)
        truth[4:14, 10:15] = 1
        assert tumor_length(truth) == 110

    def test_empty(self):
        assert tumor_length(np.zeros((8, 8))) == 0

    @pytest.mark.parametrize("length,expected", [
        (0, SizeBin.SMALL), (110, SizeBin.SMALL), (111, SizeBin.MEDIUM), (250, SizeBin.MEDIUM),
        (251, SizeBin.LARGE),
    ])
    def test_bins(self, length, expected):
        assert size_bin(length) is expected

    def test_bins_partition_lengths(self):
        for length in range(400):
            assert sum(size_bin(length) is b for b in SizeBin) == 1


class TestAggregation:
    def summaries(self):
        return [FoldSummary(i, 10, *row) for i, row in enumerate(FOLD_ROWS)]

    def test_reproduces_printed_means(self):
        summary = cross_fold(self.summaries())
        for name, printed in PRINTED_MEANS.items():
            assert abs(summary[name]["mean"] - printed) < 5e-5, name

    def test_fold_mean_is_unweighted(self):
        metrics = [ImageMetrics(f"img{i}", *row, tumor_length_px=50) for i, row in enumerate(FOLD_ROWS)]
        summary = fold_mean(metrics, fold_index=3)
        assert summary.fold_index == 3
        assert summary.count == 5
        assert summary.dice == pytest.approx(np.mean([r[0] for r in FOLD_ROWS]))

    def test_sample_sd(self):
        summary = cross_fold(self.summaries())
        assert summary["dice"]["sd"] == pytest.approx(np.std([r[0] for r in FOLD_ROWS], ddof=1))

    def test_single_fold_sd_zero(self):
        assert cross_fold(self.summaries()[:1])["iou"]["sd"] == 0.0

    def test_empty(self):
        with pytest.raises(StatisticsError):
            fold_mean([])
        with pytest.raises(StatisticsError):
            cross_fold([])

    def test_size_table_always_three_rows(self):
        metrics = [ImageMetrics("a", 0.8, 0.7, 0.1, 0.1, 90), ImageMetrics("b", 0.6, 0.5, 0.1, 0.3, 100)]
        table = size_bin_table(metrics)
        assert [row["bin"] for row in table] == ["0-110", "111-250", "250+"]
        assert table[0]["count"] == 2
        assert table[0]["dice"] == pytest.approx(0.7)
        assert table[1]["count"] == 0 and table[1]["dice"] is None
