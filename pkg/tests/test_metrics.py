import math

import numpy as np
import pytest

from slimunet.losses import dice_loss
from slimunet.metrics import (
    ConfusionCounts,
    MetricsReport,
    aggregate_folds,
    binarize,
    confusion,
    evaluate_masks,
    format_metrics_table,
    metrics_from_counts,
    soft_dice,
)

GT = np.zeros((4, 4), np.uint8)
GT[0, :4] = 1
PRED = np.zeros((4, 4), np.uint8)
PRED[0, :3] = 1
PRED[1, 0] = 1


def test_fixture_counts():
    assert confusion(PRED, GT) == ConfusionCounts(tp=3, fp=1, fn=1, tn=11)


def test_fixture_metrics_exact():
    m = metrics_from_counts(ConfusionCounts(3, 1, 1, 11))
    assert m == {"P": 75.0, "R": 75.0, "F1": 75.0, "DC": 75.0, "IoU": 60.0}


def test_dice_iou_identity(rng):
    for _ in range(1000):
        tp, fp, fn = (int(v) for v in rng.integers(0, 1000, 3))
        if tp + fp + fn == 0:
            continue
        m = metrics_from_counts(ConfusionCounts(tp, fp, fn, 0))
        iou = m["IoU"] / 100
        assert abs(m["DC"] / 100 - 2 * iou / (1 + iou)) <= 1e-12


def test_f1_equals_dc(rng):
    for _ in range(200):
        tp, fp, fn = (int(v) for v in rng.integers(1, 500, 3))
        m = metrics_from_counts(ConfusionCounts(tp, fp, fn, 0))
        assert m["F1"] == pytest.approx(m["DC"], abs=1e-10)


def test_empty_case_scores_full():
    z = np.zeros((4, 4), np.uint8)
    assert metrics_from_counts(confusion(z, z)) == dict.fromkeys(("P", "R", "F1", "DC", "IoU"), 100.0)


def test_no_true_positives():
    m = metrics_from_counts(ConfusionCounts(0, 3, 2, 11))
    assert m == dict.fromkeys(("P", "R", "F1", "DC", "IoU"), 0.0)


def test_swap_symmetry(rng):
    a = (rng.random((8, 8)) < 0.5).astype(np.uint8)
    b = (rng.random((8, 8)) < 0.5).astype(np.uint8)
    m_ab = metrics_from_counts(confusion(a, b))
    m_ba = metrics_from_counts(confusion(b, a))
    assert m_ab["P"] == pytest.approx(m_ba["R"]) and m_ab["DC"] == m_ba["DC"]
    assert m_ab["IoU"] == m_ba["IoU"]


def test_dc_matches_unsmoothed_dice_loss(rng):
    for _ in range(50):
        a = (rng.random((6, 6)) < 0.4).astype(float)
        b = (rng.random((6, 6)) < 0.4).astype(float)
        if not (a.any() or b.any()):
            continue
        dc = metrics_from_counts(confusion(a, b))["DC"] / 100
        assert abs(dc - (1 - dice_loss(a, b, s=1e-12))) < 1e-9


def test_binarize_strict():
    np.testing.assert_array_equal(binarize([0.49, 0.5, 0.51]), [0, 0, 1])
    with pytest.raises(ValueError):
        binarize([0.2], threshold=1.0)


def test_non_binary_rejected():
    with pytest.raises(ValueError, match="binary"):
        confusion(np.array([0, 2]), np.array([0, 1]))


def test_soft_dice():
    assert soft_dice([1, 0], [1, 0]) == 100.0
    assert soft_dice([0, 0], [0, 0]) == 100.0


class TestReports:
    def test_per_image_mean(self):
        probs = np.stack([PRED.astype(float), GT.astype(float)])
        report = evaluate_masks(probs, [GT, GT], ["a", "b"], pooled=True)
        assert report.mean["DC"] == pytest.approx(87.5)
        assert report.std["DC"] == pytest.approx(12.5)
        # pooled: tp 7, fp 1, fn 1
        assert report.pooled["DC"] == pytest.approx(100 * 14 / 16)
        assert report.aggregate is report.pooled

    def test_fold_std_population(self):
        reports = []
        for fold, dc in enumerate([96.0, 98.0, 100.0]):
            m = dict.fromkeys(("P", "R", "F1", "DC", "IoU"), dc)
            reports.append(MetricsReport([("x", m)], fold_id=fold))
        summary = aggregate_folds(reports)
        assert summary.mean["DC"] == pytest.approx(98.0)
        assert summary.std["DC"] == pytest.approx(math.sqrt(8 / 3))
        assert summary.best_fold == 2

    def test_best_fold_tie_goes_to_lowest_id(self):
        m = dict.fromkeys(("P", "R", "F1", "DC", "IoU"), 90.0)
        reports = [MetricsReport([("x", m)], fold_id=i) for i in (3, 1, 2)]
        assert aggregate_folds(reports).best_fold == 1

    def test_empty_folds_rejected(self):
        with pytest.raises(ValueError):
            aggregate_folds([])

    def test_table(self):
        report = evaluate_masks([PRED.astype(float)], [GT], ["img0"], fold_id=0)
        lines = format_metrics_table([report]).splitlines()
        assert lines[0] == "fold,image_id,P,R,F1,DC,IoU"
        assert lines[1] == "0,img0,75.0000,75.0000,75.0000,75.0000,60.0000"
        assert [l.split(",")[1] for l in lines[2:]] == ["MEAN", "STD"]
