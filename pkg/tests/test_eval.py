import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

import oracles
from enhseg.core import ClassVocabulary, DataError, LabelMap, ValidationError
from enhseg.eval import (ConfusionMatrix, UndefinedMetricError, confusion_accumulate, evaluate, format_report,
                         iou_per_class, miou, pixel_accuracy, write_report)


def test_perfect_prediction_scores_one(rng):
    gt = rng.integers(0, 4, (6, 6))
    gt[0, :4] = [0, 1, 2, 3]
    cm = confusion_accumulate(gt, gt, ConfusionMatrix(4))
    assert miou(cm) == 1.0 and pixel_accuracy(cm) == 1.0


def test_three_sevenths_example():
    gt = np.array([[1, 1, 1, 1, 1, 0, 0]])
    pred = np.array([[1, 1, 1, 0, 0, 1, 1]])
    iou = iou_per_class(confusion_accumulate(pred, gt, ConfusionMatrix(2)))
    assert iou[1] == pytest.approx(3 / 7) and iou[1] == pytest.approx(0.42857, abs=1e-5)


def test_matches_loop_oracle_on_random_instances():
    r = np.random.default_rng(0)
    for _ in range(100):
        C = int(r.integers(2, 6))
        H, W = r.integers(1, 17, 2)
        gt = r.choice(list(range(C)) + [255], (H, W))
        pred = r.integers(0, C, (H, W))
        cm = confusion_accumulate(pred, gt, ConfusionMatrix(C))
        ref = oracles.confusion(pred, gt, C)
        np.testing.assert_array_equal(cm.counts, ref)
        np.testing.assert_allclose(iou_per_class(cm), oracles.iou(ref), rtol=1e-12, equal_nan=True)


def test_all_ignored_ground_truth_adds_nothing(rng):
    cm = confusion_accumulate(rng.integers(0, 3, (4, 4)), rng.integers(0, 3, (4, 4)), ConfusionMatrix(3))
    before = cm.counts.copy()
    confusion_accumulate(rng.integers(0, 3, (4, 4)), np.full((4, 4), 255), cm)
    np.testing.assert_array_equal(cm.counts, before)


def test_predictions_on_ignored_pixels_may_be_anything():
    gt = np.array([[0, 255]])
    cm = confusion_accumulate(np.array([[0, 77]]), gt, ConfusionMatrix(2))
    assert cm.total == 1


def test_mean_over_classes():
    cm = ConfusionMatrix(2, np.array([[2, 1], [2, 3]]))
    np.testing.assert_allclose(iou_per_class(cm), [0.4, 0.5])
    assert miou(cm) == pytest.approx(0.45)
    cm = ConfusionMatrix(3, np.array([[2, 0, 3], [0, 3, 0], [0, 2, 5]]))
    np.testing.assert_allclose(iou_per_class(cm), [0.4, 0.6, 0.5])
    assert miou(cm) == pytest.approx(0.5)


def test_absent_classes_are_skipped_not_zero():
    cm = confusion_accumulate(np.array([[0, 0, 1]]), np.array([[0, 0, 1]]), ConfusionMatrix(5))
    assert np.isnan(iou_per_class(cm)[2:]).all()
    assert miou(cm) == 1.0


def test_undefined_metric():
    with pytest.raises(UndefinedMetricError):
        miou(ConfusionMatrix(3))


def test_invalid_inputs():
    with pytest.raises(ValidationError):
        confusion_accumulate(np.zeros((2, 2), int), np.zeros((2, 3), int), ConfusionMatrix(2))
    with pytest.raises(ValidationError):
        confusion_accumulate(np.full((1, 1), 2), np.zeros((1, 1), int), ConfusionMatrix(2))


@given(st.integers(0, 2**32 - 1))
def test_relabeling_classes_permutes_ious(seed):
    r = np.random.default_rng(seed)
    C = 4
    gt, pred = r.integers(0, C, (2, 6, 7))
    perm = r.permutation(C)
    a = iou_per_class(confusion_accumulate(pred, gt, ConfusionMatrix(C)))
    b = iou_per_class(confusion_accumulate(perm[pred], perm[gt], ConfusionMatrix(C)))
    np.testing.assert_allclose(b[perm], a, equal_nan=True)


@given(st.integers(0, 2**32 - 1), st.integers(1, 5))
def test_accumulation_is_order_free_and_additive(seed, n):
    r = np.random.default_rng(seed)
    pairs = [(r.integers(0, 3, (4, 5)), r.choice([0, 1, 2, 255], (4, 5))) for _ in range(n)]
    fwd, rev = ConfusionMatrix(3), ConfusionMatrix(3)
    parts = []
    for p, g in pairs:
        confusion_accumulate(p, g, fwd)
        parts.append(confusion_accumulate(p, g, ConfusionMatrix(3)))
    for p, g in reversed(pairs):
        confusion_accumulate(p, g, rev)
    np.testing.assert_array_equal(fwd.counts, rev.counts)
    total = parts[0]
    for c in parts[1:]:
        total = total + c
    np.testing.assert_array_equal(total.counts, fwd.counts)


def test_evaluate_and_report(tmp_path, rng):
    vocab = ClassVocabulary(("bg", "a", "b"))
    gts = [LabelMap(rng.integers(0, 3, (5, 5))) for _ in range(3)]
    samples = [(f"s{k}", np.zeros((5, 5, 3)), g) for k, g in enumerate(gts)]
    res = evaluate(lambda img: np.zeros(img.shape[:2], int), samples, vocab, dump_dir=tmp_path / "pred")
    assert res["n_images"] == 3 and len(list((tmp_path / "pred").glob("*.png"))) == 3
    bg_frac = sum((g.ids == 0).sum() for g in gts) / 75
    assert res["pixel_accuracy"] == pytest.approx(bg_frac)
    assert res["per_class_iou"]["a"] == 0.0
    assert "mIoU" in format_report(res)
    write_report(tmp_path / "r" / "report.json", res)
    assert json.loads((tmp_path / "r" / "report.json").read_text())["miou"] == pytest.approx(res["miou"])


def test_empty_evaluation_set():
    with pytest.raises(DataError):
        evaluate(lambda x: x, [], ClassVocabulary(("a", "b")))
