import csv

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import brute_metrics
from paaconv.exceptions import InvalidInputError, UndefinedMetricError
from paaconv.metrics import (
    accumulate, confusion_matrix, mean_class_accuracy, mean_iou, overall_accuracy,
    per_class_accuracy, per_class_iou, write_confusion_csv, write_metrics_csv,
)


def test_accumulate_examples():
    cm = accumulate(confusion_matrix(2), [0], [0])
    assert cm.tolist() == [[1, 0], [0, 0]]
    cm = accumulate(confusion_matrix(2), [0, 1], [1, 1])
    assert cm.tolist() == [[0, 1], [0, 1]]
    assert accumulate(cm, [], []).tolist() == [[0, 1], [0, 1]]


def test_accumulate_skips_unlabeled():
    cm = accumulate(confusion_matrix(3), [-1, 2, -1], [0, 2, 1])
    assert cm.sum() == 1 and cm[2, 2] == 1


@pytest.mark.parametrize("truth, pred", [([3], [0]), ([0], [3]), ([0], [-1]), ([0, 1], [0])])
def test_accumulate_rejects(truth, pred):
    with pytest.raises(InvalidInputError):
        accumulate(confusion_matrix(3), truth, pred)


def test_worked_matrices():
    assert overall_accuracy([[3, 1], [1, 3]]) == 0.75
    assert mean_class_accuracy(np.array([[3, 1], [2, 2]])) == 0.625
    assert mean_iou(np.array([[3, 1], [2, 2]])) == pytest.approx(0.45, abs=1e-15)
    np.testing.assert_allclose(per_class_iou(np.array([[3, 1], [2, 2]])), [0.5, 0.4])


def test_perfect_and_hopeless():
    eye = np.diag([4, 5, 6])
    assert overall_accuracy(eye) == mean_class_accuracy(eye) == mean_iou(eye) == 1.0
    assert overall_accuracy(np.array([[0, 3], [2, 0]])) == 0.0


def test_absent_classes_excluded():
    cm = np.array([[3, 0, 1], [0, 0, 0], [1, 0, 3]])
    assert mean_class_accuracy(cm, return_excluded=True) == (0.75, 1)
    assert mean_iou(cm, return_excluded=True) == (0.6, 1)
    # class 1 predicted but never true: excluded from mAcc, kept (IoU 0) in mIoU
    cm = np.array([[2, 2], [0, 0]])
    assert mean_class_accuracy(cm, return_excluded=True) == (0.5, 1)
    assert mean_iou(cm, return_excluded=True) == (0.25, 0)


def test_empty_matrix_is_undefined():
    for fn in (overall_accuracy, mean_class_accuracy, mean_iou):
        with pytest.raises(UndefinedMetricError):
            fn(confusion_matrix(3))


@pytest.mark.parametrize("seed", range(10))
def test_brute_force_agreement(seed):
    rng = np.random.default_rng(seed)
    n_classes = int(rng.integers(2, 7))
    n = int(rng.integers(1, 3000))
    truth = rng.integers(-1, n_classes, n)
    truth[0] = 0
    pred = np.where(rng.random(n) < 0.6, np.maximum(truth, 0), rng.integers(0, n_classes, n))
    cm = accumulate(confusion_matrix(n_classes), truth, pred)
    oa, macc, miou = brute_metrics(truth.tolist(), pred.tolist(), n_classes)
    assert overall_accuracy(cm) == oa
    assert mean_class_accuracy(cm) == macc
    assert mean_iou(cm) == miou


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_iou_bounded_by_accuracy_and_order_free(seed):
    rng = np.random.default_rng(seed)
    truth, pred = rng.integers(0, 4, 200), rng.integers(0, 4, 200)
    cm = accumulate(confusion_matrix(4), truth, pred)
    acc, iou = per_class_accuracy(cm), per_class_iou(cm)
    ok = ~np.isnan(acc)
    assert (iou[ok] <= acc[ok] + 1e-15).all()
    perm = rng.permutation(200)
    np.testing.assert_array_equal(accumulate(confusion_matrix(4), truth[perm], pred[perm]), cm)


def test_merging_matrices(rng):
    truth, pred = rng.integers(0, 3, 100), rng.integers(0, 3, 100)
    whole = accumulate(confusion_matrix(3), truth, pred)
    parts = accumulate(confusion_matrix(3), truth[:40], pred[:40]) + \
        accumulate(confusion_matrix(3), truth[40:], pred[40:])
    np.testing.assert_array_equal(whole, parts)


def test_csv_reports(tmp_path):
    cm = np.array([[3, 1, 0], [2, 2, 0], [0, 0, 0]])
    write_metrics_csv(tmp_path / "m.csv", cm, ["a", "b", "c"])
    rows = list(csv.reader((tmp_path / "m.csv").open()))
    assert rows[0] == ["class", "name", "support", "accuracy", "iou"]
    assert rows[1] == ["0", "a", "4", "0.75", "0.5"]
    assert rows[3] == ["2", "c", "0", "", ""]
    assert rows[4][:4] == ["overall", "OA", "8", "0.625"]
    assert float(rows[5][3]) == 0.625 and float(rows[5][4]) == pytest.approx(0.45)
    write_confusion_csv(tmp_path / "c.csv", cm)
    assert (tmp_path / "c.csv").read_text() == "3,1,0\n2,2,0\n0,0,0\n"
