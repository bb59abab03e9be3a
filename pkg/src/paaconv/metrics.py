"""Confusion-matrix based segmentation metrics (rows = truth, columns = prediction)."""
import csv

import numpy as np

from .exceptions import InvalidInputError, UndefinedMetricError


def confusion_matrix(n_classes):
    return np.zeros((n_classes, n_classes), dtype=np.int64)


def accumulate(cm, truth, pred):
    """Add one count per point to ``cm`` in place and return it.

    Points whose truth is -1 (unlabeled) are skipped.
    """
    truth = np.asarray(truth, dtype=np.int64).reshape(-1)
    pred = np.asarray(pred, dtype=np.int64).reshape(-1)
    if truth.shape != pred.shape:
        raise InvalidInputError(f"{len(truth)} truth labels vs {len(pred)} predictions")
    keep = truth != -1
    truth, pred = truth[keep], pred[keep]
    n = cm.shape[0]
    for name, ids in (("truth", truth), ("prediction", pred)):
        bad = (ids < 0) | (ids >= n)
        if bad.any():
            raise InvalidInputError(f"{name} id {ids[bad][0]} outside [0, {n})")
    cm += np.bincount(truth * n + pred, minlength=n * n).reshape(n, n)
    return cm


def _check(cm):
    cm = np.asarray(cm)
    if cm.sum() == 0:
        raise UndefinedMetricError("confusion matrix is empty")
    return cm


def overall_accuracy(cm):
    cm = _check(cm)
    return float(np.trace(cm) / cm.sum())


def per_class_accuracy(cm):
    """Recall per class; NaN for classes with no ground-truth points."""
    cm = np.asarray(cm)
    support = cm.sum(axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(support > 0, np.diag(cm) / support, np.nan)


def per_class_iou(cm):
    """Intersection over union per class; NaN where the union is empty."""
    cm = np.asarray(cm)
    inter = np.diag(cm)
    union = cm.sum(axis=1) + cm.sum(axis=0) - inter
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(union > 0, inter / union, np.nan)


def mean_class_accuracy(cm, return_excluded=False):
    """Mean recall over classes present in the ground truth.

    With ``return_excluded`` also returns how many classes were left out.
    """
    acc = per_class_accuracy(_check(cm))
    present = ~np.isnan(acc)
    if not present.any():
        raise UndefinedMetricError("no class present in the ground truth")
    value = float(acc[present].mean())
    return (value, int((~present).sum())) if return_excluded else value


def mean_iou(cm, return_excluded=False):
    iou = per_class_iou(_check(cm))
    defined = ~np.isnan(iou)
    if not defined.any():
        raise UndefinedMetricError("every class has an empty union")
    value = float(iou[defined].mean())
    return (value, int((~defined).sum())) if return_excluded else value


def write_metrics_csv(path, cm, class_names=None):
    """Per-class rows followed by ``overall`` and ``mean`` summary rows."""
    cm = np.asarray(cm)
    acc, iou = per_class_accuracy(cm), per_class_iou(cm)
    support = cm.sum(axis=1)

    def fmt(v):
        return "" if np.isnan(v) else repr(float(v))

    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["class", "name", "support", "accuracy", "iou"])
        for c in range(len(cm)):
            name = class_names[c] if class_names and c < len(class_names) else str(c)
            w.writerow([c, name, int(support[c]), fmt(acc[c]), fmt(iou[c])])
        w.writerow(["overall", "OA", int(cm.sum()), fmt(overall_accuracy(cm)), ""])
        w.writerow(["mean", "mAcc/mIoU", "", fmt(mean_class_accuracy(cm)), fmt(mean_iou(cm))])


def write_confusion_csv(path, cm):
    with open(path, "w", newline="") as fh:
        csv.writer(fh, lineterminator="\n").writerows(np.asarray(cm).tolist())
