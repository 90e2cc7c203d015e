"""Occupancy IoU and semantic mIoU from a confusion matrix."""
from __future__ import annotations

import numpy as np

from .errors import DimMismatch

IGNORE = 255


def confusion_matrix(pred, gt, num_classes, ignore_label=IGNORE):
    """``cm[g, p]`` counts voxels with ground truth ``g`` predicted as ``p``; ignored gt voxels are skipped."""
    pred = np.asarray(pred).reshape(-1).astype(np.int64)
    gt = np.asarray(gt).reshape(-1).astype(np.int64)
    keep = gt != ignore_label
    return np.bincount(gt[keep] * num_classes + pred[keep], minlength=num_classes ** 2).reshape(num_classes, num_classes)


def _ratio(num, den):
    return 1.0 if den == 0 else num / den


def iou_from_confusion(cm):
    """(IoU, mIoU, per-class IoU) from a confusion matrix; class 0 is free space."""
    K = cm.shape[0]
    tp_occ = cm[1:, 1:].sum()
    fp_occ = cm[0, 1:].sum()
    fn_occ = cm[1:, 0].sum()
    iou = _ratio(tp_occ, tp_occ + fp_occ + fn_occ)
    per_class = {}
    for k in range(1, K):
        tp = cm[k, k]
        fn = cm[k].sum() - tp
        fp = cm[:, k].sum() - tp
        if tp + fn + fp > 0:
            per_class[k] = tp / (tp + fn + fp)
    miou = float(np.mean(list(per_class.values()))) if per_class else 1.0
    return float(iou), miou, per_class


def evaluate_iou_miou(pred, gt, num_classes=None, ignore_label=IGNORE):
    """Occupancy IoU, mean IoU over the semantic classes seen in gt or prediction, and per-class IoU.

    Empty unions score 1.0.
    """
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise DimMismatch(f"prediction {pred.shape} and ground truth {gt.shape} differ")
    if num_classes is None:
        labels = np.concatenate([pred[pred != ignore_label].ravel(), gt[gt != ignore_label].ravel(), [1]])
        num_classes = int(labels.max()) + 1
    scored = pred[gt != ignore_label]
    if scored.size and (scored.min() < 0 or scored.max() >= num_classes):
        raise ValueError(f"prediction labels must lie in [0, {num_classes})")
    return iou_from_confusion(confusion_matrix(pred, gt, num_classes, ignore_label))
