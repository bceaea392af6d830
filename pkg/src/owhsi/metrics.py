"""Open-set evaluation suite: openness, accuracies, micro F1, mapping error.

The confusion matrix is (C+1) x (C+1) with rows = ground truth, columns =
prediction, and index C+1 (stored last) the unknown class. Pixels with
ground-truth code 0 are excluded everywhere.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np


def openness(n_train, n_test):
    """Open degree of a task: 1 - sqrt(2*n_train / (n_test + n_train))."""
    if n_train < 1:
        raise ValueError("n_train must be >= 1")
    if n_test < n_train:
        raise ValueError(f"n_test ({n_test}) must be >= n_train ({n_train})")
    return 1.0 - np.sqrt(2.0 * n_train / (n_test + n_train))


def confusion(pred, gt, num_classes):
    """Tally labels into a (C+1)x(C+1) matrix, ignoring unlabeled pixels."""
    pred = np.asarray(pred).ravel()
    gt = np.asarray(gt).ravel()
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: pred {pred.shape} vs gt {gt.shape}")
    c = int(num_classes)
    mask = gt != 0
    pred, gt = pred[mask], gt[mask]
    if pred.size and (pred.min() < 1 or pred.max() > c + 1):
        raise ValueError("prediction label out of range 1..C+1")
    if gt.size and gt.max() > c + 1:
        raise ValueError("ground-truth label out of range 0..C+1")
    cm = np.zeros((c + 1, c + 1), dtype=np.int64)
    np.add.at(cm, (gt - 1, pred - 1), 1)
    return cm


def _check_nonempty(cm):
    total = int(cm.sum())
    if total == 0:
        raise ValueError("empty confusion matrix")
    return total


def open_oa(cm):
    """Fraction correct over all C+1 classes."""
    total = _check_nonempty(cm)
    return float(np.trace(cm)) / total


def closed_oa(cm):
    """Fraction correct over ground-truth-known pixels; a known pixel
    predicted unknown counts as a miss."""
    cm = np.asarray(cm)
    known_total = int(cm[:-1, :].sum())
    if known_total == 0:
        raise ValueError("no known-class pixels to evaluate")
    return float(np.trace(cm[:-1, :-1])) / known_total


def micro_f1(cm):
    """Micro precision/recall/F1 over the known classes only.

    Unknown pixels assigned to a known class inflate FP; known pixels
    rejected as unknown inflate FN; the unknown diagonal plays no part.
    """
    cm = np.asarray(cm)
    _check_nonempty(cm)
    tp = float(np.trace(cm[:-1, :-1]))
    pred_known = float(cm[:, :-1].sum())
    gt_known = float(cm[:-1, :].sum())
    precision = tp / pred_known if pred_known > 0 else 0.0
    recall = tp / gt_known if gt_known > 0 else 0.0
    f1 = 2 * precision * recall / (precision + recall) \
        if precision + recall > 0 else 0.0
    return precision, recall, f1


def per_class_f1(cm):
    """F1 per class over all C+1 classes; None where a class has no
    support in either ground truth or prediction."""
    cm = np.asarray(cm)
    out = []
    for i in range(cm.shape[0]):
        tp = float(cm[i, i])
        row = float(cm[i, :].sum())
        col = float(cm[:, i].sum())
        if row == 0 and col == 0:
            out.append(None)
            continue
        p = tp / col if col > 0 else 0.0
        r = tp / row if row > 0 else 0.0
        out.append(2 * p * r / (p + r) if p + r > 0 else 0.0)
    return out


def mapping_error(pred_areas, gt_areas, mode="open"):
    """Normalized sum of per-class area discrepancies over known classes.

    Open mode expects C+1 area entries (unknown last), closed mode C; the
    value is sum |A_p,i - A_gt,i| over i = 1..C divided by the known
    ground-truth area either way — the mode fixes which bound applies.
    """
    pred_areas = np.asarray(pred_areas, dtype=np.float64)
    gt_areas = np.asarray(gt_areas, dtype=np.float64)
    if pred_areas.shape != gt_areas.shape or pred_areas.ndim != 1:
        raise ValueError("area vectors must be 1-D and the same length")
    if mode not in ("open", "closed"):
        raise ValueError(f"unknown mode {mode!r}")
    known = slice(0, len(gt_areas) - 1) if mode == "open" else slice(None)
    denom = gt_areas[known].sum()
    if denom <= 0:
        raise ValueError("zero known ground-truth area")
    return float(np.abs(pred_areas[known] - gt_areas[known]).sum() / denom)


def error_max(gt_areas):
    """Largest attainable open-world mapping error for a ground truth."""
    gt_areas = np.asarray(gt_areas, dtype=np.float64)
    known = gt_areas[:-1].sum()
    if known <= 0:
        raise ValueError("zero known ground-truth area")
    return float(2.0 * (1.0 + gt_areas[-1] / known))


def areas_from_confusion(cm):
    """(pred_areas, gt_areas) over the evaluated-pixel universe."""
    cm = np.asarray(cm)
    return cm.sum(axis=0).astype(np.float64), cm.sum(axis=1).astype(np.float64)


@dataclass
class MetricsReport:
    openness: float
    oa_open: float
    oa_closed: float
    precision: float
    recall: float
    f1_micro: float
    mapping_error: float
    mapping_error_closed: float
    error_max: float
    per_class_f1: list
    confusion: list

    def to_json(self, indent=2):
        return json.dumps(
            {
                "openness": self.openness,
                "oa_open": self.oa_open,
                "oa_closed": self.oa_closed,
                "precision": self.precision,
                "recall": self.recall,
                "f1_micro": self.f1_micro,
                "mapping_error": self.mapping_error,
                "mapping_error_closed": self.mapping_error_closed,
                "error_max": self.error_max,
                "per_class_f1": self.per_class_f1,
                "confusion": self.confusion,
            },
            indent=indent,
        )


def report(cm, n_train, n_test) -> MetricsReport:
    """Aggregate every metric over one confusion matrix."""
    cm = np.asarray(cm)
    _check_nonempty(cm)
    pred_areas, gt_areas = areas_from_confusion(cm)
    p, r, f1 = micro_f1(cm)
    return MetricsReport(
        openness=float(openness(n_train, n_test)),
        oa_open=open_oa(cm),
        oa_closed=closed_oa(cm),
        precision=p,
        recall=r,
        f1_micro=f1,
        mapping_error=mapping_error(pred_areas, gt_areas, "open"),
        mapping_error_closed=mapping_error(
            pred_areas[:-1], gt_areas[:-1], "closed"),
        error_max=error_max(gt_areas),
        per_class_f1=per_class_f1(cm),
        confusion=cm.astype(int).tolist(),
    )
