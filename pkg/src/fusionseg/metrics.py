"""Segmentation metrics: dice overlap, voxel accuracy and accuracy per parameter."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .errors import ConfigurationError, ShapeError

WHOLE_TUMOR = (1, 2, 3, 4)


def _check_pair(pred, truth):
    pred, truth = np.asarray(pred), np.asarray(truth)
    if pred.shape != truth.shape:
        raise ShapeError("prediction/truth shape mismatch", pred.shape, truth.shape)
    return pred, truth


def overlap_counts(pred, truth, classes=WHOLE_TUMOR):
    """``(tp, fp, fn)`` after binarizing both volumes by membership in ``classes``."""
    pred, truth = _check_pair(pred, truth)
    p = np.isin(pred, classes)
    t = np.isin(truth, classes)
    tp = int(np.count_nonzero(p & t))
    return tp, int(np.count_nonzero(p)) - tp, int(np.count_nonzero(t)) - tp


def dice(pred, truth, classes=WHOLE_TUMOR) -> float:
    """2|P∩T| / (|P| + |T|); 1.0 when both sets are empty."""
    tp, fp, fn = overlap_counts(pred, truth, classes)
    denom = 2 * tp + fp + fn
    return 1.0 if denom == 0 else 2 * tp / denom


def accuracy(pred, truth) -> float:
    pred, truth = _check_pair(pred, truth)
    if pred.size == 0:
        raise ShapeError("accuracy of an empty volume is undefined", pred.shape)
    return int(np.count_nonzero(pred == truth)) / pred.size


def memory_accuracy_ratio(acc_fused, params_fused, acc_base, params_base) -> float:
    """(acc_fused / params_fused) normalised so the baseline's ratio is 1."""
    if params_fused <= 0 or params_base <= 0:
        raise ConfigurationError("parameter counts must be positive")
    if acc_fused <= 0 or acc_base <= 0:
        raise ConfigurationError("accuracies must be positive")
    return (acc_fused / params_fused) / (acc_base / params_base)


@dataclass
class EvalReport:
    dice_whole_tumor: float
    per_class_dice: list
    accuracy: float
    tp: list
    fp: list
    fn: list

    def to_dict(self):
        return asdict(self)


def evaluate(pred, truth, n_classes: int = 5) -> EvalReport:
    """Whole-tumor dice, per-class dice, accuracy and per-class TP/FP/FN counts."""
    pred, truth = _check_pair(pred, truth)
    tps, fps, fns, per_class = [], [], [], []
    for c in range(n_classes):
        tp, fp, fn = overlap_counts(pred, truth, (c,))
        tps.append(tp)
        fps.append(fp)
        fns.append(fn)
        denom = 2 * tp + fp + fn
        per_class.append(1.0 if denom == 0 else 2 * tp / denom)
    return EvalReport(
        dice_whole_tumor=dice(pred, truth),
        per_class_dice=per_class,
        accuracy=accuracy(pred, truth),
        tp=tps, fp=fps, fn=fns,
    )
