"""Confusion-matrix segmentation metrics: pAcc, mAcc, mIU, fwIU.

Classes that never occur in the ground truth nor in the predictions are left
out of the mAcc / mIU averages instead of contributing a 0/0 term.
"""

from __future__ import annotations

import numpy as np

from .tensorcore import IGNORE


class UndefinedMetricError(ValueError):
    pass


def confusion_matrix(k: int) -> np.ndarray:
    return np.zeros((k, k), dtype=np.int64)


def accumulate(cm: np.ndarray, truth: np.ndarray, pred: np.ndarray, ignore: int = IGNORE) -> np.ndarray:
    """Add one count per non-ignored pixel at (truth, pred). Returns ``cm`` (updated in place)."""
    truth, pred = np.asarray(truth), np.asarray(pred)
    if truth.shape != pred.shape:
        raise ValueError(f"truth {truth.shape} and prediction {pred.shape} differ in shape")
    k = cm.shape[0]
    valid = truth != ignore
    t = truth[valid].astype(np.int64)
    p = pred[valid].astype(np.int64)
    if t.size and (t.max() >= k or p.min() < 0 or p.max() >= k):
        raise ValueError("label value outside [0, k)")
    cm += np.bincount(t * k + p, minlength=k * k).reshape(k, k)
    return cm


def _check(cm: np.ndarray) -> None:
    if cm.sum() <= 0:
        raise UndefinedMetricError("confusion matrix has no counts")


def _iu_terms(cm: np.ndarray):
    diag = np.diag(cm).astype(np.float64)
    t = cm.sum(axis=1).astype(np.float64)
    union = t + cm.sum(axis=0) - diag
    return diag, t, union


def pixel_accuracy(cm: np.ndarray) -> float:
    _check(cm)
    return float(np.trace(cm) / cm.sum())


def mean_accuracy(cm: np.ndarray) -> float:
    _check(cm)
    diag, t, _ = _iu_terms(cm)
    seen = t > 0
    return float(np.mean(diag[seen] / t[seen]))


def mean_iu(cm: np.ndarray) -> float:
    _check(cm)
    diag, _, union = _iu_terms(cm)
    seen = union > 0
    return float(np.mean(diag[seen] / union[seen]))


def fw_iu(cm: np.ndarray) -> float:
    _check(cm)
    diag, t, union = _iu_terms(cm)
    seen = union > 0
    return float(np.sum(t[seen] * diag[seen] / union[seen]) / t.sum())


def all_metrics(cm: np.ndarray) -> dict:
    return {
        "pAcc": pixel_accuracy(cm),
        "mAcc": mean_accuracy(cm),
        "mIU": mean_iu(cm),
        "fwIU": fw_iu(cm),
    }
