"""LabelBanks outside the neural heads: ground truth, oracle, contaminated."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .rng import SplitMix64, derive_seed
from .tensorcore import IGNORE

ORACLE_M = 30.0

INFERRED = "inferred"
ORACLE = "oracle"
CONTAMINATED = "contaminated"


@dataclass
class LabelBank:
    values: np.ndarray  # length-k pre-sigmoid confidences
    source: str = INFERRED

    @property
    def k(self) -> int:
        return self.values.shape[0]


@dataclass(frozen=True)
class NoiseSpec:
    n_p: float = 0.0
    n_r: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.n_p < 0 or self.n_r < 0:
            raise ValueError("n_p and n_r must be nonnegative")


def presence_from_labels(labels: np.ndarray, k: int) -> frozenset:
    """Classes carried by at least one non-ignored pixel."""
    vals = np.unique(np.asarray(labels))
    return frozenset(int(v) for v in vals if v != IGNORE and v < k)


def window_presence(labels: np.ndarray, window: tuple, k: int) -> frozenset:
    """Presence restricted to the rectangle (r0, r1, c0, c1), end-exclusive."""
    r0, r1, c0, c1 = window
    H, W = np.asarray(labels).shape
    if not (0 <= r0 < r1 <= H and 0 <= c0 < c1 <= W):
        raise ValueError(f"window {window} outside a {H}×{W} image")
    return presence_from_labels(np.asarray(labels)[r0:r1, c0:c1], k)


def presence_vector(present, k: int) -> np.ndarray:
    v = np.zeros(k)
    v[sorted(present)] = 1.0
    return v


def oracle_bank(present, k: int, M: float = ORACLE_M) -> LabelBank:
    if M <= 0:
        raise ValueError("saturation constant M must be positive")
    vals = np.full(k, -float(M))
    vals[sorted(present)] = float(M)
    return LabelBank(vals, ORACLE)


def _extra_images(seed: int, purpose: str, frac: float, n_images: int) -> frozenset:
    """The first round(frac * n) entries of a seeded permutation of image indices."""
    if frac <= 0:
        return frozenset()
    count = int(round(frac * n_images))
    perm = SplitMix64(derive_seed(seed, f"fraction/{purpose}")).permutation(n_images)
    return frozenset(perm[:count])


def contamination_plan(spec: NoiseSpec, n_images: int) -> tuple[list, list]:
    """Per-image counts of labels to remove and to add."""
    r_int, r_frac = int(np.floor(spec.n_r)), spec.n_r - np.floor(spec.n_r)
    p_int, p_frac = int(np.floor(spec.n_p)), spec.n_p - np.floor(spec.n_p)
    more_r = _extra_images(spec.seed, "remove", r_frac, n_images)
    more_p = _extra_images(spec.seed, "add", p_frac, n_images)
    removals = [r_int + (i in more_r) for i in range(n_images)]
    additions = [p_int + (i in more_p) for i in range(n_images)]
    return removals, additions


def contaminate(present, spec: NoiseSpec, k: int, M: float, image_index: int,
                n_images: int, plan: tuple | None = None) -> tuple[LabelBank, frozenset]:
    """Drop ground-truth labels and add absent ones, then saturate to ±M.

    Returns the bank and the set of classes it marks present. ``plan`` may carry
    a precomputed :func:`contamination_plan` for the split.
    """
    present = frozenset(present)
    if spec.n_p == 0 and spec.n_r == 0:
        return oracle_bank(present, k, M), present
    removals, additions = plan if plan is not None else contamination_plan(spec, n_images)
    rng = SplitMix64(derive_seed(spec.seed, f"image/{image_index}"))
    removed = rng.sample(present, removals[image_index])
    absent = [c for c in range(k) if c not in present]
    added = rng.sample(absent, additions[image_index])
    kept = (present - frozenset(removed)) | frozenset(added)
    bank = oracle_bank(kept, k, M)
    return LabelBank(bank.values, CONTAMINATED), kept


def bank_precision_recall(predicted, truth, threshold: float = 0.0) -> tuple[float, float]:
    """Set precision/recall of {l : value > threshold} against the true presence set."""
    values = predicted.values if isinstance(predicted, LabelBank) else np.asarray(predicted)
    pred = {int(l) for l in np.flatnonzero(values > threshold)}
    truth = set(truth)
    tp = len(pred & truth)
    precision = tp / len(pred) if pred else 1.0
    recall = tp / len(truth) if truth else 1.0
    return precision, recall


def aggregate_precision_recall(pairs) -> dict:
    """Micro (pooled counts) and macro (per-image mean) precision/recall.

    ``pairs`` yields (predicted set, truth set).
    """
    tp = n_pred = n_true = 0
    precs, recs = [], []
    for pred, truth in pairs:
        pred, truth = set(pred), set(truth)
        hit = len(pred & truth)
        tp += hit
        n_pred += len(pred)
        n_true += len(truth)
        precs.append(hit / len(pred) if pred else 1.0)
        recs.append(hit / len(truth) if truth else 1.0)
    return {
        "micro_precision": tp / n_pred if n_pred else 1.0,
        "micro_recall": tp / n_true if n_true else 1.0,
        "macro_precision": float(np.mean(precs)) if precs else 1.0,
        "macro_recall": float(np.mean(recs)) if recs else 1.0,
    }


def predicted_set(values: np.ndarray, threshold: float = 0.0) -> frozenset:
    return frozenset(int(l) for l in np.flatnonzero(np.asarray(values) > threshold))
