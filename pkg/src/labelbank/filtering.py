"""Holistic filtering of a segmentation map by a LabelBank.

Both the bank and the map are squashed by a sigmoid, multiplied per class,
and mapped back to logit space, so a class the bank rules out is pushed far
below every class the bank keeps.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensorcore import (
    DEFAULT_EPS, ConfigError, ShapeError, Tensor, as_tensor, bilinear_upsample,
    logit, mul_broadcast, reshape, sigmoid,
)

FILTER_THEN_UPSAMPLE = "filter_then_upsample"
UPSAMPLE_THEN_FILTER = "upsample_then_filter"


@dataclass(frozen=True)
class FilterMode:
    order: str = FILTER_THEN_UPSAMPLE
    eps: float = DEFAULT_EPS

    def __post_init__(self):
        if self.order not in (FILTER_THEN_UPSAMPLE, UPSAMPLE_THEN_FILTER):
            raise ConfigError(f"unknown filter order {self.order!r}")
        if not 0.0 < self.eps < 0.5:
            raise ConfigError(f"eps must lie in (0, 0.5), got {self.eps}")


def holistic_filter(bank: Tensor, S: Tensor, eps: float = DEFAULT_EPS) -> Tensor:
    bank, S = as_tensor(bank), as_tensor(S)
    k = S.shape[0]
    if bank.data.size != k:
        raise ShapeError(f"bank has {bank.data.size} entries, map has {k} classes")
    conf = reshape(sigmoid(bank), (k, 1, 1))
    return logit(mul_broadcast(conf, sigmoid(S)), eps)


def filter_and_upsample(bank: Tensor, S: Tensor, H: int, W: int,
                        mode: FilterMode = FilterMode()) -> Tensor:
    S = as_tensor(S)
    _, h, w = S.shape
    if H < h or W < w:
        raise ShapeError(f"target {H}×{W} is smaller than the map {h}×{w}")
    if mode.order == FILTER_THEN_UPSAMPLE:
        return bilinear_upsample(holistic_filter(bank, S, mode.eps), H, W)
    return holistic_filter(bank, bilinear_upsample(S, H, W), mode.eps)


def predict_labels(S_full) -> np.ndarray:
    """Per-pixel argmax over classes; ties resolve to the lowest class index."""
    data = S_full.data if isinstance(S_full, Tensor) else np.asarray(S_full)
    return np.argmax(data, axis=0).astype(np.uint8)
