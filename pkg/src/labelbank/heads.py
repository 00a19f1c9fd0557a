"""LabelBank inference heads: SPP, DC, OHE, W2V, and DC with appended meta features.

Every head emits pre-sigmoid class confidences and, when targets are given,
a mean sigmoid cross-entropy loss. Targets come only from pixel labels.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .bank import presence_from_labels, presence_vector, window_presence
from .rng import SplitMix64
from .segnet import he_uniform, zeros
from .tensorcore import (
    ConfigError, ShapeError, Tensor, concat_channels, conv2d, embedding_mean, linear,
    region_max, relu, sigmoid_ce, spp_pool, tile_spatial, window_max,
)

HEAD_KINDS = ("spp", "dc", "ohe", "w2v", "combined")
VISUAL_KINDS = ("spp", "dc", "combined")


@dataclass(frozen=True)
class HeadConfig:
    kind: str = "dc"
    hidden_units: int = 128
    spp_levels: tuple = (1, 2, 4)
    dc_window: int = 4
    dc_stride: int = 2
    dc_channels: int = 64
    dc_dilation: int = 2
    embed_dim: int = 16
    meta: str = "ohe"  # meta source for the combined head

    def __post_init__(self):
        if self.kind not in HEAD_KINDS:
            raise ConfigError(f"unknown head kind {self.kind!r}")
        if self.kind == "spp" and not self.spp_levels:
            raise ConfigError("spp head needs at least one pyramid level")
        if self.kind in ("dc", "combined"):
            if self.dc_stride < 1:
                raise ConfigError("dc_stride must be >= 1")
            if self.dc_window < 1:
                raise ConfigError("dc_window must be >= 1")
        if self.kind == "combined" and self.meta not in ("ohe", "w2v"):
            raise ConfigError(f"combined head meta must be ohe or w2v, got {self.meta!r}")

    @property
    def visual(self) -> bool:
        return self.kind in VISUAL_KINDS

    @property
    def min_feature_side(self) -> int:
        if self.kind == "spp":
            return max(self.spp_levels)
        if self.kind in ("dc", "combined"):
            return self.dc_window
        return 1


@dataclass
class HeadOutput:
    bank: Tensor
    aux_window_logits: Tensor | None = None
    loss: Tensor | None = None


def _init_mlp(rng: SplitMix64, n_in: int, hidden: int, k: int) -> dict:
    return {
        "head.fc1.w": he_uniform(rng, (hidden, n_in), n_in),
        "head.fc1.b": zeros(hidden),
        "head.fc2.w": he_uniform(rng, (k, hidden), hidden),
        "head.fc2.b": zeros(k),
    }


def meta_width(cfg: HeadConfig, n_attributes: int) -> int:
    return n_attributes if cfg.meta == "ohe" else cfg.embed_dim


def init_head(cfg: HeadConfig, k: int, rng: SplitMix64, feat_channels: int = 0,
              n_attributes: int = 0, vocab_size: int = 0) -> dict:
    if cfg.kind == "spp":
        n_in = feat_channels * sum(g * g for g in cfg.spp_levels)
        return _init_mlp(rng, n_in, cfg.hidden_units, k)
    if cfg.kind == "ohe":
        return _init_mlp(rng, n_attributes, cfg.hidden_units, k)
    if cfg.kind == "w2v":
        w = {"head.embed": Tensor(rng.normal_block((vocab_size, cfg.embed_dim)) * 0.5, requires_grad=True)}
        w.update(_init_mlp(rng, cfg.embed_dim, cfg.hidden_units, k))
        return w
    c_in = feat_channels
    w = {}
    if cfg.kind == "combined":
        c_in += meta_width(cfg, n_attributes)
        if cfg.meta == "w2v":
            w["head.embed"] = Tensor(rng.normal_block((vocab_size, cfg.embed_dim)) * 0.5, requires_grad=True)
    w.update({
        "head.dil.w": he_uniform(rng, (cfg.dc_channels, c_in, 3, 3), c_in * 9),
        "head.dil.b": zeros(cfg.dc_channels),
        "head.out.w": he_uniform(rng, (k, cfg.dc_channels, 1, 1), cfg.dc_channels),
        "head.out.b": zeros(k),
    })
    return w


def _mlp(x: Tensor, w: dict) -> Tensor:
    return linear(relu(linear(x, w["head.fc1.w"], w["head.fc1.b"])), w["head.fc2.w"], w["head.fc2.b"])


def _bank_loss(bank: Tensor, labels) -> Tensor | None:
    if labels is None:
        return None
    k = bank.shape[0]
    return sigmoid_ce(bank, presence_vector(presence_from_labels(labels, k), k))


def spp_forward(feature_map: Tensor, cfg: HeadConfig, weights: dict, labels=None) -> HeadOutput:
    bank = _mlp(spp_pool(feature_map, cfg.spp_levels), weights)
    return HeadOutput(bank, None, _bank_loss(bank, labels))


def multi_hot(attrs, vocab_size: int) -> np.ndarray:
    v = np.zeros(vocab_size)
    for a in attrs:
        if not 0 <= a < vocab_size:
            raise ShapeError(f"attribute id {a} outside vocabulary of {vocab_size}")
        v[a] = 1.0
    return v


def ohe_forward(attrs, vocab_size: int, cfg: HeadConfig, weights: dict, labels=None) -> HeadOutput:
    bank = _mlp(Tensor(multi_hot(attrs, vocab_size)), weights)
    return HeadOutput(bank, None, _bank_loss(bank, labels))


def w2v_forward(caption, cfg: HeadConfig, weights: dict, labels=None) -> HeadOutput:
    if len(caption) == 0:
        raise ShapeError("caption must not be empty")
    bank = _mlp(embedding_mean(weights["head.embed"], caption), weights)
    return HeadOutput(bank, None, _bank_loss(bank, labels))


def dc_windows(h: int, w: int, size: int, stride: int) -> list:
    """Cell rectangles (r0, r1, c0, c1) tiling an h×w map; the last window hugs the border."""
    if stride < 1:
        raise ConfigError("dc_stride must be >= 1")
    if size > h or size > w:
        raise ConfigError(f"dc window {size} exceeds the {h}×{w} feature map")

    def starts(n):
        out = list(range(0, n - size + 1, stride))
        if out[-1] != n - size:
            out.append(n - size)
        return out

    return [(r, r + size, c, c + size) for r in starts(h) for c in starts(w)]


def window_targets(labels: np.ndarray, windows: list, cell: int, k: int) -> np.ndarray:
    """Binary presence per window, mapping feature cells back to pixel rectangles."""
    out = np.zeros((len(windows), k))
    for n, (r0, r1, c0, c1) in enumerate(windows):
        present = window_presence(labels, (r0 * cell, r1 * cell, c0 * cell, c1 * cell), k)
        out[n, sorted(present)] = 1.0
    return out


def dc_forward(feature_map: Tensor, cfg: HeadConfig, weights: dict, labels=None,
               total_stride: int = 1) -> HeadOutput:
    """Location-aware window predictions, max-pooled into one bank."""
    _, h, w = feature_map.shape
    windows = dc_windows(h, w, cfg.dc_window, cfg.dc_stride)
    hidden = relu(conv2d(feature_map, weights["head.dil.w"], weights["head.dil.b"], dilation=cfg.dc_dilation))
    cells = conv2d(hidden, weights["head.out.w"], weights["head.out.b"])
    per_window = region_max(cells, windows)
    bank = window_max(per_window)
    loss = None
    if labels is not None:
        k = cells.shape[0]
        loss = sigmoid_ce(per_window, window_targets(labels, windows, total_stride, k))
    return HeadOutput(bank, per_window, loss)


def meta_feature(meta, cfg: HeadConfig, weights: dict, n_attributes: int) -> Tensor:
    if cfg.meta == "ohe":
        return Tensor(multi_hot(meta.attributes, n_attributes))
    return embedding_mean(weights["head.embed"], meta.caption)


def combined_forward(feature_map: Tensor, meta_vec: Tensor, cfg: HeadConfig, weights: dict,
                     labels=None, total_stride: int = 1) -> HeadOutput:
    _, h, w = feature_map.shape
    extended = concat_channels(feature_map, tile_spatial(meta_vec, h, w))
    return dc_forward(extended, cfg, weights, labels, total_stride)


def head_forward(cfg: HeadConfig, weights: dict, *, feature_map=None, meta=None, labels=None,
                 total_stride: int = 1, n_attributes: int = 0) -> HeadOutput:
    if cfg.kind == "spp":
        return spp_forward(feature_map, cfg, weights, labels)
    if cfg.kind == "dc":
        return dc_forward(feature_map, cfg, weights, labels, total_stride)
    if cfg.kind == "ohe":
        return ohe_forward(meta.attributes, n_attributes, cfg, weights, labels)
    if cfg.kind == "w2v":
        return w2v_forward(meta.caption, cfg, weights, labels)
    vec = meta_feature(meta, cfg, weights, n_attributes)
    return combined_forward(feature_map, vec, cfg, weights, labels, total_stride)
