"""Toy feature network and the non-linear pixel classifier (FCN+ / DilatedNet+)."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .rng import SplitMix64
from .tensorcore import ConfigError, Tensor, conv2d, max_pool2x2, relu

Weights = dict  # name -> Tensor


def he_uniform(rng: SplitMix64, shape: tuple, fan_in: int) -> Tensor:
    bound = np.sqrt(6.0 / fan_in)
    return Tensor((rng.uniform_block(shape) * 2.0 - 1.0) * bound, requires_grad=True)


def zeros(shape) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True)


@dataclass(frozen=True)
class FeatureNetConfig:
    stages: tuple = ((16, 2), (32, 2))
    in_channels: int = 3
    # DilatedNet+: last stage keeps its resolution and dilates its convs instead
    dilated_last: bool = False

    def __post_init__(self):
        if not self.stages:
            raise ConfigError("feature network needs at least one stage")
        for ch, n in self.stages:
            if ch < 1 or n < 1:
                raise ConfigError(f"bad stage {(ch, n)}")

    @property
    def total_stride(self) -> int:
        n_pools = len(self.stages) - (1 if self.dilated_last else 0)
        return 2 ** n_pools

    @property
    def out_channels(self) -> int:
        return self.stages[-1][0]


@dataclass(frozen=True)
class PixelClassifierConfig:
    k: int
    channels: int = 64
    kernel: int = 3
    dilation: int = 2


def init_feature_net(cfg: FeatureNetConfig, rng: SplitMix64, prefix: str = "feat") -> Weights:
    w: Weights = {}
    c_in = cfg.in_channels
    for s, (ch, n) in enumerate(cfg.stages):
        for j in range(n):
            w[f"{prefix}.s{s}.c{j}.w"] = he_uniform(rng, (ch, c_in, 3, 3), c_in * 9)
            w[f"{prefix}.s{s}.c{j}.b"] = zeros(ch)
            c_in = ch
    return w


def image_tensor(image) -> Tensor:
    """H×W×3 array -> 3×H×W tensor (tensors pass through)."""
    if isinstance(image, Tensor):
        return image
    return Tensor(np.ascontiguousarray(np.asarray(image, dtype=np.float64).transpose(2, 0, 1)))


def feature_forward(image, cfg: FeatureNetConfig, weights: Weights, prefix: str = "feat") -> Tensor:
    x = image_tensor(image)
    _, H, W = x.shape
    ts = cfg.total_stride
    if H % ts or W % ts:
        raise ConfigError(f"input {H}×{W} not divisible by total stride {ts}")
    last = len(cfg.stages) - 1
    for s, (ch, n) in enumerate(cfg.stages):
        dil = 2 if (cfg.dilated_last and s == last) else 1
        for j in range(n):
            x = relu(conv2d(x, weights[f"{prefix}.s{s}.c{j}.w"], weights[f"{prefix}.s{s}.c{j}.b"], dilation=dil))
        if dil == 1:
            x = max_pool2x2(x)
    return x


def init_pixel_classifier(cfg: PixelClassifierConfig, c_in: int, rng: SplitMix64) -> Weights:
    kk = cfg.kernel
    return {
        "seg.dil.w": he_uniform(rng, (cfg.channels, c_in, kk, kk), c_in * kk * kk),
        "seg.dil.b": zeros(cfg.channels),
        "seg.out.w": he_uniform(rng, (cfg.k, cfg.channels, 1, 1), cfg.channels),
        "seg.out.b": zeros(cfg.k),
    }


def pixel_classify(feature_map: Tensor, cfg: PixelClassifierConfig, weights: Weights) -> Tensor:
    """Dilated 3×3 conv -> relu -> 1×1 conv to k pre-softmax channels."""
    hidden = relu(conv2d(feature_map, weights["seg.dil.w"], weights["seg.dil.b"], dilation=cfg.dilation))
    return conv2d(hidden, weights["seg.out.w"], weights["seg.out.b"])


def fcn_plus_forward(image, fcfg: FeatureNetConfig, pcfg: PixelClassifierConfig, weights: Weights) -> Tensor:
    return pixel_classify(feature_forward(image, fcfg, weights), pcfg, weights)

