"""Joint training of the segmentation network and a LabelBank head."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .bank import (
    ORACLE_M, aggregate_precision_recall, oracle_bank, predicted_set, presence_from_labels,
)
from .config import ExperimentConfig
from .filtering import FilterMode, filter_and_upsample, predict_labels
from .heads import HeadConfig, head_forward, init_head
from .metrics import accumulate, all_metrics, confusion_matrix
from .rng import SplitMix64, derive_seed
from .segnet import (
    FeatureNetConfig, PixelClassifierConfig, feature_forward, image_tensor,
    init_feature_net, init_pixel_classifier, pixel_classify,
)
from .tensorcore import (
    ConfigError, Tensor, add, backward, bilinear_upsample, interp_matrix, scale, softmax_ce,
)

log = logging.getLogger(__name__)


class DivergenceError(RuntimeError):
    pass


LOG_COLUMNS = ("epoch", "pAcc", "mAcc", "mIU", "fwIU", "bank_precision", "bank_recall",
               "seg_loss", "bank_loss")


# ---------------------------------------------------------------------------
# model


@dataclass
class Model:
    k: int
    fcfg: FeatureNetConfig
    pcfg: PixelClassifierConfig
    hcfg: HeadConfig | None
    weights: dict
    share_features: bool = True
    n_attributes: int = 0
    vocab_size: int = 0

    @property
    def min_feature_side(self) -> int:
        return self.hcfg.min_feature_side if self.hcfg else 1

    def arrays(self) -> dict:
        return {name: t.data for name, t in self.weights.items()}

    def load_arrays(self, arrays: dict) -> None:
        missing = set(self.weights) - set(arrays)
        if missing:
            raise ConfigError(f"checkpoint lacks tensors: {sorted(missing)}")
        for name, t in self.weights.items():
            if arrays[name].shape != t.data.shape:
                raise ConfigError(f"tensor {name} has shape {arrays[name].shape}, expected {t.data.shape}")
            t.data = np.array(arrays[name], dtype=np.float64)


def model_configs(cfg: ExperimentConfig, k: int):
    fcfg = FeatureNetConfig(stages=tuple(tuple(s) for s in cfg.net.stages),
                            dilated_last=cfg.net.dilated_last)
    pcfg = PixelClassifierConfig(k=k, channels=cfg.net.classifier_channels)
    h = cfg.head
    hcfg = None
    if cfg.train.mode in ("filtered", "multitask"):
        hcfg = HeadConfig(kind=h.kind, hidden_units=h.hidden_units, spp_levels=tuple(h.spp_levels),
                          dc_window=h.dc_window, dc_stride=h.dc_stride, dc_channels=h.dc_channels,
                          embed_dim=h.embed_dim, meta=h.meta)
    return fcfg, pcfg, hcfg


def build_model(cfg: ExperimentConfig, k: int, n_attributes: int, vocab_size: int) -> Model:
    fcfg, pcfg, hcfg = model_configs(cfg, k)
    rng = SplitMix64(derive_seed(cfg.train.seed, "init"))
    weights = init_feature_net(fcfg, rng)
    weights.update(init_pixel_classifier(pcfg, fcfg.out_channels, rng))
    share = cfg.net.share_features
    if hcfg is not None:
        if hcfg.visual and not share:
            weights.update(init_feature_net(fcfg, rng, prefix="hfeat"))
        weights.update(init_head(hcfg, k, rng, feat_channels=fcfg.out_channels,
                                 n_attributes=n_attributes, vocab_size=vocab_size))
    return Model(k, fcfg, pcfg, hcfg, weights, share, n_attributes, vocab_size)


@dataclass
class ForwardResult:
    S: Tensor                  # k×h×w raw segmentation map
    S_full: Tensor             # k×H×W map the loss and prediction use
    bank: np.ndarray | None    # pre-sigmoid bank actually used or predicted
    seg_loss: Tensor | None
    bank_loss: Tensor | None


def forward(model: Model, image, labels, meta, mode: str, filter_mode: FilterMode = FilterMode(),
            oracle_m: float = ORACLE_M, with_loss: bool = True) -> ForwardResult:
    """One image through the pipeline; ``mode`` decides where the bank comes from."""
    x = image_tensor(image)
    _, H, W = x.shape
    feats = feature_forward(x, model.fcfg, model.weights)
    S = pixel_classify(feats, model.pcfg, model.weights)
    head_out = None
    if mode in ("filtered", "multitask"):
        if model.hcfg is None:
            raise ConfigError(f"mode {mode!r} needs a checkpoint with a LabelBank head")
        hfeats = feats
        if model.hcfg.visual and not model.share_features:
            hfeats = feature_forward(x, model.fcfg, model.weights, prefix="hfeat")
        head_out = head_forward(model.hcfg, model.weights, feature_map=hfeats, meta=meta,
                                labels=labels if with_loss else None,
                                total_stride=model.fcfg.total_stride, n_attributes=model.n_attributes)
    bank_vals = None
    if mode == "filtered":
        S_full = filter_and_upsample(head_out.bank, S, H, W, filter_mode)
        bank_vals = head_out.bank.data
    elif mode == "oracle":
        ob = oracle_bank(presence_from_labels(labels, model.k), model.k, oracle_m)
        S_full = filter_and_upsample(Tensor(ob.values), S, H, W, filter_mode)
        bank_vals = ob.values
    elif mode in ("baseline", "multitask"):
        S_full = bilinear_upsample(S, H, W)
        if head_out is not None:
            bank_vals = head_out.bank.data
    else:
        raise ConfigError(f"unknown mode {mode!r}")
    seg_loss = softmax_ce(S_full, labels) if with_loss else None
    bank_loss = head_out.loss if head_out is not None else None
    return ForwardResult(S, S_full, bank_vals, seg_loss, bank_loss)


def joint_loss(seg_loss, bank_loss, balance: float):
    """seg_loss + balance * bank_loss; works on tensors or plain floats."""
    if bank_loss is None:
        return seg_loss
    if isinstance(seg_loss, Tensor):
        return add(seg_loss, scale(bank_loss, balance))
    return seg_loss + balance * bank_loss


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class OptimizerState:
    learning_rate: float
    momentum: float = 0.99
    velocity: dict = field(default_factory=dict)


def sgd_momentum_step(weights: dict, grads: dict, state: OptimizerState) -> None:
    """v <- mu*v - lr*g ; theta <- theta + v, in place."""
    for name, g in grads.items():
        w = weights[name]
        data = w.data if isinstance(w, Tensor) else w
        if g.shape != data.shape:
            raise ValueError(f"gradient for {name} has shape {g.shape}, weight {data.shape}")
        v = state.velocity.get(name)
        if v is None:
            v = np.zeros_like(data)
        v = state.momentum * v - state.learning_rate * g
        state.velocity[name] = v
        data += v


# ---------------------------------------------------------------------------
# augmentation


def hflip(image: np.ndarray, labels: np.ndarray):
    return image[:, ::-1].copy(), labels[:, ::-1].copy()


def nearest_index(n_out: int, n_in: int) -> np.ndarray:
    if n_out == 1 or n_in == 1:
        return np.zeros(n_out, dtype=np.int64)
    return np.floor(np.arange(n_out) * (n_in - 1) / (n_out - 1) + 0.5).astype(np.int64)


def rescale(image: np.ndarray, labels: np.ndarray, factor: float, stride: int = 1, min_side: int = 1):
    """Bilinear for the image, nearest for labels; sizes snap to multiples of ``stride``."""
    H, W = labels.shape

    def snap(n):
        return max(stride * min_side, int(round(n * factor / stride)) * stride)

    H2, W2 = snap(H), snap(W)
    if (H2, W2) == (H, W):
        return image, labels
    ry, rx = interp_matrix(H2, H), interp_matrix(W2, W)
    img = np.einsum("ij,jlc,ml->imc", ry, image, rx, optimize=True)
    lbl = labels[nearest_index(H2, H)][:, nearest_index(W2, W)]
    return img, lbl


def augment(image, labels, flip: bool, scale_set, rng: SplitMix64, stride: int = 1, min_side: int = 1):
    if flip and rng.random() < 0.5:
        image, labels = hflip(image, labels)
    factor = scale_set[rng.randbelow(len(scale_set))]
    return rescale(image, labels, factor, stride, min_side)


# ---------------------------------------------------------------------------
# evaluation


def evaluate(model: Model, samples, mode: str, filter_mode: FilterMode = FilterMode(),
             oracle_m: float = ORACLE_M) -> dict:
    cm = confusion_matrix(model.k)
    pairs = []
    for s in samples:
        res = forward(model, s.image, s.labels, s.meta, mode, filter_mode, oracle_m, with_loss=False)
        accumulate(cm, s.labels, predict_labels(res.S_full))
        if res.bank is not None:
            pairs.append((predicted_set(res.bank), presence_from_labels(s.labels, model.k)))
    out = all_metrics(cm)
    if pairs:
        out.update(aggregate_precision_recall(pairs))
    else:
        out.update({key: math.nan for key in
                    ("micro_precision", "micro_recall", "macro_precision", "macro_recall")})
    out["confusion"] = cm
    return out


def segment_maps(model: Model, samples) -> list:
    """Raw k×h×w maps from a frozen network, one per sample."""
    out = []
    for s in samples:
        feats = feature_forward(s.image, model.fcfg, model.weights)
        out.append(pixel_classify(feats, model.pcfg, model.weights).data)
    return out


# ---------------------------------------------------------------------------
# training loop


def _fmt(x: float) -> str:
    return "nan" if x is None or (isinstance(x, float) and math.isnan(x)) else f"{x:.6f}"


def format_log_row(epoch: int, metrics: dict, seg_loss: float, bank_loss: float) -> str:
    vals = [str(epoch)] + [_fmt(metrics[c]) for c in ("pAcc", "mAcc", "mIU", "fwIU")]
    vals += [_fmt(metrics["micro_precision"]), _fmt(metrics["micro_recall"]), _fmt(seg_loss), _fmt(bank_loss)]
    return "\t".join(vals)


@dataclass
class TrainResult:
    model: Model
    best_arrays: dict
    best_epoch: int
    log_rows: list
    history: list
    final_arrays: dict


def train(dataset, cfg: ExperimentConfig, on_epoch=None) -> TrainResult:
    """Batch-size-1 SGD with momentum; keeps the weights of the best val-mIU epoch."""
    t = cfg.train
    mode = t.mode
    model = build_model(cfg, dataset.k, dataset.n_attributes, len(dataset.vocabulary))
    fmode = FilterMode(t.filter_order, t.eps)
    opt = OptimizerState(t.learning_rate, t.momentum)
    balance = t.loss_balance
    params = {n: w for n, w in model.weights.items()}
    stride = model.fcfg.total_stride
    best_miu, best_epoch, best_arrays = -1.0, 0, None
    rows, history = [], []
    for epoch in range(1, t.epochs + 1):
        order = SplitMix64(derive_seed(t.seed, f"shuffle/{epoch}")).permutation(len(dataset.train))
        seg_sum = bank_sum = 0.0
        n_bank = 0
        for step, idx in enumerate(order):
            s = dataset.train[idx]
            rng = SplitMix64(derive_seed(t.seed, f"augment/{epoch}/{step}"))
            img, lbl = augment(s.image, s.labels, t.flip_augment, t.scale_set, rng, stride,
                               model.min_feature_side)
            res = forward(model, img, lbl, s.meta, mode, fmode, t.oracle_m)
            if t.auto_balance and epoch == 1 and step == 0 and res.bank_loss is not None:
                balance = res.seg_loss.item() / max(res.bank_loss.item(), 1e-12)
                log.info("auto-balanced loss multiplier: %.6g", balance)
            loss = joint_loss(res.seg_loss, res.bank_loss, balance)
            if not np.isfinite(loss.item()):
                raise DivergenceError(f"non-finite loss at epoch {epoch}, step {step}")
            for w in params.values():
                w.grad = None
            backward(loss)
            grads = {n: w.grad for n, w in params.items() if w.grad is not None}
            if t.grad_clip > 0:
                norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
                if norm > t.grad_clip:
                    grads = {n: g * (t.grad_clip / norm) for n, g in grads.items()}
            sgd_momentum_step(params, grads, opt)
            seg_sum += res.seg_loss.item()
            if res.bank_loss is not None:
                bank_sum += res.bank_loss.item()
                n_bank += 1
        metrics = evaluate(model, dataset.val, mode, fmode, t.oracle_m)
        seg_mean = seg_sum / len(order)
        bank_mean = bank_sum / n_bank if n_bank else math.nan
        row = format_log_row(epoch, metrics, seg_mean, bank_mean)
        rows.append(row)
        history.append({"epoch": epoch, "seg_loss": seg_mean, "bank_loss": bank_mean,
                        **{k: v for k, v in metrics.items() if k != "confusion"}})
        log.info("epoch %d: %s", epoch, row)
        if metrics["mIU"] > best_miu:
            best_miu, best_epoch = metrics["mIU"], epoch
            best_arrays = {n: a.copy() for n, a in model.arrays().items()}
        if on_epoch is not None:
            on_epoch(epoch, row)
    final_arrays = {n: a.copy() for n, a in model.arrays().items()}
    model.load_arrays(best_arrays)
    return TrainResult(model, best_arrays, best_epoch, rows, history, final_arrays)
