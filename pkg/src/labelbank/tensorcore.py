"""Minimal reverse-mode autodiff over float64 numpy arrays.

Only the primitives the segmentation pipeline needs are provided. Every
primitive returns a new :class:`Tensor` that remembers its parents and a
closure mapping the output gradient to one gradient per parent.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

IGNORE = 255
DEFAULT_EPS = 1e-7


class ShapeError(ValueError):
    pass


class DomainError(ValueError):
    pass


class ConfigError(ValueError):
    pass


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "op", "parents", "_backward", "aux")

    def __init__(self, data, requires_grad: bool = False, op: str = "leaf",
                 parents: tuple = (), backward: Callable | None = None):
        self.data = np.ascontiguousarray(data, dtype=np.float64)
        if self.data.ndim == 0:
            self.data = self.data.reshape(())
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.op = op
        self.parents = parents
        self._backward = backward
        # per-op forward facts kept for diagnostics (kink margins)
        self.aux = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def backward(self) -> "Graph":
        return backward(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, op: str, parents: Sequence[Tensor], backward_fn) -> Tensor:
    needs = any(p.requires_grad for p in parents)
    return Tensor(data, requires_grad=needs, op=op,
                  parents=tuple(parents) if needs else (),
                  backward=backward_fn if needs else None)


@dataclass
class Graph:
    """Topologically ordered primitive applications reachable from an output."""

    nodes: list = field(default_factory=list)

    @classmethod
    def from_output(cls, out: Tensor) -> "Graph":
        order: list[Tensor] = []
        seen: set[int] = set()
        stack = [(out, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node.parents:
                if id(p) not in seen:
                    stack.append((p, False))
        return cls(order)

    def kink_margin(self) -> float:
        """Smallest distance of any relu input to 0 or any max-op winner to its runner-up."""
        margin = np.inf
        for node in self.nodes:
            if node.aux is not None:
                margin = min(margin, float(node.aux))
        return margin


def backward(loss: Tensor) -> Graph:
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    graph = Graph.from_output(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(graph.nodes):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            if node.requires_grad:
                node.grad = g if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node.parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg
    return graph


# ---------------------------------------------------------------------------
# elementwise


def sigmoid(x: Tensor) -> Tensor:
    x = as_tensor(x)
    y = _sigmoid(x.data)

    def bw(g):
        return (g * y * (1.0 - y),)

    return _make(y, "sigmoid", (x,), bw)


def _sigmoid(a: np.ndarray) -> np.ndarray:
    out = np.empty_like(a)
    pos = a >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-a[pos]))
    e = np.exp(a[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def logit(x: Tensor, eps: float = DEFAULT_EPS) -> Tensor:
    x = as_tensor(x)
    if not 0.0 < eps < 0.5:
        raise ConfigError(f"eps must lie in (0, 0.5), got {eps}")
    a = x.data
    if np.any(a < 0.0) or np.any(a > 1.0) or np.any(np.isnan(a)):
        raise DomainError("logit input outside [0, 1]")
    clamped = np.clip(a, eps, 1.0 - eps)
    y = np.log(clamped) - np.log1p(-clamped)
    inside = (a >= eps) & (a <= 1.0 - eps)

    def bw(g):
        return (np.where(inside, g / (clamped * (1.0 - clamped)), 0.0),)

    return _make(y, "logit", (x,), bw)


def relu(x: Tensor) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    # np.maximum keeps NaN, so a blown-up network still shows up as a non-finite loss
    out = _make(np.maximum(x.data, 0.0), "relu", (x,), lambda g: (g * mask,))
    out.aux = np.min(np.abs(x.data)) if x.data.size else np.inf
    return out


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"add shapes differ: {a.shape} vs {b.shape}")
    return _make(a.data + b.data, "add", (a, b), lambda g: (g, g))


def scale(x: Tensor, factor: float) -> Tensor:
    x = as_tensor(x)
    return _make(x.data * factor, "scale", (x,), lambda g: (g * factor,))


def total(x: Tensor) -> Tensor:
    x = as_tensor(x)
    return _make(np.sum(x.data), "sum", (x,), lambda g: (np.broadcast_to(g, x.shape).copy(),))


def mean(x: Tensor) -> Tensor:
    x = as_tensor(x)
    n = x.data.size
    return _make(np.sum(x.data) / n, "mean", (x,),
                 lambda g: (np.full(x.shape, np.asarray(g).item() / n),))


def reshape(x: Tensor, shape: tuple) -> Tensor:
    x = as_tensor(x)
    return _make(x.data.reshape(shape), "reshape", (x,), lambda g: (g.reshape(x.shape),))


def stack(xs: Sequence[Tensor]) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    data = np.stack([x.data for x in xs])
    return _make(data, "stack", xs, lambda g: tuple(g[i] for i in range(len(xs))))


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    """Concatenate two c×h×w maps along the channel axis."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape[1:] != b.shape[1:]:
        raise ShapeError(f"spatial sizes differ: {a.shape} vs {b.shape}")
    ca = a.shape[0]
    return _make(np.concatenate([a.data, b.data]), "concat", (a, b),
                 lambda g: (g[:ca], g[ca:]))


def tile_spatial(v: Tensor, h: int, w: int) -> Tensor:
    """Replicate a length-d vector at every location of a d×h×w map."""
    v = as_tensor(v)
    d = v.shape[0]
    data = np.broadcast_to(v.data.reshape(d, 1, 1), (d, h, w)).copy()
    return _make(data, "tile", (v,), lambda g: (g.sum(axis=(1, 2)),))


def mul_broadcast(a: Tensor, b: Tensor) -> Tensor:
    """out[l, i, j] = a[l] * b[l, i, j] for a of shape k, k×1×1 and b of shape k×h×w."""
    a, b = as_tensor(a), as_tensor(b)
    if b.data.ndim != 3:
        raise ShapeError(f"expected k×h×w map, got {b.shape}")
    k = b.shape[0]
    if a.data.size != k or a.shape[0] != k:
        raise ShapeError(f"bank length {a.shape} does not match map depth {k}")
    av = a.data.reshape(k, 1, 1)

    def bw(g):
        return ((g * b.data).sum(axis=(1, 2)).reshape(a.shape), g * av)

    return _make(av * b.data, "mul_broadcast", (a, b), bw)


# ---------------------------------------------------------------------------
# dense layers


def linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """y = W x + b for a vector x."""
    x, weight, bias = as_tensor(x), as_tensor(weight), as_tensor(bias)
    if weight.data.ndim != 2 or x.data.ndim != 1 or weight.shape[1] != x.shape[0]:
        raise ShapeError(f"linear: W {weight.shape} incompatible with x {x.shape}")
    if bias.shape != (weight.shape[0],):
        raise ShapeError(f"linear: bias {bias.shape} does not match W {weight.shape}")

    def bw(g):
        return (weight.data.T @ g, np.outer(g, x.data), g)

    return _make(weight.data @ x.data + bias.data, "linear", (x, weight, bias), bw)


def embedding_mean(table: Tensor, ids: Sequence[int]) -> Tensor:
    """Mean of the table rows selected by ``ids`` (repeats count)."""
    table = as_tensor(table)
    idx = np.asarray(list(ids), dtype=np.int64)
    if idx.size == 0:
        raise ShapeError("embedding_mean needs at least one id")
    if idx.min() < 0 or idx.max() >= table.shape[0]:
        raise ShapeError("embedding id out of range")
    n = idx.size

    def bw(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, idx, g / n)
        return (gt,)

    return _make(table.data[idx].mean(axis=0), "embedding_mean", (table,), bw)


# ---------------------------------------------------------------------------
# convolution and pooling


def _im2col(xp: np.ndarray, k: int, dilation: int, h: int, w: int) -> np.ndarray:
    c = xp.shape[0]
    cols = np.empty((c, k * k, h, w))
    for ti in range(k):
        for tj in range(k):
            r, s = ti * dilation, tj * dilation
            cols[:, ti * k + tj] = xp[:, r:r + h, s:s + w]
    return cols.reshape(c * k * k, h * w)


def conv2d(x: Tensor, weight: Tensor, bias: Tensor, dilation: int = 1,
           zero_pad: int | None = None) -> Tensor:
    """Stride-1 cross-correlation with dilation; ``zero_pad=None`` means same padding."""
    x, weight, bias = as_tensor(x), as_tensor(weight), as_tensor(bias)
    if weight.data.ndim != 4 or weight.shape[2] != weight.shape[3]:
        raise ConfigError(f"conv weights must be c_out×c_in×k×k, got {weight.shape}")
    c_out, c_in, k, _ = weight.shape
    if k % 2 == 0:
        raise ConfigError(f"kernel size must be odd, got {k}")
    if dilation < 1:
        raise ConfigError(f"dilation must be >= 1, got {dilation}")
    if x.data.ndim != 3 or x.shape[0] != c_in:
        raise ShapeError(f"conv input {x.shape} does not match weights {weight.shape}")
    if bias.shape != (c_out,):
        raise ShapeError(f"conv bias {bias.shape} does not match {c_out} outputs")
    span = (k - 1) * dilation
    pad = span // 2 if zero_pad is None else zero_pad
    _, h, w = x.shape
    ho, wo = h + 2 * pad - span, w + 2 * pad - span
    if ho < 1 or wo < 1:
        raise ShapeError("conv output would be empty")
    xp = np.pad(x.data, ((0, 0), (pad, pad), (pad, pad))) if pad else x.data
    cols = _im2col(xp, k, dilation, ho, wo)
    wmat = weight.data.reshape(c_out, -1)
    out = (wmat @ cols + bias.data[:, None]).reshape(c_out, ho, wo)

    def bw(g):
        gm = g.reshape(c_out, -1)
        gw = (gm @ cols.T).reshape(weight.shape)
        gb = gm.sum(axis=1)
        gcols = (wmat.T @ gm).reshape(c_in, k * k, ho, wo)
        gxp = np.zeros_like(xp)
        for ti in range(k):
            for tj in range(k):
                r, s = ti * dilation, tj * dilation
                gxp[:, r:r + ho, s:s + wo] += gcols[:, ti * k + tj]
        gx = gxp[:, pad:pad + h, pad:pad + w] if pad else gxp
        return (gx, gw, gb)

    return _make(out, "conv2d", (x, weight, bias), bw)


def _first_argmax_margin(vals: np.ndarray, axis: int) -> tuple[np.ndarray, float]:
    arg = np.argmax(vals, axis=axis)
    if vals.shape[axis] < 2:
        return arg, np.inf
    part = np.sort(vals, axis=axis)
    top = np.take(part, -1, axis=axis)
    second = np.take(part, -2, axis=axis)
    gap = top - second
    # exact ties are deterministic by rule; only near-ties are kinks
    gap = gap[gap > 0]
    return arg, float(gap.min()) if gap.size else np.inf


def max_pool2x2(x: Tensor) -> Tensor:
    x = as_tensor(x)
    c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"max_pool2x2 needs even sizes, got {x.shape}")
    blocks = x.data.reshape(c, h // 2, 2, w // 2, 2).transpose(0, 1, 3, 2, 4).reshape(c, h // 2, w // 2, 4)
    arg, margin = _first_argmax_margin(blocks, axis=3)
    out = np.take_along_axis(blocks, arg[..., None], axis=3)[..., 0]

    def bw(g):
        gb = np.zeros_like(blocks)
        np.put_along_axis(gb, arg[..., None], g[..., None], axis=3)
        return (gb.reshape(c, h // 2, w // 2, 2, 2).transpose(0, 1, 3, 2, 4).reshape(c, h, w),)

    res = _make(out, "max_pool2x2", (x,), bw)
    res.aux = margin
    return res


def spp_cells(n: int, g: int) -> list[tuple[int, int]]:
    """Near-equal cell bounds: floor start, ceil end."""
    return [((i * n) // g, -((-(i + 1) * n) // g)) for i in range(g)]


def _region_argmax(x: np.ndarray, regions: Sequence[tuple[int, int, int, int]]):
    """Per-channel max over each rectangle; returns values, flat argmax indices, margin."""
    c, h, w = x.shape
    vals = np.empty((len(regions), c))
    flat = np.empty((len(regions), c), dtype=np.int64)
    margin = np.inf
    for n, (r0, r1, c0, c1) in enumerate(regions):
        block = x[:, r0:r1, c0:c1].reshape(c, -1)
        a, m = _first_argmax_margin(block, axis=1)
        margin = min(margin, m)
        vals[n] = block[np.arange(c), a]
        bw = c1 - c0
        flat[n] = (r0 + a // bw) * w + (c0 + a % bw)
    return vals, flat, margin


def region_max(x: Tensor, regions: Sequence[tuple[int, int, int, int]]) -> Tensor:
    """Per-channel max of a c×h×w map over each (r0, r1, c0, c1) rectangle -> n×c."""
    x = as_tensor(x)
    c, h, w = x.shape
    vals, flat, margin = _region_argmax(x.data, regions)

    def bw(g):
        gx = np.zeros(c * h * w)
        chan = np.arange(c) * h * w
        for n in range(len(regions)):
            np.add.at(gx, chan + flat[n], g[n])
        return (gx.reshape(c, h, w),)

    out = _make(vals, "region_max", (x,), bw)
    out.aux = margin
    return out


def spp_pool(x: Tensor, levels: Sequence[int]) -> Tensor:
    """Spatial pyramid max pooling -> vector of length c * sum(g*g).

    Layout is level-major, then channel, then cell in row-major order.
    """
    x = as_tensor(x)
    if not levels:
        raise ConfigError("spp_pool needs at least one level")
    c, h, w = x.shape
    parts, idx, margin = [], [], np.inf
    for g in levels:
        if g < 1 or g > h or g > w:
            raise ConfigError(f"pyramid level {g} does not fit a {h}×{w} map")
        regions = [(r0, r1, c0, c1) for r0, r1 in spp_cells(h, g) for c0, c1 in spp_cells(w, g)]
        vals, flat, m = _region_argmax(x.data, regions)
        margin = min(margin, m)
        parts.append(vals.T.reshape(-1))
        idx.append((np.arange(c)[:, None] * h * w + flat.T).reshape(-1))
    out_data = np.concatenate(parts)
    src = np.concatenate(idx)

    def bw(g):
        gx = np.zeros(c * h * w)
        np.add.at(gx, src, g)
        return (gx.reshape(c, h, w),)

    out = _make(out_data, "spp_pool", (x,), bw)
    out.aux = margin
    return out


def window_max(preds: Tensor) -> Tensor:
    """Columnwise max over n×k predictions; ties go to the first row."""
    preds = as_tensor(preds)
    if preds.data.ndim != 2 or preds.shape[0] < 1:
        raise ShapeError(f"window_max expects n×k with n >= 1, got {preds.shape}")
    arg, margin = _first_argmax_margin(preds.data, axis=0)
    k = preds.shape[1]
    cols = np.arange(k)

    def bw(g):
        gp = np.zeros_like(preds.data)
        gp[arg, cols] = g
        return (gp,)

    out = _make(preds.data[arg, cols], "window_max", (preds,), bw)
    out.aux = margin
    return out


# ---------------------------------------------------------------------------
# losses


def softmax_ce(logits: Tensor, target: np.ndarray, ignore: int = IGNORE) -> Tensor:
    """Mean per-pixel softmax cross-entropy of k×H×W logits over non-ignored pixels."""
    logits = as_tensor(logits)
    target = np.asarray(target)
    k = logits.shape[0]
    if logits.shape[1:] != target.shape:
        raise ShapeError(f"logits {logits.shape} vs target {target.shape}")
    valid = target != ignore
    n = int(valid.sum())
    if n == 0:
        raise ShapeError("softmax_ce: every pixel is ignored")
    if np.any(target[valid] >= k) or np.any(target[valid] < 0):
        raise ShapeError("softmax_ce: target class out of range")
    z = logits.data - logits.data.max(axis=0, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=0))
    tgt = np.where(valid, target, 0).astype(np.int64)
    picked = np.take_along_axis(z, tgt[None], axis=0)[0]
    loss = float(np.sum((lse - picked)[valid])) / n

    def bw(g):
        p = np.exp(z - lse[None])
        np.put_along_axis(p, tgt[None], np.take_along_axis(p, tgt[None], axis=0) - 1.0, axis=0)
        return (p * valid[None] * (np.asarray(g).item() / n),)

    return _make(np.array(loss), "softmax_ce", (logits,), bw)


def sigmoid_ce(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean binary cross-entropy of sigmoid(logits) against {0, 1} targets."""
    logits = as_tensor(logits)
    t = np.asarray(targets, dtype=np.float64)
    if t.shape != logits.shape:
        raise ShapeError(f"targets {t.shape} vs logits {logits.shape}")
    x = logits.data
    # softplus(x) - t*x, stable for large |x|
    per = np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x))) - t * x
    n = x.size

    def bw(g):
        return ((_sigmoid(x) - t) * (np.asarray(g).item() / n),)

    return _make(np.array(per.sum() / n), "sigmoid_ce", (logits,), bw)


# ---------------------------------------------------------------------------
# resampling


def interp_matrix(n_out: int, n_in: int) -> np.ndarray:
    """Align-corners linear interpolation weights, shape n_out×n_in."""
    m = np.zeros((n_out, n_in))
    if n_in == 1 or n_out == 1:
        m[:, 0] = 1.0
        return m
    pos = np.arange(n_out) * (n_in - 1) / (n_out - 1)
    lo = np.minimum(np.floor(pos).astype(np.int64), n_in - 2)
    frac = pos - lo
    rows = np.arange(n_out)
    m[rows, lo] = 1.0 - frac
    m[rows, lo + 1] += frac
    return m


def bilinear_upsample(x: Tensor, H: int, W: int) -> Tensor:
    """Align-corners bilinear resize of a k×h×w map to k×H×W."""
    x = as_tensor(x)
    _, h, w = x.shape
    if (H, W) == (h, w):
        return _make(x.data.copy(), "bilinear_upsample", (x,), lambda g: (g,))
    ry, rx = interp_matrix(H, h), interp_matrix(W, w)
    out = np.einsum("ij,kjl,ml->kim", ry, x.data, rx, optimize=True)

    def bw(g):
        return (np.einsum("ij,kim,ml->kjl", ry, g, rx, optimize=True),)

    return _make(out, "bilinear_upsample", (x,), bw)


# ---------------------------------------------------------------------------
# finite-difference checking


def numerical_grad(fn: Callable[[], Tensor], param: Tensor, step: float = 1e-5,
                   indices: Sequence[int] | None = None) -> np.ndarray:
    """Central differences of the scalar ``fn()`` w.r.t. selected flat entries of ``param``."""
    flat = param.data.reshape(-1)
    idx = range(flat.size) if indices is None else indices
    out = np.zeros(len(idx))
    for n, i in enumerate(idx):
        orig = flat[i]
        flat[i] = orig + step
        fp = fn().item()
        flat[i] = orig - step
        fm = fn().item()
        flat[i] = orig
        out[n] = (fp - fm) / (2 * step)
    return out


def max_relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> float:
    a, n = np.asarray(analytic).reshape(-1), np.asarray(numeric).reshape(-1)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / denom)) if a.size else 0.0


def gradcheck(fn: Callable[[], Tensor], params: Sequence[Tensor], step: float = 1e-5,
              max_entries: int | None = None, rng: np.random.Generator | None = None) -> float:
    """Max relative error between backward() and central differences over ``params``.

    With ``max_entries`` set, a random subset of entries per tensor is checked.
    """
    for p in params:
        p.requires_grad = True
        p.grad = None
    backward(fn())
    worst = 0.0
    for p in params:
        analytic = np.zeros(p.data.size) if p.grad is None else p.grad.reshape(-1)
        if max_entries is not None and p.data.size > max_entries:
            rng = rng or np.random.default_rng(0)
            idx = np.sort(rng.choice(p.data.size, size=max_entries, replace=False))
        else:
            idx = np.arange(p.data.size)
        numeric = numerical_grad(fn, p, step, idx)
        worst = max(worst, max_relative_error(analytic[idx], numeric))
    return worst
