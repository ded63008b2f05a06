"""
Forward operations and their vector-Jacobian products.

Every function takes and returns :class:`~mildnet.tensor.Tensor` objects in
(batch, channel, height, width) layout. Spatial "same" padding is zero
padding. Reductions accumulate in float64 and cast back to the input dtype.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import ConfigError
from .tensor import Tensor, make_result

logger = logging.getLogger(__name__)


# ----------------------------------------------------------------------
# convolution
# ----------------------------------------------------------------------
@dataclass
class ConvParams:
    """Weights and geometry of one convolution layer.

    ``weight`` has shape (out_ch, in_ch, kh, kw); ``bias`` has shape (out_ch,).
    """

    weight: Tensor
    bias: Optional[Tensor] = None
    stride: int = 1
    dilation: int = 1

    def __post_init__(self):
        if self.weight.ndim != 4:
            raise ConfigError(f"conv weight must be 4-D, got shape {self.weight.shape}")
        if self.dilation < 1:
            raise ConfigError(f"dilation_rate must be >= 1, got {self.dilation}")
        if self.stride < 1:
            raise ConfigError(f"stride must be >= 1, got {self.stride}")
        if self.bias is not None and self.bias.shape != (self.weight.shape[0],):
            raise ConfigError(
                f"bias shape {self.bias.shape} does not match out_ch {self.weight.shape[0]}"
            )

    @property
    def out_ch(self) -> int:
        return self.weight.shape[0]

    @property
    def in_ch(self) -> int:
        return self.weight.shape[1]

    @property
    def kernel_size(self) -> tuple:
        return self.weight.shape[2:]

    def effective_extent(self) -> tuple:
        kh, kw = self.kernel_size
        d = self.dilation
        return kh + (kh - 1) * (d - 1), kw + (kw - 1) * (d - 1)


def _same_padding(size: int, eff: int, stride: int) -> tuple:
    out = -(-size // stride)
    total = max((out - 1) * stride + eff - size, 0)
    return total // 2, total - total // 2, out


def conv2d(x: Tensor, params: ConvParams) -> Tensor:
    """2-D (optionally dilated/strided) convolution with "same" zero padding."""
    if x.ndim != 4:
        raise ConfigError(f"conv2d expects a 4-D input, got shape {x.shape}")
    n, c, h, w = x.shape
    if c != params.in_ch:
        raise ConfigError(f"conv2d: input has {c} channels, kernel expects {params.in_ch}")
    o = params.out_ch
    kh, kw = params.kernel_size
    d, s = params.dilation, params.stride
    eh, ew = params.effective_extent()
    pt, pb, ho = _same_padding(h, eh, s)
    pl, pr, wo = _same_padding(w, ew, s)

    xd = x.data
    wd = params.weight.data
    dtype = np.result_type(xd, wd)
    # channel-major layout so every product below is a plain 2-D GEMM
    xt = xd.astype(dtype, copy=False).transpose(1, 0, 2, 3)
    if pt or pb or pl or pr:
        xp = np.zeros((c, n, h + pt + pb, w + pl + pr), dtype=dtype)
        xp[:, :, pt : pt + h, pl : pl + w] = xt
    else:
        xp = xt

    taps = [(i * d, j * d) for i in range(kh) for j in range(kw)]
    pointwise = kh == 1 and kw == 1 and s == 1
    if pointwise:
        cols = np.ascontiguousarray(xp).reshape(c, n * h * w)
    else:
        cols = np.empty((c, kh * kw, n, ho, wo), dtype=dtype)
        for t, (di, dj) in enumerate(taps):
            cols[:, t] = xp[:, :, di : di + (ho - 1) * s + 1 : s, dj : dj + (wo - 1) * s + 1 : s]
        cols = cols.reshape(c * kh * kw, n * ho * wo)
    wmat = wd.reshape(o, c * kh * kw).astype(dtype, copy=False)
    out = wmat @ cols
    if params.bias is not None:
        out += params.bias.data.astype(dtype, copy=False)[:, None]
    out = np.ascontiguousarray(out.reshape(o, n, ho, wo).transpose(1, 0, 2, 3))

    def _backward(g):
        g2 = np.ascontiguousarray(g.transpose(1, 0, 2, 3)).reshape(o, n * ho * wo)
        gw = gb = gx = None
        if params.weight.requires_grad:
            gw = (g2 @ cols.T).reshape(wd.shape).astype(wd.dtype, copy=False)
        if params.bias is not None and params.bias.requires_grad:
            gb = g2.sum(axis=1, dtype=np.float64).astype(params.bias.data.dtype)
        if x.requires_grad:
            gcols = wmat.T @ g2
            if pointwise:
                gxt = gcols.reshape(c, n, h, w)
            else:
                gcols = gcols.reshape(c, kh * kw, n, ho, wo)
                gxp = np.zeros((c, n, h + pt + pb, w + pl + pr), dtype=gcols.dtype)
                for t, (di, dj) in enumerate(taps):
                    gxp[:, :, di : di + (ho - 1) * s + 1 : s, dj : dj + (wo - 1) * s + 1 : s] += gcols[:, t]
                gxt = gxp[:, :, pt : pt + h, pl : pl + w]
            gx = np.ascontiguousarray(gxt.transpose(1, 0, 2, 3)).astype(xd.dtype, copy=False)
        return gx, gw, gb

    parents = [x, params.weight] + ([params.bias] if params.bias is not None else [])

    def _dispatch(g):
        gx, gw, gb = _backward(g)
        return (gx, gw, gb) if params.bias is not None else (gx, gw)

    return make_result(out, parents, _dispatch, f"conv2d(d={d})")


# ----------------------------------------------------------------------
# pooling / resampling
# ----------------------------------------------------------------------
def maxpool2x(x: Tensor) -> Tensor:
    """2x2 max-pooling with stride 2.

    Odd extents are padded by edge replication first. The gradient is routed
    to the first maximal element of each window only.
    """
    n, c, h, w = x.shape
    if h == 0 or w == 0:
        raise ConfigError("maxpool2x on empty spatial extent")
    xd = x.data
    ph, pw = h % 2, w % 2
    if ph or pw:
        logger.debug("maxpool2x: replicating edge to pad %dx%d input", h, w)
        xd = np.pad(xd, ((0, 0), (0, 0), (0, ph), (0, pw)), mode="edge")
    h2, w2 = (h + ph) // 2, (w + pw) // 2
    windows = xd.reshape(n, c, h2, 2, w2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h2, w2, 4)
    idx = windows.argmax(axis=-1)
    out = np.take_along_axis(windows, idx[..., None], axis=-1)[..., 0]

    def _backward(g):
        gw = np.zeros((n, c, h2, w2, 4), dtype=g.dtype)
        np.put_along_axis(gw, idx[..., None], g[..., None], axis=-1)
        gx = gw.reshape(n, c, h2, w2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h + ph, w + pw)
        if ph or pw:
            # fold the replicated row/column back onto the edge it copied
            if ph:
                gx[:, :, h - 1, :] += gx[:, :, h, :]
            if pw:
                gx[:, :, :, w - 1] += gx[:, :, :, w]
            gx = gx[:, :, :h, :w]
        return (np.ascontiguousarray(gx),)

    return make_result(np.ascontiguousarray(out), [x], _backward, "maxpool2x")


def cubic_weight(t, a: float = -0.5):
    """Keys cubic convolution kernel; a = -0.5 gives Catmull-Rom."""
    t = np.abs(np.asarray(t, dtype=np.float64))
    w = np.zeros_like(t)
    near = t <= 1
    far = (t > 1) & (t < 2)
    w[near] = ((a + 2) * t[near] - (a + 3)) * t[near] ** 2 + 1
    w[far] = ((a * t[far] - 5 * a) * t[far] + 8 * a) * t[far] - 4 * a
    return w


def _cubic_taps(n_in: int, n_out: int):
    # half-pixel centre alignment, indices clamped at the borders
    scale = n_in / n_out
    src = (np.arange(n_out) + 0.5) * scale - 0.5
    base = np.floor(src).astype(np.int64)
    frac = src - base
    offsets = np.arange(-1, 3)
    idx = np.clip(base[:, None] + offsets[None, :], 0, n_in - 1)
    weights = cubic_weight(frac[:, None] - offsets[None, :])
    return idx, weights


def _resample_axis(x: np.ndarray, idx: np.ndarray, weights: np.ndarray, axis: int) -> np.ndarray:
    # out = x[ref] + sum_t w_t (x[t] - x[ref]); exact on constant signals
    x64 = np.moveaxis(x.astype(np.float64, copy=False), axis, -1)
    ref = np.argmax(weights, axis=1)
    ref_idx = idx[np.arange(idx.shape[0]), ref]
    base = x64[..., ref_idx]
    acc = np.zeros_like(base)
    for t in range(idx.shape[1]):
        acc += weights[:, t] * (x64[..., idx[:, t]] - base)
    return np.moveaxis(base + acc, -1, axis)


def bicubic_resize(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Cubic (a = -0.5) resampling with edge clamping; not differentiable.

    Used on the raw network input only, which never requires a gradient.
    """
    if out_h < 1 or out_w < 1:
        raise ConfigError(f"bicubic_resize: output extents must be >= 1, got {out_h}x{out_w}")
    if x.ndim != 4:
        raise ConfigError(f"bicubic_resize expects a 4-D input, got shape {x.shape}")
    _, _, h, w = x.shape
    if (h, w) == (out_h, out_w):
        return Tensor(x.data.copy())
    out = x.data
    if out_h != h:
        idx, wts = _cubic_taps(h, out_h)
        out = _resample_axis(out, idx, wts, axis=2)
    if out_w != w:
        idx, wts = _cubic_taps(w, out_w)
        out = _resample_axis(out, idx, wts, axis=3)
    return Tensor(out.astype(x.dtype))


def _up_axis(x: np.ndarray, axis: int) -> np.ndarray:
    x = np.moveaxis(x, axis, -1)
    prev = np.concatenate([x[..., :1], x[..., :-1]], axis=-1)
    nxt = np.concatenate([x[..., 1:], x[..., -1:]], axis=-1)
    out = np.empty(x.shape[:-1] + (2 * x.shape[-1],), dtype=x.dtype)
    out[..., 0::2] = x + 0.25 * (prev - x)
    out[..., 1::2] = x + 0.25 * (nxt - x)
    return np.moveaxis(out, -1, axis)


def _up_axis_grad(g: np.ndarray, axis: int) -> np.ndarray:
    g = np.moveaxis(g, axis, -1)
    ge, go = g[..., 0::2], g[..., 1::2]
    gx = 0.75 * (ge + go)
    # prev tap of output 2i is x[i-1] (clamped to x[0])
    gx[..., :-1] += 0.25 * ge[..., 1:]
    gx[..., 0] += 0.25 * ge[..., 0]
    # next tap of output 2i+1 is x[i+1] (clamped to x[-1])
    gx[..., 1:] += 0.25 * go[..., :-1]
    gx[..., -1] += 0.25 * go[..., -1]
    return np.moveaxis(gx, -1, axis)


def upsample2x(x: Tensor) -> Tensor:
    """Bilinear x2 upsampling (half-pixel alignment, edge clamp)."""
    out = _up_axis(_up_axis(x.data, 2), 3)

    def _backward(g):
        return (np.ascontiguousarray(_up_axis_grad(_up_axis_grad(g, 3), 2)),)

    return make_result(np.ascontiguousarray(out), [x], _backward, "upsample2x")


def global_avg_pool(x: Tensor) -> Tensor:
    """Per-channel spatial mean, shape (batch, ch, 1, 1)."""
    n, c, h, w = x.shape
    out = x.data.mean(axis=(2, 3), keepdims=True, dtype=np.float64).astype(x.dtype)

    def _backward(g):
        return (np.broadcast_to(g / (h * w), x.shape).astype(x.dtype),)

    return make_result(out, [x], _backward, "global_avg_pool")


def broadcast_spatial(x: Tensor, h: int, w: int) -> Tensor:
    """Tile a (batch, ch, 1, 1) tensor to (batch, ch, h, w)."""
    if x.shape[2:] != (1, 1):
        raise ConfigError(f"broadcast_spatial expects 1x1 spatial input, got {x.shape}")
    out = np.broadcast_to(x.data, x.shape[:2] + (h, w)).copy()

    def _backward(g):
        return (g.sum(axis=(2, 3), keepdims=True, dtype=np.float64).astype(x.dtype),)

    return make_result(out, [x], _backward, "broadcast_spatial")


# ----------------------------------------------------------------------
# channel plumbing
# ----------------------------------------------------------------------
def concat_channels(*tensors: Tensor) -> Tensor:
    """Concatenate along the channel axis."""
    if len(tensors) < 2:
        raise ConfigError("concat_channels needs at least two tensors")
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.shape[0] != ref[0] or t.shape[2:] != ref[2:]:
            raise ConfigError(f"concat_channels: extent mismatch {ref} vs {t.shape}")
    sizes = [t.shape[1] for t in tensors]
    bounds = np.cumsum([0] + sizes)
    out = np.concatenate([t.data for t in tensors], axis=1)

    def _backward(g):
        return tuple(g[:, bounds[i] : bounds[i + 1]] for i in range(len(tensors)))

    return make_result(out, list(tensors), _backward, "concat_channels")


def channel_slice(x: Tensor, start: int, stop: int) -> Tensor:
    """Channels ``start:stop`` of ``x``; the inverse of :func:`concat_channels`."""
    out = x.data[:, start:stop].copy()

    def _backward(g):
        gx = np.zeros_like(x.data, dtype=g.dtype)
        gx[:, start:stop] = g
        return (gx,)

    return make_result(out, [x], _backward, "channel_slice")


# ----------------------------------------------------------------------
# pointwise
# ----------------------------------------------------------------------
def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    out = np.where(mask, x.data, 0).astype(x.dtype)
    return make_result(out, [x], lambda g: (g * mask,), "relu")


def dropout(x: Tensor, rate: float, training: bool, rng: Optional[np.random.Generator] = None) -> Tensor:
    """Inverted dropout. Inference mode returns ``x`` itself."""
    if not 0 <= rate < 1:
        raise ConfigError(f"dropout rate must be in [0, 1), got {rate}")
    if not training or rate == 0:
        return x
    if rng is None:
        raise ConfigError("dropout in training mode needs an explicit random generator")
    keep = (rng.random(x.shape) >= rate).astype(x.dtype) / x.dtype.type(1 - rate)
    return make_result(x.data * keep, [x], lambda g: (g * keep,), "dropout")


def add(a: Tensor, b) -> Tensor:
    """Elementwise sum of equal-shape tensors (or tensor + python scalar)."""
    if not isinstance(b, Tensor):
        return make_result(a.data + b, [a], lambda g: (g,), "add")
    if a.shape != b.shape:
        raise ConfigError(f"add: shape mismatch {a.shape} vs {b.shape}")
    return make_result(a.data + b.data, [a, b], lambda g: (g, g), "add")


def scale(a: Tensor, factor: float) -> Tensor:
    """Multiply by a python scalar."""
    if isinstance(factor, Tensor):
        raise ConfigError("scale: only python scalars are supported as factors")
    f = float(factor)
    return make_result(a.data * a.dtype.type(f), [a], lambda g: (g * f,), "scale")


def sum_all(x: Tensor) -> Tensor:
    out = np.asarray(x.data.sum(dtype=np.float64)).astype(x.dtype)
    return make_result(out, [x], lambda g: (np.broadcast_to(g, x.shape).astype(x.dtype),), "sum")


def sum_squares(x: Tensor) -> Tensor:
    """Squared L2 norm of all entries (weight decay term)."""
    out = np.asarray(np.square(x.data, dtype=np.float64).sum()).astype(x.dtype)
    return make_result(out, [x], lambda g: (2 * g * x.data,), "sum_squares")


def weighted_sum(x: Tensor, weights: np.ndarray) -> Tensor:
    """sum(x * weights) for a constant array; handy for gradient probes."""
    w = np.asarray(weights, dtype=x.dtype)
    out = np.asarray((x.data.astype(np.float64) * w).sum()).astype(x.dtype)
    return make_result(out, [x], lambda g: (g * w,), "weighted_sum")


# ----------------------------------------------------------------------
# classification heads
# ----------------------------------------------------------------------
def softmax(logits: np.ndarray, axis: int = 1) -> np.ndarray:
    """Numerically stable softmax over the channel axis (no gradient)."""
    z = logits - logits.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def softmax_cross_entropy(logits: Tensor, labels: np.ndarray, weight_map: Optional[np.ndarray] = None) -> Tensor:
    """Mean per-pixel negative log-likelihood of ``labels`` under softmax(logits).

    ``logits`` is (N, K, H, W); ``labels`` is (N, H, W) with values in [0, K).
    Multiply by N*H*W to recover the summed form.
    """
    if logits.ndim != 4:
        raise ConfigError(f"softmax_cross_entropy expects (N,K,H,W) logits, got {logits.shape}")
    n, k, h, w = logits.shape
    labels = np.asarray(labels)
    if labels.shape != (n, h, w):
        raise ConfigError(f"label shape {labels.shape} does not match logits {logits.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ConfigError(f"labels must lie in [0, {k}), got range [{labels.min()}, {labels.max()}]")
    z = logits.data.astype(np.float64)
    z = z - z.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - logsum
    onehot = np.eye(k, dtype=np.float64)[labels].transpose(0, 3, 1, 2)
    nll = -(logp * onehot).sum(axis=1)
    count = n * h * w
    if weight_map is not None:
        wm = np.asarray(weight_map, dtype=np.float64).reshape(n, h, w)
        nll = nll * wm
    else:
        wm = None
    out = np.asarray(nll.sum() / count).astype(logits.dtype)

    def _backward(g):
        grad = np.exp(logp) - onehot
        if wm is not None:
            grad = grad * wm[:, None]
        return ((grad * (float(g) / count)).astype(logits.dtype),)

    return make_result(out, [logits], _backward, "softmax_cross_entropy")


__all__ = [
    "ConvParams",
    "conv2d",
    "maxpool2x",
    "bicubic_resize",
    "cubic_weight",
    "upsample2x",
    "global_avg_pool",
    "broadcast_spatial",
    "concat_channels",
    "channel_slice",
    "relu",
    "dropout",
    "add",
    "scale",
    "sum_all",
    "sum_squares",
    "weighted_sum",
    "softmax",
    "softmax_cross_entropy",
]

