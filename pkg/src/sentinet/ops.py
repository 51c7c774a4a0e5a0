"""Forward and backward kernels for every layer type in the network.

Tensors are plain ``numpy.ndarray`` objects.  Kernels preserve the dtype of
their inputs: the network runs in float32, the gradient checker feeds
float64 so that finite differences stay sharp.

Layout is NCHW throughout.  Convolution uses a patch-gather (im2col) path
backed by batched GEMM; :func:`conv2d_reference` is a direct-loop
implementation kept only as an independent oracle.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from sentinet.errors import DimensionError, NumericError, SpecError

Tensor = np.ndarray

# Batch samples per work unit.  Fixed so that results never depend on the
# thread count: every chunk is computed identically and reductions over
# chunks happen in chunk order.
CHUNK = 16


@dataclass(frozen=True)
class ConvSpec:
    out_channels: int
    kernel_h: int
    kernel_w: int
    stride: int = 1
    pad: int = 0
    groups: int = 1

    def __post_init__(self):
        if self.stride < 1:
            raise SpecError(f"conv stride must be >= 1, got {self.stride}")
        if self.pad < 0:
            raise SpecError(f"conv pad must be >= 0, got {self.pad}")
        if self.groups < 1 or self.out_channels % self.groups:
            raise SpecError(
                f"out_channels={self.out_channels} not divisible by groups={self.groups}"
            )
        if self.kernel_h < 1 or self.kernel_w < 1:
            raise SpecError("conv kernel must be at least 1x1")


@dataclass(frozen=True)
class PoolSpec:
    kernel: int
    stride: int

    def __post_init__(self):
        if self.kernel < 1 or self.stride < 1:
            raise SpecError(f"pool kernel and stride must be >= 1, got {self}")


@dataclass(frozen=True)
class LrnSpec:
    n: int = 5
    alpha: float = 1e-4
    beta: float = 0.75
    k: float = 2.0

    def __post_init__(self):
        if self.n < 1 or self.n % 2 == 0:
            raise SpecError(f"LRN window must be odd and >= 1, got {self.n}")
        if self.beta <= 0 or self.k <= 0:
            raise SpecError("LRN beta and k must be positive")


def conv_output_size(size: int, kernel: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - kernel) // stride + 1


def pool_output_size(size: int, kernel: int, stride: int) -> int:
    return (size - kernel) // stride + 1


def thread_count() -> int:
    """Worker threads allowed by ``SENTINET_THREADS`` (0 or unset = sequential)."""
    try:
        return max(0, int(os.environ.get("SENTINET_THREADS", "0")))
    except ValueError:
        return 0


def _map_chunks(fn, n):
    bounds = [(i, min(i + CHUNK, n)) for i in range(0, n, CHUNK)]
    workers = thread_count()
    if workers <= 1 or len(bounds) == 1:
        return [fn(lo, hi) for lo, hi in bounds]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(lambda b: fn(*b), bounds))


def check_finite(name: str, arr: Tensor) -> Tensor:
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"non-finite values in {name}")
    return arr


# --------------------------------------------------------------------------
# convolution


def _check_conv(x: Tensor, weight: Tensor, bias: Tensor, spec: ConvSpec):
    if x.ndim != 4:
        raise DimensionError(f"conv2d input must be 4-D (N,C,H,W), got shape {x.shape}")
    n, c, h, w = x.shape
    g = spec.groups
    if c % g:
        raise SpecError(f"in_channels={c} not divisible by groups={g}")
    expected = (spec.out_channels, c // g, spec.kernel_h, spec.kernel_w)
    if weight.shape != expected:
        axis = next(i for i, (a, b) in enumerate(zip(weight.shape, expected)) if a != b) \
            if weight.ndim == 4 else "rank"
        raise DimensionError(
            f"conv2d weight shape {weight.shape} != expected {expected} (axis {axis})"
        )
    if bias.shape != (spec.out_channels,):
        raise DimensionError(f"conv2d bias shape {bias.shape} != ({spec.out_channels},)")
    if h + 2 * spec.pad < spec.kernel_h:
        raise DimensionError(f"conv2d input height {h} (pad {spec.pad}) < kernel {spec.kernel_h} (axis 2)")
    if w + 2 * spec.pad < spec.kernel_w:
        raise DimensionError(f"conv2d input width {w} (pad {spec.pad}) < kernel {spec.kernel_w} (axis 3)")


def _pad(x: Tensor, pad: int) -> Tensor:
    if pad == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))


def _im2col(xp: Tensor, spec: ConvSpec, ho: int, wo: int) -> Tensor:
    """Gather patches into (N, groups, Cg*kh*kw, Ho*Wo)."""
    n, c = xp.shape[:2]
    g, kh, kw, s = spec.groups, spec.kernel_h, spec.kernel_w, spec.stride
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::s, ::s][:, :, :ho, :wo]
    win = win.reshape(n, g, c // g, ho, wo, kh, kw).transpose(0, 1, 2, 5, 6, 3, 4)
    return np.ascontiguousarray(win).reshape(n, g, (c // g) * kh * kw, ho * wo)


def conv2d(x: Tensor, weight: Tensor, bias: Tensor, spec: ConvSpec) -> Tensor:
    """Grouped 2-D convolution (cross-correlation), output (N, K, H', W')."""
    _check_conv(x, weight, bias, spec)
    n, c, h, w = x.shape
    g = spec.groups
    ho = conv_output_size(h, spec.kernel_h, spec.stride, spec.pad)
    wo = conv_output_size(w, spec.kernel_w, spec.stride, spec.pad)
    wm = weight.reshape(g, spec.out_channels // g, -1)

    def run(lo, hi):
        cols = _im2col(_pad(x[lo:hi], spec.pad), spec, ho, wo)
        return np.matmul(wm, cols)

    out = np.concatenate(_map_chunks(run, n), axis=0)
    out = out.reshape(n, spec.out_channels, ho, wo)
    out += bias.reshape(1, -1, 1, 1)
    return out


def conv2d_backward(dout: Tensor, x: Tensor, weight: Tensor, spec: ConvSpec):
    """Gradients (dx, dweight, dbias) of a conv2d given upstream ``dout``."""
    n, c, h, w = x.shape
    g, kh, kw, s, p = spec.groups, spec.kernel_h, spec.kernel_w, spec.stride, spec.pad
    k = spec.out_channels
    ho, wo = dout.shape[2:]
    wm = weight.reshape(g, k // g, -1)

    def run(lo, hi):
        m = hi - lo
        cols = _im2col(_pad(x[lo:hi], p), spec, ho, wo)
        d = dout[lo:hi].reshape(m, g, k // g, ho * wo)
        dw = np.matmul(d, cols.transpose(0, 1, 3, 2)).sum(axis=0)
        dcols = np.matmul(wm.transpose(0, 2, 1), d)
        dcols = dcols.reshape(m, c, kh, kw, ho, wo)
        dxp = np.zeros((m, c, h + 2 * p, w + 2 * p), dtype=x.dtype)
        for i in range(kh):
            for j in range(kw):
                dxp[:, :, i:i + s * ho:s, j:j + s * wo:s] += dcols[:, :, i, j]
        return dxp[:, :, p:p + h, p:p + w], dw

    parts = _map_chunks(run, n)
    dx = np.concatenate([dx for dx, _ in parts], axis=0)
    dw = parts[0][1]
    for _, more in parts[1:]:
        dw = dw + more
    db = dout.sum(axis=(0, 2, 3))
    return dx, dw.reshape(weight.shape), db


def conv2d_reference(x: Tensor, weight: Tensor, bias: Tensor, spec: ConvSpec) -> Tensor:
    """Direct-loop convolution; slow, used only to cross-check :func:`conv2d`."""
    _check_conv(x, weight, bias, spec)
    n, c, h, w = x.shape
    g, kh, kw, s = spec.groups, spec.kernel_h, spec.kernel_w, spec.stride
    cg, kg = c // g, spec.out_channels // g
    ho = conv_output_size(h, kh, s, spec.pad)
    wo = conv_output_size(w, kw, s, spec.pad)
    xp = _pad(x, spec.pad).astype(np.float64)
    out = np.zeros((n, spec.out_channels, ho, wo))
    for b in range(n):
        for oc in range(spec.out_channels):
            grp = oc // kg
            for i in range(ho):
                for j in range(wo):
                    patch = xp[b, grp * cg:(grp + 1) * cg, i * s:i * s + kh, j * s:j * s + kw]
                    out[b, oc, i, j] = np.sum(patch * weight[oc]) + bias[oc]
    return out.astype(x.dtype)


# --------------------------------------------------------------------------
# pooling


def maxpool(x: Tensor, spec: PoolSpec):
    """Max pooling without padding.

    Returns the pooled tensor and, for every output cell, the flat index
    (row-major inside the window) of the winning input.  Ties go to the
    smallest index.
    """
    if x.ndim != 4:
        raise DimensionError(f"maxpool input must be 4-D, got shape {x.shape}")
    n, c, h, w = x.shape
    k, s = spec.kernel, spec.stride
    if h < k:
        raise DimensionError(f"maxpool kernel {k} larger than input height {h} (axis 2)")
    if w < k:
        raise DimensionError(f"maxpool kernel {k} larger than input width {w} (axis 3)")
    ho, wo = pool_output_size(h, k, s), pool_output_size(w, k, s)
    win = sliding_window_view(x, (k, k), axis=(2, 3))[:, :, ::s, ::s][:, :, :ho, :wo]
    win = win.reshape(n, c, ho, wo, k * k)
    argmax = np.argmax(win, axis=-1)
    out = np.take_along_axis(win, argmax[..., None], axis=-1)[..., 0]
    return out, argmax


def maxpool_backward(dout: Tensor, argmax: np.ndarray, input_shape, spec: PoolSpec) -> Tensor:
    k, s = spec.kernel, spec.stride
    ho, wo = dout.shape[2:]
    dx = np.zeros(input_shape, dtype=dout.dtype)
    for i in range(k):
        for j in range(k):
            routed = np.where(argmax == i * k + j, dout, 0)
            dx[:, :, i:i + s * ho:s, j:j + s * wo:s] += routed
    return dx


# --------------------------------------------------------------------------
# local response normalization (across channels)


def _channel_window_sum(a: Tensor, n: int) -> Tensor:
    half = n // 2
    padded = np.pad(a, ((0, 0), (half, half), (0, 0), (0, 0)))
    c = a.shape[1]
    total = np.zeros_like(a)
    for off in range(n):
        total += padded[:, off:off + c]
    return total


def lrn(x: Tensor, spec: LrnSpec) -> Tensor:
    """b_c = a_c / (k + alpha/n * sum_{window(c)} a_j^2) ** beta."""
    scale = spec.k + (spec.alpha / spec.n) * _channel_window_sum(x * x, spec.n)
    return x * scale ** -spec.beta


def lrn_backward(dout: Tensor, x: Tensor, spec: LrnSpec) -> Tensor:
    scale = spec.k + (spec.alpha / spec.n) * _channel_window_sum(x * x, spec.n)
    direct = dout * scale ** -spec.beta
    # the window is symmetric, so "c sees i" iff "i sees c"
    cross = _channel_window_sum(dout * x * scale ** (-spec.beta - 1), spec.n)
    return direct - (2.0 * spec.alpha * spec.beta / spec.n) * x * cross


# --------------------------------------------------------------------------
# elementwise / dense


def relu(x: Tensor) -> Tensor:
    return np.maximum(x, 0)


def relu_backward(dout: Tensor, x: Tensor) -> Tensor:
    # gradient at exactly 0 is 0
    return np.where(x > 0, dout, 0).astype(dout.dtype)


def dense(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """out = x @ weight.T + bias, with x flattened to (N, d)."""
    x2 = x.reshape(x.shape[0], -1)
    if weight.ndim != 2 or x2.shape[1] != weight.shape[1]:
        raise DimensionError(
            f"dense input dimension {x2.shape[1]} does not match weight columns "
            f"{weight.shape[1] if weight.ndim == 2 else weight.shape} (axis 1)"
        )
    if bias.shape != (weight.shape[0],):
        raise DimensionError(f"dense bias shape {bias.shape} != ({weight.shape[0]},)")
    return x2 @ weight.T + bias


def dense_backward(dout: Tensor, x: Tensor, weight: Tensor):
    x2 = x.reshape(x.shape[0], -1)
    dx = (dout @ weight).reshape(x.shape)
    return dx, dout.T @ x2, dout.sum(axis=0)


# --------------------------------------------------------------------------
# losses


def softmax(logits: Tensor, axis: int = -1) -> Tensor:
    z = logits - logits.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def _check_labels(labels, m):
    labels = np.asarray(labels)
    if labels.size and (labels.min() < 0 or labels.max() >= m):
        bad = labels[(labels < 0) | (labels >= m)][0]
        raise DimensionError(f"label {bad} out of range [0, {m})")
    return labels.astype(np.int64)


def softmax_cross_entropy(logits: Tensor, labels):
    """Mean negative log-likelihood and the row-stochastic probabilities."""
    n, m = logits.shape
    labels = _check_labels(labels, m)
    z = logits - logits.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1))
    logp = z - logsum[:, None]
    loss = -logp[np.arange(n), labels].mean()
    return float(loss), np.exp(logp)


def softmax_cross_entropy_backward(probs: Tensor, labels) -> Tensor:
    n, m = probs.shape
    labels = _check_labels(labels, m)
    grad = probs.copy()
    grad[np.arange(n), labels] -= 1
    return grad / n


def hinge_loss(scores: Tensor, labels, weights: Tensor | None = None, reg_strength: float = 0.0):
    """Binary hinge loss with an L2 penalty on ``weights``.

    Returns ``(loss, dscores, dweights)``; ``dweights`` holds only the
    penalty gradient (the score gradient has to be chained by the caller).
    The subgradient at the hinge point itself is 0.
    """
    labels = np.asarray(labels)
    if not np.all(np.isin(labels, (-1, 1))):
        bad = labels[~np.isin(labels, (-1, 1))][0]
        raise ValueError(f"hinge labels must be -1 or +1, got {bad}")
    margin = 1 - labels * scores
    active = margin > 0
    loss = float(np.where(active, margin, 0).mean())
    dscores = np.where(active, -labels, 0).astype(scores.dtype) / scores.shape[0]
    dweights = None
    if weights is not None:
        loss += 0.5 * reg_strength * float(np.sum(weights.astype(np.float64) ** 2))
        dweights = reg_strength * weights
    return loss, dscores, dweights
