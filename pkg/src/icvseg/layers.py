"""Layer-level numerics: forward passes and hand-derived backward passes.

Everything operates on plain numpy arrays and preserves the input dtype, so
the same code runs in float32 for training and in float64 when gradients are
verified against finite differences. Forward functions return
``(output, cache)``; the cache feeds the matching backward function.

Convolutions use valid (no) padding and are implemented as im2col followed
by one matrix multiply. Dropout is inverted (survivors scaled at train time)
so that inference is the identity.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import NumericError, ShapeError, StateError

__all__ = [
    "ConvParams",
    "DenseParams",
    "BatchNormParams",
    "conv2d_output_size",
    "conv2d_forward",
    "conv2d_backward",
    "batch_norm_forward",
    "batch_norm_backward",
    "dropout",
    "dropout_backward",
    "dense_forward",
    "dense_backward",
    "relu",
    "relu_backward",
    "softmax_rows",
    "cross_entropy",
    "softmax_cross_entropy",
    "one_hot",
]


@dataclass
class ConvParams:
    """Convolution kernels ``[out_ch, in_ch, k, k]`` and bias ``[out_ch]``."""

    weights: np.ndarray
    bias: np.ndarray


@dataclass
class DenseParams:
    """Affine map weights ``[out_dim, in_dim]`` and bias ``[out_dim]``."""

    weights: np.ndarray
    bias: np.ndarray


@dataclass
class BatchNormParams:
    """Per-channel scale/shift plus running statistics.

    ``updates`` counts train-mode statistic updates; inference before the
    first update is rejected unless the statistics came from a checkpoint
    (``loaded`` is then set by the loader).
    """

    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    updates: int = 0
    loaded: bool = field(default=False, repr=False)


def conv2d_output_size(extent: int, kernel: int, stride: int) -> int:
    """Spatial output extent of a valid convolution."""
    return (extent - kernel) // stride + 1


def _im2col(x: np.ndarray, kernel: int, stride: int) -> np.ndarray:
    """[N,C,H,W] -> [N, oh, ow, C*k*k] patch matrix (row-major windows)."""
    win = np.lib.stride_tricks.sliding_window_view(x, (kernel, kernel), axis=(2, 3))
    win = win[:, :, ::stride, ::stride]
    n, c, oh, ow = win.shape[:4]
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5))
    return cols.reshape(n, oh, ow, c * kernel * kernel)


@dataclass
class _Conv2dCache:
    x: np.ndarray
    params: ConvParams
    stride: int
    squeezed: bool


def conv2d_forward(x, params: ConvParams, stride: int = 1):
    """Valid cross-correlation of ``x`` with the kernels, plus bias.

    ``x`` is ``[C,H,W]`` or ``[N,C,H,W]``; the output keeps the same number
    of dimensions. Output extent per axis is ``(extent - k) // stride + 1``.
    """
    w, b = params.weights, params.bias
    if w.ndim != 4 or w.shape[2] != w.shape[3]:
        raise ShapeError(f"conv kernels must be [out,in,k,k] with square k, got {w.shape}")
    if stride < 1:
        raise ShapeError(f"stride must be >= 1, got {stride}")
    squeezed = x.ndim == 3
    xb = x[None] if squeezed else x
    if xb.ndim != 4:
        raise ShapeError(f"conv input must be [C,H,W] or [N,C,H,W], got shape {x.shape}")
    n, c, h, wd = xb.shape
    co, ci, k, _ = w.shape
    if ci != c:
        raise ShapeError(
            f"input channel mismatch: input shape {tuple(xb.shape)} has {c} channels, "
            f"kernels {tuple(w.shape)} expect {ci}"
        )
    if h < k or wd < k:
        raise ShapeError(f"input {h}x{wd} smaller than kernel {k}x{k}")
    cols = _im2col(xb, k, stride)
    oh, ow = cols.shape[1], cols.shape[2]
    y = cols.reshape(n * oh * ow, -1) @ w.reshape(co, -1).T
    y = y.reshape(n, oh, ow, co).transpose(0, 3, 1, 2) + b[None, :, None, None]
    cache = _Conv2dCache(x=xb, params=params, stride=stride, squeezed=squeezed)
    return (y[0] if squeezed else y), cache


def conv2d_backward(grad_out, cache: Optional[_Conv2dCache]):
    """Gradients of a conv2d output w.r.t. input, weights, and bias."""
    if cache is None:
        raise StateError("conv2d_backward requires the cache from conv2d_forward")
    x, w, stride = cache.x, cache.params.weights, cache.stride
    if cache.squeezed:
        grad_out = grad_out[None]
    n, c, h, wd = x.shape
    co, _, k, _ = w.shape
    oh = conv2d_output_size(h, k, stride)
    ow = conv2d_output_size(wd, k, stride)
    if grad_out.shape != (n, co, oh, ow):
        raise ShapeError(
            f"grad_out shape {tuple(grad_out.shape)} does not match forward output "
            f"{(n, co, oh, ow)}"
        )
    g = np.ascontiguousarray(grad_out.transpose(0, 2, 3, 1)).reshape(n * oh * ow, co)
    cols = _im2col(x, k, stride).reshape(n * oh * ow, -1)

    grad_bias = grad_out.sum(axis=(0, 2, 3))
    grad_weights = (g.T @ cols).reshape(co, c, k, k)

    gcols = (g @ w.reshape(co, -1)).reshape(n, oh, ow, c, k, k)
    grad_x = np.zeros_like(x)
    for i in range(k):
        for j in range(k):
            grad_x[:, :, i : i + stride * (oh - 1) + 1 : stride,
                   j : j + stride * (ow - 1) + 1 : stride] += gcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    if cache.squeezed:
        grad_x = grad_x[0]
    return grad_x, grad_weights, grad_bias


@dataclass
class _BatchNormCache:
    xhat: np.ndarray
    inv_std: np.ndarray
    gamma: np.ndarray
    axes: tuple
    m: int


def _channel_shape(x):
    return (1, x.shape[1]) + (1,) * (x.ndim - 2)


def batch_norm_forward(x, params: BatchNormParams, mode: str, momentum: float = 0.1,
                       epsilon: float = 1e-5):
    """Per-channel batch normalization over ``[N,C,...]`` input.

    Train mode normalizes with batch statistics (population variance), then
    updates the running statistics by exponential moving average:
    ``running = (1 - momentum) * running + momentum * batch``. Inference
    normalizes with the running statistics and never mutates them.
    """
    if mode not in ("train", "infer"):
        raise StateError(f"unknown batch norm mode {mode!r}")
    if x.ndim < 2:
        raise ShapeError(f"batch norm input must be [N,C,...], got shape {x.shape}")
    c = x.shape[1]
    if params.gamma.shape != (c,):
        raise ShapeError(f"gamma shape {params.gamma.shape} does not match {c} channels")
    axes = (0,) + tuple(range(2, x.ndim))
    m = x.size // c
    shape = _channel_shape(x)

    if mode == "train":
        if m < 2:
            raise ShapeError(f"train-mode batch norm needs >= 2 values per channel, got {m}")
        mean = x.mean(axis=axes)
        var = x.var(axis=axes)
        rdt = params.running_mean.dtype
        params.running_mean = ((1.0 - momentum) * params.running_mean
                               + momentum * mean).astype(rdt, copy=False)
        params.running_var = ((1.0 - momentum) * params.running_var
                              + momentum * var).astype(rdt, copy=False)
        params.updates += 1
    else:
        if params.updates == 0 and not params.loaded:
            raise StateError(
                "inference-mode batch norm before any running-statistic update; "
                "train first or load statistics from a checkpoint"
            )
        mean, var = params.running_mean, params.running_var

    inv_std = 1.0 / np.sqrt(var + epsilon)
    xhat = (x - mean.reshape(shape)) * inv_std.reshape(shape)
    y = params.gamma.reshape(shape) * xhat + params.beta.reshape(shape)
    cache = _BatchNormCache(xhat=xhat, inv_std=inv_std, gamma=params.gamma, axes=axes, m=m)
    return y, cache


def batch_norm_backward(grad_out, cache: _BatchNormCache):
    """Gradients for train-mode batch norm: (grad_x, grad_gamma, grad_beta)."""
    if cache is None:
        raise StateError("batch_norm_backward requires the cache from batch_norm_forward")
    xhat, axes, m = cache.xhat, cache.axes, cache.m
    shape = _channel_shape(xhat)
    grad_gamma = (grad_out * xhat).sum(axis=axes)
    grad_beta = grad_out.sum(axis=axes)
    scale = (cache.gamma * cache.inv_std).reshape(shape)
    grad_x = scale * (grad_out
                      - (grad_beta / m).reshape(shape)
                      - xhat * (grad_gamma / m).reshape(shape))
    return grad_x, grad_gamma, grad_beta


def dropout(x, rate: float, mode: str, rng: Optional[np.random.Generator] = None):
    """Inverted dropout. Train mode zeroes elements with probability ``rate``
    and scales survivors by 1/(1-rate); inference returns the input as is.
    """
    if not 0.0 <= rate < 1.0:
        raise StateError(f"dropout rate must be in [0, 1), got {rate}")
    if mode not in ("train", "infer"):
        raise StateError(f"unknown dropout mode {mode!r}")
    if mode == "infer" or rate == 0.0:
        return x, None
    if rng is None:
        raise StateError("train-mode dropout with rate > 0 needs an rng")
    keep = rng.random(x.shape) >= rate
    scale = x.dtype.type(1.0 / (1.0 - rate))
    return x * keep * scale, (keep, scale)


def dropout_backward(grad_out, cache):
    if cache is None:
        return grad_out
    keep, scale = cache
    return grad_out * keep * scale


@dataclass
class _DenseCache:
    x: np.ndarray
    params: DenseParams


def dense_forward(x, params: DenseParams):
    """Affine map ``y = x @ W.T + b`` over rows of ``x`` ``[N, in_dim]``."""
    w, b = params.weights, params.bias
    if x.ndim != 2:
        raise ShapeError(f"dense input must be [N, in_dim], got shape {x.shape}")
    if x.shape[1] != w.shape[1]:
        raise ShapeError(
            f"dense input width {x.shape[1]} does not match weights {tuple(w.shape)}"
        )
    y = x @ w.T + b
    return y, _DenseCache(x=x, params=params)


def dense_backward(grad_out, cache: _DenseCache):
    if cache is None:
        raise StateError("dense_backward requires the cache from dense_forward")
    x, w = cache.x, cache.params.weights
    if grad_out.shape != (x.shape[0], w.shape[0]):
        raise ShapeError(
            f"grad_out shape {tuple(grad_out.shape)} does not match output "
            f"{(x.shape[0], w.shape[0])}"
        )
    grad_x = grad_out @ w
    grad_w = grad_out.T @ x
    grad_b = grad_out.sum(axis=0)
    return grad_x, grad_w, grad_b


def relu(x):
    mask = x > 0
    return x * mask, mask


def relu_backward(grad_out, mask):
    return grad_out * mask


def softmax_rows(x):
    """Row-wise softmax with max subtraction for stability."""
    if x.ndim != 2:
        raise ShapeError(f"softmax input must be [N, K], got shape {x.shape}")
    if not np.all(np.isfinite(x)):
        raise NumericError("softmax input contains non-finite values")
    shifted = x - x.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def _check_one_hot(targets, n, k):
    if targets.shape != (n, k):
        raise ShapeError(f"targets shape {tuple(targets.shape)} does not match ({n}, {k})")
    ok = np.all((targets == 0) | (targets == 1)) and np.all(targets.sum(axis=1) == 1)
    if not ok:
        raise ShapeError("targets must be one-hot rows")


def cross_entropy(probs, targets):
    """Mean negative log-likelihood of the true class, plus gradient w.r.t.
    the probabilities. The log is guarded by epsilon 1e-12."""
    n, k = probs.shape
    _check_one_hot(targets, n, k)
    eps = 1e-12
    loss = float(-(targets * np.log(probs + eps)).sum() / n)
    grad = -(targets / (probs + eps)) / n
    return loss, grad


def softmax_cross_entropy(logits, targets):
    """Fused softmax + cross-entropy: returns (loss, probs, grad_logits).

    The combined gradient w.r.t. the logits is ``(probs - targets) / N``.
    """
    probs = softmax_rows(logits)
    n, k = probs.shape
    _check_one_hot(targets, n, k)
    eps = 1e-12
    loss = float(-(targets * np.log(probs + eps)).sum() / n)
    grad_logits = (probs - targets.astype(probs.dtype)) / n
    return loss, probs, grad_logits


def one_hot(labels, n_classes: int = 2, dtype=np.float32):
    labels = np.asarray(labels)
    if labels.ndim != 1:
        raise ShapeError(f"labels must be 1-D, got shape {labels.shape}")
    if labels.min(initial=0) < 0 or labels.max(initial=0) >= n_classes:
        raise ShapeError(f"labels must lie in [0, {n_classes})")
    out = np.zeros((labels.shape[0], n_classes), dtype=dtype)
    out[np.arange(labels.shape[0]), labels] = 1
    return out
