# polarseg/core/functional.py
"""
Differentiable operations used by EAFNet. Each op computes its forward value on
numpy arrays and returns a closure producing one gradient per input.
Images are laid out N x C x H x W.
"""
from typing import Iterable, Optional, Sequence, Tuple, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from config import logger
from core.errors import InputValidationError, ShapeMismatchError
from core.tensor import Tensor
from utils.resample import adaptive_pool_matrix, bilinear_matrix

ArrayLike = Union[Tensor, np.ndarray, float]


def as_tensor(value: ArrayLike, like: Optional[Tensor] = None) -> Tensor:
    if isinstance(value, Tensor):
        return value
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(value, dtype=dtype))


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _require_ndim(x: Tensor, ndim: int, op: str) -> None:
    if x.ndim != ndim:
        raise ShapeMismatchError(f"{op} expects a rank-{ndim} tensor, got shape {x.shape}",
                                 details={"op": op, "shape": list(x.shape)})


# --- elementwise -------------------------------------------------------------

def add(a: ArrayLike, b: ArrayLike) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, like=a)
    try:
        out = a.data + b.data
    except ValueError as e:
        raise ShapeMismatchError(f"add: incompatible shapes {a.shape} and {b.shape}",
                                 details={"lhs": list(a.shape), "rhs": list(b.shape)}) from e

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)
    return Tensor.from_op(out, (a, b), backward, "add")


def mul(a: ArrayLike, b: ArrayLike) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, like=a)
    try:
        out = a.data * b.data
    except ValueError as e:
        raise ShapeMismatchError(f"mul: incompatible shapes {a.shape} and {b.shape}",
                                 details={"lhs": list(a.shape), "rhs": list(b.shape)}) from e

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)
    return Tensor.from_op(out, (a, b), backward, "mul")


def sum(x: Tensor) -> Tensor:
    def backward(g):
        return (np.full_like(x.data, g),)
    return Tensor.from_op(np.asarray(x.data.sum(), dtype=x.dtype), (x,), backward, "sum")


def mean(x: Tensor) -> Tensor:
    count = x.size

    def backward(g):
        return (np.full_like(x.data, g / count),)
    return Tensor.from_op(np.asarray(x.data.mean(), dtype=x.dtype), (x,), backward, "mean")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0

    def backward(g):
        return (g * mask,)
    # NaN passes through
    return Tensor.from_op(np.maximum(x.data, 0).astype(x.dtype), (x,), backward, "relu")


def sigmoid(x: Tensor) -> Tensor:
    # tanh form: exact 0.5 at zero, no overflow for large |x|
    out = (0.5 * (1.0 + np.tanh(0.5 * x.data))).astype(x.dtype)

    def backward(g):
        return (g * out * (1.0 - out),)
    return Tensor.from_op(out, (x,), backward, "sigmoid")


def channel_scale(x: Tensor, d: Tensor) -> Tensor:
    """E[n,k,i,j] = x[n,k,i,j] * d[n,k]."""
    _require_ndim(x, 4, "channel_scale")
    if d.shape != x.shape[:2]:
        raise ShapeMismatchError(f"channel_scale: weights {d.shape} do not match feature map {x.shape}",
                                 details={"x": list(x.shape), "d": list(d.shape)})
    weights = d.data[:, :, None, None]

    def backward(g):
        return g * weights, (g * x.data).sum(axis=(2, 3))
    return Tensor.from_op(x.data * weights, (x, d), backward, "channel_scale")


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    tensors = list(tensors)
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as e:
        raise ShapeMismatchError("concat: shapes disagree off the concatenation axis",
                                 details={"shapes": [list(t.shape) for t in tensors]}) from e
    splits = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))
    return Tensor.from_op(out, tensors, backward, "concat")


# --- convolutions ------------------------------------------------------------

def conv2d(x: Tensor, w: Tensor, b: Optional[Tensor] = None, stride: int = 1, pad: Optional[int] = None) -> Tensor:
    """Cross-correlation of x (N,C,H,W) with kernels w (O,C,k,k). pad defaults to k//2."""
    _require_ndim(x, 4, "conv2d")
    _require_ndim(w, 4, "conv2d")
    n, c, h, wd = x.shape
    o, wc, kh, kw = w.shape
    if wc != c or kh != kw:
        raise ShapeMismatchError(f"conv2d: input {x.shape} incompatible with kernels {w.shape}",
                                 details={"x": list(x.shape), "w": list(w.shape)})
    if b is not None and b.shape != (o,):
        raise ShapeMismatchError(f"conv2d: bias {b.shape} does not match {o} output channels",
                                 details={"b": list(b.shape), "out_channels": o})
    k = kh
    p = k // 2 if pad is None else pad
    ho = (h + 2 * p - k) // stride + 1
    wo = (wd + 2 * p - k) // stride + 1
    if ho < 1 or wo < 1:
        raise ShapeMismatchError(f"conv2d: input {x.shape} too small for kernel {k} with pad {p}",
                                 details={"x": list(x.shape), "k": k})

    xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p)))
    windows = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    cols = windows.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * k * k)
    wmat = w.data.reshape(o, c * k * k)
    out = (cols @ wmat.T).reshape(n, ho, wo, o).transpose(0, 3, 1, 2)
    if b is not None:
        out = out + b.data[None, :, None, None]
    out = np.ascontiguousarray(out)

    def backward(g):
        gmat = g.transpose(0, 2, 3, 1).reshape(n * ho * wo, o)
        gw = (gmat.T @ cols).reshape(w.shape)
        gcols = (gmat @ wmat).reshape(n, ho, wo, c, k, k)
        gxp = np.zeros_like(xp)
        for i in range(k):
            for j in range(k):
                gxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += \
                    gcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        gx = gxp[:, :, p:p + h, p:p + wd]
        grads = [gx, gw]
        if b is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return grads

    parents = (x, w) if b is None else (x, w, b)
    return Tensor.from_op(out, parents, backward, "conv2d")


def conv1d_channels(v: Tensor, kernel: Tensor) -> Tensor:
    """
    1-D cross-correlation along the channel axis of v (N,C) or (C,), output length C.
    Zero padding is left floor((K-1)/2), right ceil((K-1)/2).
    """
    if kernel.ndim != 1 or kernel.size < 1:
        raise ShapeMismatchError(f"conv1d_channels: kernel must be a non-empty vector, got {kernel.shape}",
                                 details={"kernel": list(kernel.shape)})
    squeeze = v.ndim == 1
    vd = v.data[None, :] if squeeze else v.data
    if vd.ndim != 2:
        raise ShapeMismatchError(f"conv1d_channels expects (N,C) or (C,), got {v.shape}",
                                 details={"v": list(v.shape)})
    k = kernel.size
    left = (k - 1) // 2
    right = k - 1 - left
    c = vd.shape[1]
    vp = np.pad(vd, ((0, 0), (left, right)))
    windows = sliding_window_view(vp, k, axis=1)
    out = windows @ kernel.data
    if squeeze:
        out = out[0]

    def backward(g):
        g2 = g[None, :] if squeeze else g
        gk = np.einsum("nck,nc->k", windows, g2)
        gvp = np.zeros_like(vp)
        for j in range(k):
            gvp[:, j:j + c] += g2 * kernel.data[j]
        gv = gvp[:, left:left + c]
        return (gv[0] if squeeze else gv), gk
    return Tensor.from_op(out, (v, kernel), backward, "conv1d_channels")


# --- pooling and resampling --------------------------------------------------

def global_avg_pool(x: Tensor) -> Tensor:
    """B_k = mean over H x W of channel k; returns (N, C)."""
    _require_ndim(x, 4, "global_avg_pool")
    h, w = x.shape[2:]

    def backward(g):
        return (np.broadcast_to(g[:, :, None, None] / (h * w), x.shape).copy(),)
    return Tensor.from_op(x.data.mean(axis=(2, 3)), (x,), backward, "global_avg_pool")


def max_pool2d(x: Tensor, size: int = 2) -> Tensor:
    """Non-overlapping max pooling; ties go to the first element in row-major order."""
    _require_ndim(x, 4, "max_pool2d")
    n, c, h, w = x.shape
    if h < size or w < size:
        raise ShapeMismatchError(f"max_pool2d: spatial dims {h}x{w} smaller than pool size {size}",
                                 details={"x": list(x.shape), "size": size})
    ho, wo = h // size, w // size
    blocks = (x.data[:, :, :ho * size, :wo * size]
              .reshape(n, c, ho, size, wo, size)
              .transpose(0, 1, 2, 4, 3, 5)
              .reshape(n, c, ho, wo, size * size))
    index = blocks.argmax(axis=-1)[..., None]
    out = np.take_along_axis(blocks, index, axis=-1)[..., 0]

    def backward(g):
        gblocks = np.zeros_like(blocks)
        np.put_along_axis(gblocks, index, g[..., None], axis=-1)
        gx = np.zeros_like(x.data)
        gx[:, :, :ho * size, :wo * size] = (gblocks.reshape(n, c, ho, wo, size, size)
                                           .transpose(0, 1, 2, 4, 3, 5)
                                           .reshape(n, c, ho * size, wo * size))
        return (gx,)
    return Tensor.from_op(out, (x,), backward, "max_pool2d")


def _separable(x: Tensor, rows: np.ndarray, cols: np.ndarray, op: str) -> Tensor:
    rows = rows.astype(x.dtype)
    cols = cols.astype(x.dtype)
    out = rows @ x.data @ cols.T

    def backward(g):
        return (rows.T @ g @ cols,)
    return Tensor.from_op(out, (x,), backward, op)


def avg_pool_grid(x: Tensor, grid: int) -> Tensor:
    """Adaptive average pooling to a grid x grid output."""
    _require_ndim(x, 4, "avg_pool_grid")
    if grid < 1:
        raise InputValidationError(f"avg_pool_grid: grid must be >= 1, got {grid}")
    h, w = x.shape[2:]
    return _separable(x, adaptive_pool_matrix(h, grid), adaptive_pool_matrix(w, grid), "avg_pool_grid")


def resize_bilinear(x: Tensor, height: int, width: int) -> Tensor:
    _require_ndim(x, 4, "resize_bilinear")
    h, w = x.shape[2:]
    return _separable(x, bilinear_matrix(h, height), bilinear_matrix(w, width), "resize_bilinear")


def bilinear_upsample(x: Tensor, factor: int = 2) -> Tensor:
    return resize_bilinear(x, x.shape[2] * factor, x.shape[3] * factor)


# --- normalization -----------------------------------------------------------

def batchnorm2d(x: Tensor, gamma: Tensor, beta: Tensor,
                running_mean: np.ndarray, running_var: np.ndarray,
                mode: str = "train", momentum: float = 0.1, eps: float = 1e-5) -> Tensor:
    """
    Per-channel normalization. mode: "train" (batch statistics, updates running stats
    in place), "eval" (running statistics) or "affine" (gamma * x + beta only, running
    stats untouched; the batch-1 fallback).
    """
    _require_ndim(x, 4, "batchnorm2d")
    n, c, h, w = x.shape
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeMismatchError(f"batchnorm2d: affine params do not match {c} channels",
                                 details={"gamma": list(gamma.shape), "beta": list(beta.shape)})
    g_ = gamma.data[None, :, None, None]
    b_ = beta.data[None, :, None, None]

    if mode == "affine":
        def affine_backward(g):
            return g * g_, (g * x.data).sum(axis=(0, 2, 3)), g.sum(axis=(0, 2, 3))
        return Tensor.from_op((x.data * g_ + b_).astype(x.dtype), (x, gamma, beta), affine_backward, "batchnorm2d")

    if mode == "train":
        if n < 2:
            raise InputValidationError("batchnorm2d: training mode needs a batch of at least 2",
                                       details={"batch": n})
        count = n * h * w
        mu = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))
        running_mean *= (1.0 - momentum)
        running_mean += momentum * mu
        running_var *= (1.0 - momentum)
        running_var += momentum * var * (count / (count - 1))
    elif mode == "eval":
        mu, var = running_mean, running_var
    else:
        raise InputValidationError(f"batchnorm2d: unknown mode '{mode}'")

    inv_std = (1.0 / np.sqrt(var + eps)).astype(x.dtype)[None, :, None, None]
    xhat = (x.data - mu.astype(x.dtype)[None, :, None, None]) * inv_std
    out = xhat * g_ + b_

    def backward(g):
        ggamma = (g * xhat).sum(axis=(0, 2, 3))
        gbeta = g.sum(axis=(0, 2, 3))
        gxhat = g * g_
        if mode == "eval":
            return gxhat * inv_std, ggamma, gbeta
        m = n * h * w
        gx = (inv_std / m) * (m * gxhat
                              - gxhat.sum(axis=(0, 2, 3), keepdims=True)
                              - xhat * (gxhat * xhat).sum(axis=(0, 2, 3), keepdims=True))
        return gx, ggamma, gbeta
    return Tensor.from_op(out, (x, gamma, beta), backward, "batchnorm2d")


# --- loss --------------------------------------------------------------------

def softmax_cross_entropy(logits: Tensor, labels: np.ndarray, ignore_ids: Iterable[int] = ()) -> Tensor:
    """Mean of -log softmax at the true class over non-ignored pixels of an (N,K,H,W) map."""
    _require_ndim(logits, 4, "softmax_cross_entropy")
    n, k, h, w = logits.shape
    labels = np.asarray(labels)
    if labels.shape != (n, h, w):
        raise ShapeMismatchError(f"softmax_cross_entropy: labels {labels.shape} do not match logits {logits.shape}",
                                 details={"labels": list(labels.shape), "logits": list(logits.shape)})
    ignore = sorted(set(int(i) for i in ignore_ids))
    valid = ~np.isin(labels, ignore) if ignore else np.ones(labels.shape, dtype=bool)
    if np.any(valid & ((labels < 0) | (labels >= k))):
        raise InputValidationError(f"softmax_cross_entropy: label ids outside [0, {k}) and not ignored",
                                   details={"min": int(labels.min()), "max": int(labels.max())})
    count = int(valid.sum())
    if count == 0:
        logger.warning("softmax_cross_entropy: every pixel is ignored; loss is 0")

        def backward_empty(g):
            return (np.zeros_like(logits.data),)
        return Tensor.from_op(np.zeros((), dtype=logits.dtype), (logits,), backward_empty, "softmax_cross_entropy")

    z = logits.data
    shifted = z - z.max(axis=1, keepdims=True)
    log_prob = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    safe = np.where(valid, labels, 0).astype(np.int64)
    picked = np.take_along_axis(log_prob, safe[:, None], axis=1)[:, 0]
    loss = np.asarray(-(picked * valid).sum() / count, dtype=logits.dtype)

    def backward(g):
        grad = np.exp(log_prob)
        np.put_along_axis(grad, safe[:, None], np.take_along_axis(grad, safe[:, None], axis=1) - 1.0, axis=1)
        return (grad * valid[:, None] * (g / count),)
    return Tensor.from_op(loss, (logits,), backward, "softmax_cross_entropy")
