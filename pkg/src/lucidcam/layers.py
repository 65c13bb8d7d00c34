"""Batched layer primitives with hand-written reverse rules.

Every forward takes an N-leading batch and returns ``(out, cache)``; every
backward takes the upstream gradient and that cache. Functions keep the
dtype of their inputs so the same code runs in float32 for training and in
float64 for gradient checking.
"""
from __future__ import annotations

import numpy as np

from .errors import ArgumentError, ShapeError


def conv_out_extent(n: int, k: int, stride: int, pad: int) -> int:
    span = n + 2 * pad - k
    if span < 0 or span % stride:
        raise ShapeError(f"extent {n} with k={k}, stride={stride}, pad={pad} is not integral")
    return span // stride + 1


def _im2col(xp, k, stride, ho, wo):
    n, c = xp.shape[:2]
    cols = np.empty((n, c, k, k, ho, wo), dtype=xp.dtype)
    for i in range(k):
        for j in range(k):
            cols[:, :, i, j] = xp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride]
    return cols.reshape(n, c * k * k, ho * wo)


def conv2d_forward(x, weight, bias, stride=1, pad=1):
    """Cross-correlation of an N x Cin x H x W batch with Cout x Cin x k x k kernels."""
    if x.ndim != 4 or weight.ndim != 4 or weight.shape[1] != x.shape[1]:
        raise ShapeError(f"conv2d: input {x.shape} incompatible with weight {weight.shape}")
    if weight.shape[2] != weight.shape[3] or bias.shape != (weight.shape[0],):
        raise ShapeError(f"conv2d: bad weight {weight.shape} / bias {bias.shape}")
    n, c, h, w = x.shape
    cout, k = weight.shape[0], weight.shape[2]
    ho, wo = conv_out_extent(h, k, stride, pad), conv_out_extent(w, k, stride, pad)
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    cols = _im2col(xp, k, stride, ho, wo)
    out = np.matmul(weight.reshape(cout, -1), cols)
    out += bias[None, :, None]
    return out.reshape(n, cout, ho, wo), (x.shape, cols, weight, stride, pad)


def conv2d_backward(dout, cache, need_input=True):
    """Returns (dx or None, dweight, dbias)."""
    x_shape, cols, weight, stride, pad = cache
    n, c, h, w = x_shape
    cout, _, k, _ = weight.shape
    ho, wo = dout.shape[2:]
    dy = dout.reshape(n, cout, ho * wo)
    db = dy.sum(axis=(0, 2), dtype=np.float64).astype(dout.dtype)
    dw = np.matmul(dy, cols.transpose(0, 2, 1)).sum(axis=0, dtype=np.float64)
    dw = dw.astype(dout.dtype).reshape(weight.shape)
    if not need_input:
        return None, dw, db
    dcols = np.matmul(weight.reshape(cout, -1).T, dy).reshape(n, c, k, k, ho, wo)
    dxp = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=dout.dtype)
    for i in range(k):
        for j in range(k):
            dxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += dcols[:, :, i, j]
    dx = dxp[:, :, pad:pad + h, pad:pad + w] if pad else dxp
    return np.ascontiguousarray(dx), dw, db


def max_pool2d_forward(x, k=2, stride=2):
    """Non-overlapping max pooling; ties resolve to the first row-major cell."""
    if k != stride:
        raise ArgumentError(f"max_pool2d supports k == stride only, got k={k}, stride={stride}")
    n, c, h, w = x.shape
    if h % k or w % k:
        raise ShapeError(f"max_pool2d: extents {(h, w)} not divisible by {k}")
    ho, wo = h // k, w // k
    win = x.reshape(n, c, ho, k, wo, k).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho, wo, k * k)
    idx = win.argmax(axis=-1)
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]
    return out, (x.shape, idx, k)


def max_pool2d_backward(dout, cache):
    x_shape, idx, k = cache
    n, c, h, w = x_shape
    ho, wo = h // k, w // k
    dwin = np.zeros((n, c, ho, wo, k * k), dtype=dout.dtype)
    np.put_along_axis(dwin, idx[..., None], dout[..., None], axis=-1)
    dx = dwin.reshape(n, c, ho, wo, k, k).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w)
    return np.ascontiguousarray(dx)


def relu_forward(x):
    mask = x > 0
    return np.where(mask, x, 0).astype(x.dtype), mask


def relu_backward(dout, mask):
    return np.where(mask, dout, 0).astype(dout.dtype)


def global_avg_pool_forward(x):
    out = x.mean(axis=(2, 3), dtype=np.float64).astype(x.dtype)
    return out, x.shape


def global_avg_pool_backward(dout, x_shape):
    h, w = x_shape[2:]
    scale = np.asarray(1.0 / (h * w), dtype=dout.dtype)
    return np.ascontiguousarray(np.broadcast_to((dout * scale)[:, :, None, None], x_shape))


def dense_forward(x, weight, bias):
    if x.ndim != 2 or weight.ndim != 2 or weight.shape[1] != x.shape[1] or bias.shape != (weight.shape[0],):
        raise ShapeError(f"dense: input {x.shape} incompatible with weight {weight.shape} / bias {bias.shape}")
    return x @ weight.T + bias, (x, weight)


def dense_backward(dout, cache, need_input=True):
    x, weight = cache
    dw = (dout.T @ x).astype(dout.dtype)
    db = dout.sum(axis=0, dtype=np.float64).astype(dout.dtype)
    dx = dout @ weight if need_input else None
    return dx, dw, db


def flatten_forward(x):
    return x.reshape(x.shape[0], -1), x.shape


def flatten_backward(dout, x_shape):
    return dout.reshape(x_shape)


def softmax(logits):
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_cross_entropy(logits, labels):
    """Mean cross-entropy over a batch and its gradient w.r.t. the logits.

    ``logits`` is N x C (or a single length-C vector with a scalar label).
    Returns ``(loss, dlogits)`` with loss as a Python float.
    """
    single = np.ndim(logits) == 1
    z = np.atleast_2d(np.asarray(logits, dtype=np.float64))
    y = np.atleast_1d(np.asarray(labels))
    if y.shape[0] != z.shape[0]:
        raise ShapeError(f"{z.shape[0]} logit rows but {y.shape[0]} labels")
    if np.any((y < 0) | (y >= z.shape[1])) or not np.all(y == np.round(y)):
        raise ArgumentError(f"labels must be class indices in [0, {z.shape[1]}), got {y}")
    y = y.astype(np.int64)
    shifted = z - z.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(z.shape[0])
    losses = log_z - shifted[rows, y]
    grad = np.exp(shifted - log_z[:, None])
    grad[rows, y] -= 1.0
    grad /= z.shape[0]
    dtype = np.asarray(logits).dtype if np.asarray(logits).dtype.kind == "f" else np.float64
    grad = grad.astype(dtype)
    if single:
        grad = grad[0]
    return float(losses.mean()), grad


def per_sample_cross_entropy(logits, labels) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    shifted = z - z.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1))
    return log_z - shifted[np.arange(z.shape[0]), np.asarray(labels, dtype=np.int64)]
