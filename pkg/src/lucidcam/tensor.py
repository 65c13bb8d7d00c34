"""Dense float32 tensors.

A tensor is a C-contiguous ``numpy.ndarray`` of dtype float32 in row-major
C x H x W order. Reductions accumulate in float64.
"""
from __future__ import annotations

import numpy as np

from .errors import NumericError, ShapeError

DTYPE = np.float32


def tensor_create(shape, fill=0.0) -> np.ndarray:
    """Build a float32 tensor of ``shape`` from a scalar or a flat buffer."""
    shape = tuple(int(s) for s in shape)
    if not shape or any(s < 1 for s in shape):
        raise ShapeError(f"extents must be >= 1, got {shape}")
    if np.isscalar(fill):
        return np.full(shape, fill, dtype=DTYPE)
    buf = np.asarray(fill, dtype=DTYPE).ravel()
    n = int(np.prod(shape))
    if buf.size != n:
        raise ShapeError(f"buffer of length {buf.size} does not fill shape {shape} ({n})")
    return np.ascontiguousarray(buf.reshape(shape))


def check_finite(t: np.ndarray, what: str = "tensor") -> np.ndarray:
    if not np.all(np.isfinite(t)):
        raise NumericError(f"{what} contains non-finite values")
    return t


def _axis_weights(n_in: int, n_out: int):
    # align-corners source coordinates
    if n_in == 1 or n_out == 1:
        pos = np.zeros(n_out, dtype=np.float64)
    else:
        pos = np.arange(n_out, dtype=np.float64) * ((n_in - 1) / (n_out - 1))
    lo = np.minimum(np.floor(pos).astype(np.int64), n_in - 1)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = pos - lo
    return lo, hi, frac


def bilinear_resize(t: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Align-corners bilinear resampling of an H x W map."""
    if t.ndim != 2:
        raise ShapeError(f"bilinear_resize expects H x W, got {t.shape}")
    if out_h < 1 or out_w < 1:
        raise ShapeError(f"output extents must be >= 1, got {(out_h, out_w)}")
    h, w = t.shape
    src = t.astype(np.float64)
    y0, y1, fy = _axis_weights(h, out_h)
    x0, x1, fx = _axis_weights(w, out_w)
    rows = src[y0] * (1.0 - fy)[:, None] + src[y1] * fy[:, None]
    out = rows[:, x0] * (1.0 - fx)[None, :] + rows[:, x1] * fx[None, :]
    return out.astype(DTYPE)


def minmax_normalize(t: np.ndarray) -> np.ndarray:
    """Affinely map ``t`` onto [0, 1]; a constant tensor maps to zeros."""
    src = np.asarray(t, dtype=np.float64)
    lo, hi = src.min(), src.max()
    if not hi > lo:
        return np.zeros(src.shape, dtype=DTYPE)
    out = (src - lo) / (hi - lo)
    return np.clip(out, 0.0, 1.0).astype(DTYPE)
