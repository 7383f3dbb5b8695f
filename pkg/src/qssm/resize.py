"""Catmull-Rom bicubic resampling with an anti-alias prefilter on downscale.

Separable: each axis is resampled by a dense (out, in) weight matrix built
from the cubic kernel under the half-pixel coordinate convention. Matrices
are cached per (in_size, out_size).
"""

from __future__ import annotations

import numpy as np

_A = -0.5  # Catmull-Rom


def _cubic(x: np.ndarray) -> np.ndarray:
    x = np.abs(x)
    x2, x3 = x * x, x * x * x
    return np.where(
        x <= 1.0,
        (_A + 2.0) * x3 - (_A + 3.0) * x2 + 1.0,
        np.where(x < 2.0, _A * x3 - 5.0 * _A * x2 + 8.0 * _A * x - 4.0 * _A, 0.0),
    )


_weight_cache: dict[tuple[int, int], np.ndarray] = {}


def _axis_weights(in_size: int, out_size: int) -> np.ndarray:
    key = (in_size, out_size)
    cached = _weight_cache.get(key)
    if cached is not None:
        return cached
    scale = in_size / out_size
    support_scale = max(scale, 1.0)  # widen the kernel when downscaling
    centers = (np.arange(out_size) + 0.5) * scale - 0.5
    radius = 2.0 * support_scale
    lo = np.floor(centers - radius).astype(int)
    taps = int(np.ceil(2 * radius)) + 2
    idx = lo[:, None] + np.arange(taps)[None, :]
    w = _cubic((centers[:, None] - idx) / support_scale)
    w /= w.sum(axis=1, keepdims=True)
    idx = np.clip(idx, 0, in_size - 1)  # replicate edges
    mat = np.zeros((out_size, in_size))
    np.add.at(mat, (np.repeat(np.arange(out_size), taps), idx.reshape(-1)), w.reshape(-1))
    _weight_cache[key] = mat
    return mat


def bicubic_resize(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Resize the trailing two axes of (..., H, W) to (out_h, out_w)."""
    img = np.asarray(img, dtype=np.float64)
    h, w = img.shape[-2:]
    wh = _axis_weights(h, out_h)
    ww = _axis_weights(w, out_w)
    out = np.einsum("oh,...hw->...ow", wh, img)
    return np.einsum("pw,...ow->...op", ww, out)


def bicubic_down(img: np.ndarray, factor: int) -> np.ndarray:
    h, w = img.shape[-2:]
    if h % factor or w % factor:
        raise ValueError("image extents must be divisible by the downscale factor")
    return bicubic_resize(img, h // factor, w // factor)


def bicubic_up(img: np.ndarray, factor: int) -> np.ndarray:
    h, w = img.shape[-2:]
    return bicubic_resize(img, h * factor, w * factor)
