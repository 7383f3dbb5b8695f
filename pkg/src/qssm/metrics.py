"""Restoration quality metrics (PSNR/SSIM on the BT.601 luminance channel)
and model complexity accounting with bit-scaled effective counts.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import correlate1d

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


@dataclass
class QualityReport:
    psnr_db: float  # math.inf when images are identical
    ssim: float
    crop_border: int


@dataclass
class ComplexityReport:
    """Effective counts treat an n-bit quantity as n/32 of a full-precision
    one; ratios are reductions against the full-precision census."""

    params_full: float
    params_effective: float
    ops_full: float
    ops_effective: float

    @property
    def params_reduction(self) -> float:
        return 1.0 - self.params_effective / self.params_full

    @property
    def ops_reduction(self) -> float:
        return 1.0 - self.ops_effective / self.ops_full


def rgb_to_y(img: np.ndarray) -> np.ndarray:
    """Studio-swing BT.601 luminance of a (3,H,W) image in [0,1]."""
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 3 or img.shape[0] != 3:
        raise ValueError("expected a (3,H,W) image")
    if img.min() < -1e-12 or img.max() > 1.0 + 1e-12:
        raise ValueError("image values must lie in [0, 1]")
    r, g, b = img[0], img[1], img[2]
    return (16.0 + 65.481 * r + 128.553 * g + 24.966 * b) / 255.0


def _crop(a: np.ndarray, border: int) -> np.ndarray:
    if border == 0:
        return a
    if min(a.shape[-2:]) <= 2 * border:
        raise ValueError("crop border leaves no pixels")
    return a[..., border:-border, border:-border]


def psnr(a: np.ndarray, b: np.ndarray, crop_border: int = 0) -> float:
    """10*log10(1/MSE) on the [0,1] range; +inf for identical inputs."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    a, b = _crop(a, crop_border), _crop(b, crop_border)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(1.0 / mse)


def _gaussian_taps(n: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    x = np.arange(n) - (n - 1) / 2.0
    g = np.exp(-(x**2) / (2.0 * sigma**2))
    return g / g.sum()


def _filter_valid(img: np.ndarray, taps: np.ndarray) -> np.ndarray:
    half = len(taps) // 2
    out = correlate1d(img, taps, axis=0, mode="constant")
    out = correlate1d(out, taps, axis=1, mode="constant")
    return out[half:-half, half:-half]


def ssim(a: np.ndarray, b: np.ndarray, crop_border: int = 0) -> float:
    """Mean local SSIM, 11x11 Gaussian window (sigma 1.5), dynamic range 1."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    if a.ndim != 2:
        raise ValueError("ssim expects single-channel images")
    a, b = _crop(a, crop_border), _crop(b, crop_border)
    if min(a.shape) < SSIM_WINDOW:
        raise ValueError("image too small for the SSIM window after cropping")
    taps = _gaussian_taps()
    c1, c2 = SSIM_K1**2, SSIM_K2**2
    mu_a = _filter_valid(a, taps)
    mu_b = _filter_valid(b, taps)
    var_a = _filter_valid(a * a, taps) - mu_a**2
    var_b = _filter_valid(b * b, taps) - mu_b**2
    cov = _filter_valid(a * b, taps) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


def quality_report(pred: np.ndarray, gt: np.ndarray, crop_border: int) -> QualityReport:
    ya, yb = rgb_to_y(pred), rgb_to_y(gt)
    return QualityReport(
        psnr_db=psnr(ya, yb, crop_border), ssim=ssim(ya, yb, crop_border), crop_border=crop_border
    )


# -- complexity accounting ---------------------------------------------------------

def _scan_macs(length: int, channels: int, state: int) -> int:
    # per direction, per step and channel: state decay (N), input injection
    # (N), readout (N), skip (1)
    return length * channels * (3 * state + 1)


def count_complexity(net, input_shape: tuple[int, int, int], bits=None) -> ComplexityReport:
    """Census of parameters and multiply-accumulates for one forward pass.

    Body weights/ops scale by w_bits/32 and max(w_bits, a_bits)/32
    respectively when quantized; biases, norms and the shallow/head layers
    always count at full precision.
    """
    cfg = net.cfg
    _, h, w = input_shape
    c, n, s = cfg.channels, cfg.state_size, cfg.scale
    length = h * w
    r = net.body[0].ss2d.dt_rank

    if bits is None:
        bits = cfg.bits
    w_bits, a_bits = bits if bits is not None else (32, 32)
    w_scale = w_bits / 32.0
    op_scale = max(w_bits, a_bits) / 32.0

    params_full = params_eff = 0.0
    ops_full = ops_eff = 0.0

    def layer(weights: float, biases: float, macs: float, quantized: bool):
        nonlocal params_full, params_eff, ops_full, ops_eff
        params_full += weights + biases
        ops_full += macs
        params_eff += weights * (w_scale if quantized else 1.0) + biases
        ops_eff += macs * (op_scale if quantized else 1.0)

    # shallow and head are never quantized
    layer(3 * c * 9, c, 3 * c * 9 * length, False)
    head_out = 3 * s * s if s > 1 else 3
    layer(c * head_out * 9, head_out, c * head_out * 9 * length, False)

    for _ in range(cfg.blocks):
        layer(0, 2 * c * 2, 0, False)  # two block norms
        # ss2d
        layer(c * 2 * c, 0, length * c * 2 * c, True)  # in_proj
        layer(4 * c * (r + 2 * n), 0, 4 * length * c * (r + 2 * n), True)  # x_proj
        layer(4 * r * c, 4 * c, 4 * length * r * c, True)  # dt_proj
        layer(0, 4 * c * n + 4 * c, 4 * _scan_macs(length, c, n), True)  # A_log, skip; scan ops
        layer(c * c, 0, length * c * c, True)  # out_proj
        layer(0, 2 * c, 0, False)  # scan norm
        # cab
        layer(c * c * 9, 0, c * c * 9 * length, True)
        layer(c * c * 9, 0, c * c * 9 * length, True)
        layer(c * (c // cfg.reduction) * 2, 0, c * (c // cfg.reduction) * 2, True)
        layer(0, 2, 0, False)  # residual scales
    layer(c * c * 9, c, c * c * 9 * length, True)  # body-end conv

    if bits is None or (w_bits == 32 and a_bits == 32):
        params_eff, ops_eff = params_full, ops_full
    return ComplexityReport(params_full, params_eff, ops_full, ops_eff)
