"""Quantization math: uniform grid quantizer, statistics-driven activation
quantizer (DLS), threshold-floating weight quantizer (RFA) with its soft
backward surrogate, initialization strategies, and bit-packing.

Fake quantization is computed in float64 throughout; the integer grid for
``n`` bits is [-2^(n-1), 2^(n-1)-1].
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .tensor import Tensor

# Values an ulp below an integer are snapped up so that requantizing a
# quantizer's own output reproduces it exactly.
_FLOOR_SNAP = 1e-9

MAGIC_PACKED = b"QSSM"
PACKED_VERSION = 1


def _grid_bounds(n: int) -> tuple[float, float]:
    if n < 2:
        raise ValueError("bit-width must be >= 2")
    return float(-(2 ** (n - 1))), float(2 ** (n - 1) - 1)


def _floor_snap(v: np.ndarray) -> np.ndarray:
    f = np.floor(v)
    frac = v - f
    return np.where(frac > 1.0 - _FLOOR_SNAP, f + 1.0, f)


# -- uniform quantizer (static ranges) ----------------------------------------

@dataclass
class UniformQuantConfig:
    """Static affine quantizer: scale alpha maps reals onto the integer grid,
    shift beta aligns the zero point."""

    bits: int
    alpha: float
    beta: float = 0.0

    def __post_init__(self) -> None:
        if self.bits not in (2, 4, 8):
            raise ValueError(f"bits must be one of 2/4/8, got {self.bits}")
        if self.alpha <= 0:
            raise ValueError("alpha must be positive")


def clip_int(x, n: int):
    """Clamp to the representable n-bit integer range."""
    lo, hi = _grid_bounds(n)
    return np.clip(x, lo, hi)


def quantize_uniform(x: np.ndarray, cfg: UniformQuantConfig) -> np.ndarray:
    """floor(clip((x - beta) * alpha)) / alpha + beta on the n-bit grid."""
    if cfg.alpha <= 0:
        raise ValueError("alpha must be positive")
    x = np.asarray(x, dtype=np.float64)
    v = clip_int((x - cfg.beta) * cfg.alpha, cfg.bits)
    return _floor_snap(v) / cfg.alpha + cfg.beta


class _FloorClipSTE(T.CustomGradNode):
    """floor(clip(v)) with straight-through gradient inside the clip range."""

    name = "floor_clip_ste"

    def __init__(self, bits: int) -> None:
        self.lo, self.hi = _grid_bounds(bits)

    def forward(self, v):
        out = _floor_snap(np.clip(v, self.lo, self.hi))
        mask = (v >= self.lo) & (v <= self.hi)
        return out, mask

    def backward(self, grad_out, mask, arrays):
        return (grad_out * mask,)


def quantize_uniform_ste(x: Tensor, cfg: UniformQuantConfig) -> Tensor:
    """Taped fake quantization with a fixed range; gradient is straight-through
    for unclipped elements and zero for clipped ones."""
    v = (x - cfg.beta) * cfg.alpha
    q = T.register_custom_grad(_FloorClipSTE(cfg.bits), [v])
    return q / cfg.alpha + cfg.beta


def minmax_config(sample: np.ndarray, n: int) -> UniformQuantConfig:
    """Static config spanning the sample's full [min, max] range."""
    mn, mx = float(sample.min()), float(sample.max())
    if mx <= mn:
        raise ValueError("degenerate range for min-max quantizer")
    half = (mx - mn) / 2.0
    return UniformQuantConfig(bits=n, alpha=(2 ** (n - 1) - 1) / half, beta=(mn + mx) / 2.0)


def musigma_config(sample: np.ndarray, n: int, k: float = 1.0) -> UniformQuantConfig:
    """Static config clipping at mu +- k*sigma."""
    mu, sigma = float(sample.mean()), float(sample.std())
    if sigma <= 0:
        raise ValueError("degenerate range for mu-sigma quantizer")
    return UniformQuantConfig(bits=n, alpha=(2 ** (n - 1) - 1) / (k * sigma), beta=mu)


# -- activation statistics ------------------------------------------------------

@dataclass
class StatsVector:
    """Whole-tensor statistics (mu, population sigma, min, max)."""

    mu: float
    sigma: float
    xmin: float
    xmax: float

    def as_array(self) -> np.ndarray:
        return np.array([self.mu, self.sigma, self.xmin, self.xmax])


def compute_stats(x: np.ndarray) -> tuple[StatsVector, StatsVector]:
    """Return (phi, phi') where phi'=(|mu|, sigma, min, max)."""
    x = np.asarray(x, dtype=np.float64)
    if x.size == 0:
        raise ValueError("statistics of empty tensor")
    mu = float(x.mean())
    sigma = float(x.std())
    mn, mx = float(x.min()), float(x.max())
    return StatsVector(mu, sigma, mn, mx), StatsVector(abs(mu), sigma, mn, mx)


def activation_stats(x: Tensor) -> tuple[Tensor, Tensor]:
    """Taped (phi, phi') 4-vectors; gradients reach x through every component."""
    if x.size == 0:
        raise ValueError("statistics of empty tensor")
    mu = T.mean_all(x)
    centered = x - mu
    sigma = T.sqrt(T.mean_all(centered * centered))
    mn = T.min_all(x)
    mx = T.max_all(x)
    phi = T.stack([mu, sigma, mn, mx])
    phi_prime = T.stack([T.absolute(mu), sigma, mn, mx])
    return phi, phi_prime


# -- DLS: dynamic-balancing learnable scalar -----------------------------------

@dataclass
class DLSParams:
    """Eight learnable scalars projecting input statistics to a quantization
    range: alpha_hat = |w1 . phi'|, beta_hat = w2 . phi."""

    w1: Tensor
    w2: Tensor
    bits: int

    def __post_init__(self) -> None:
        if self.w1.shape != (4,) or self.w2.shape != (4,):
            raise ValueError("DLS weight vectors must have shape (4,)")

    def parameters(self) -> list[Tensor]:
        return [self.w1, self.w2]


def dls_scale_shift(phi: Tensor, phi_prime: Tensor, p: DLSParams) -> tuple[Tensor, Tensor]:
    alpha_hat = T.absolute(T.sum_all(p.w1 * phi_prime))
    beta_hat = T.sum_all(p.w2 * phi)
    return alpha_hat, beta_hat


def dls_quantize(x: Tensor, p: DLSParams, n: int | None = None) -> Tensor:
    """Quantize with the statistics-projected range. The floor is straight-
    through inside the clip range; clipped elements get zero gradient from the
    rounding path; alpha/beta gradients flow through the scale/shift arithmetic."""
    n = p.bits if n is None else n
    phi, phi_prime = activation_stats(x)
    alpha_hat, beta_hat = dls_scale_shift(phi, phi_prime, p)
    if alpha_hat.item() <= 0.0:
        raise ValueError("DLS produced a non-positive scaling factor (degenerate range)")
    v = (x - beta_hat) * alpha_hat
    q = T.register_custom_grad(_FloorClipSTE(n), [v])
    return q / alpha_hat + beta_hat


_DLS_STRATEGIES = ("mu3sigma_mu", "minmax_mid", "mu3sigma_mid", "minmax_mu")


def init_dls(sample: np.ndarray, n: int, strategy: str = "mu3sigma_mu") -> DLSParams:
    """Calibrate the 8 projection weights on a sample tensor.

    The default strategy sets the clipping half-range to |mu|+3*sigma (read on
    the phi' components) and the shift to the mean; alternatives use the
    min/max half-range and midpoint.
    """
    if strategy not in _DLS_STRATEGIES:
        raise ValueError(f"unknown DLS init strategy {strategy!r}")
    sample = np.asarray(sample, dtype=np.float64)
    if sample.size == 0:
        raise ValueError("empty calibration sample")
    _, phi_prime = compute_stats(sample)
    qp = float(2 ** (n - 1) - 1)

    minmax_template = np.array([0.0, 0.0, -1.0, 1.0])
    minmax_denom = phi_prime.xmax - phi_prime.xmin
    if strategy.startswith("mu3sigma"):
        template = np.array([1.0, 3.0, 0.0, 0.0])
        r = denom = phi_prime.mu + 3.0 * phi_prime.sigma
        if r <= 0.0:
            template, r, denom = minmax_template, minmax_denom / 2.0, minmax_denom
    else:
        template = minmax_template
        r, denom = minmax_denom / 2.0, minmax_denom
    if r <= 0.0 or denom <= 0.0:
        raise ValueError("degenerate calibration sample: zero statistical range")

    w1 = (qp / r) * template / denom
    if strategy.endswith("_mu"):
        w2 = np.array([1.0, 0.0, 0.0, 0.0])
    else:
        w2 = np.array([0.0, 0.0, 0.5, 0.5])
    return DLSParams(w1=Tensor(w1, requires_grad=True), w2=Tensor(w2, requires_grad=True), bits=n)


# -- RFA: range-floating flexible allocator --------------------------------------

@dataclass
class RFAParams:
    """Uniform level grid with learnable interval thresholds.

    ``levels`` are frozen after init (the grid stays uniform); ``thresholds``
    move during training, re-projected to strict ordering after each step.
    Level i is assigned on [T_i, T_{i+1}); T_1 and T_N act as outer clamps.
    """

    levels: np.ndarray
    thresholds: Tensor
    fixed_slope: float = 0.1
    rho: float = 0.05
    bits: int = field(default=0)

    def __post_init__(self) -> None:
        self.levels = np.asarray(self.levels, dtype=np.float64)
        q = self.levels
        if q.ndim != 1 or q.size < 2:
            raise ValueError("levels must be a vector of at least two entries")
        steps = np.diff(q)
        if np.any(steps <= 0):
            raise ValueError("levels must be strictly increasing")
        if not np.allclose(steps, steps[0], rtol=1e-9, atol=0):
            raise ValueError("levels must be uniformly spaced")
        if self.thresholds.shape != q.shape:
            raise ValueError("need one threshold per level")
        if not 0.0 < self.rho < 0.5:
            raise ValueError("transition half-width rho must lie in (0, 0.5)")

    @property
    def delta_q(self) -> float:
        return float(self.levels[1] - self.levels[0])

    def parameters(self) -> list[Tensor]:
        return [self.thresholds]


def rfa_levels(n: int, w_min: float, w_max: float) -> np.ndarray:
    """2^n uniformly spaced levels spanning [w_min, w_max]."""
    if w_min >= w_max:
        raise ValueError("w_min must be below w_max")
    return np.linspace(w_min, w_max, 2**n)


def _check_thresholds(t: np.ndarray) -> None:
    if np.any(np.diff(t) <= 0):
        raise ValueError("thresholds must be strictly increasing")


def rfa_forward(w: np.ndarray, p: RFAParams) -> np.ndarray:
    """Map each element to the level of its threshold interval (SFT)."""
    t = p.thresholds.data
    _check_thresholds(t)
    w = np.asarray(w, dtype=np.float64)
    j = np.searchsorted(t, w, side="right")  # count of thresholds <= w
    return p.levels[np.clip(j, 1, len(t)) - 1]


def sba_slope(w: np.ndarray, p: RFAParams) -> np.ndarray:
    """Surrogate slope: delta_q / interval width near either bounding threshold
    of the element's interval (within rho * width), fixed 0.1 elsewhere
    (including the outer clamp regions)."""
    t = p.thresholds.data
    _check_thresholds(t)
    w = np.asarray(w, dtype=np.float64)
    n = len(t)
    j = np.searchsorted(t, w, side="right")
    s = np.full(w.shape, p.fixed_slope)
    interior = (j >= 1) & (j <= n - 1)
    ji = np.clip(j, 1, n - 1)
    lo_t, hi_t = t[ji - 1], t[ji]
    width = hi_t - lo_t
    near = interior & ((w - lo_t <= p.rho * width) | (hi_t - w <= p.rho * width))
    return np.where(near, p.delta_q / width, s)


def rfa_backward(w: np.ndarray, p: RFAParams, g_up: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """SBA gradients: g_w through the piecewise slope, g_T from the negative
    slope restricted to the transition zone around each threshold."""
    t = p.thresholds.data
    _check_thresholds(t)
    w = np.asarray(w, dtype=np.float64)
    g_up = np.asarray(g_up, dtype=np.float64)
    n = len(t)
    j = np.searchsorted(t, w, side="right")
    s = sba_slope(w, p)
    g_w = g_up * s

    g_t = np.zeros(n)
    interior = (j >= 1) & (j <= n - 1)
    if np.any(interior):
        ji = j[interior]
        wi = w[interior]
        gi = g_up[interior]
        si = s[interior]
        lo_t, hi_t = t[ji - 1], t[ji]
        width = hi_t - lo_t
        near_lo = wi - lo_t <= p.rho * width
        near_hi = hi_t - wi <= p.rho * width
        np.add.at(g_t, ji[near_lo] - 1, -(si * gi)[near_lo])
        np.add.at(g_t, ji[near_hi], -(si * gi)[near_hi])
    return g_w, g_t


class _RFANode(T.CustomGradNode):
    name = "rfa_quantize"

    def __init__(self, p: RFAParams) -> None:
        self.p = p

    def forward(self, w, thresholds):
        return rfa_forward(w, self.p), None

    def backward(self, grad_out, ctx, arrays):
        g_w, g_t = rfa_backward(arrays[0], self.p, grad_out)
        return g_w, g_t


def rfa_quantize(w: Tensor, p: RFAParams) -> Tensor:
    """Taped RFA fake quantization of a latent weight tensor."""
    return T.register_custom_grad(_RFANode(p), [w, p.thresholds])


def init_rfa(w: np.ndarray, n: int, rho: float = 0.05) -> RFAParams:
    """Levels spanning the tensor's range, thresholds at level midpoints (so
    the initial forward is round-to-nearest), outer sentinel half a step out."""
    w = np.asarray(w, dtype=np.float64)
    if w.size == 0:
        raise ValueError("empty weight tensor")
    w_min, w_max = float(w.min()), float(w.max())
    if w_min >= w_max:
        raise ValueError("constant weight tensor has zero range")
    q = rfa_levels(n, w_min, w_max)
    mids = (q[:-1] + q[1:]) / 2.0
    t = np.concatenate([[q[0] - (q[1] - q[0]) / 2.0], mids])
    return RFAParams(levels=q, thresholds=Tensor(t, requires_grad=True), rho=rho, bits=n)


def project_thresholds(p: RFAParams, min_gap_factor: float = 1e-6) -> None:
    """Restore strict threshold ordering in place (minimum gap relative to the
    level spacing); call after each optimizer step."""
    t = p.thresholds.data
    gap = min_gap_factor * p.delta_q
    for i in range(1, len(t)):
        if t[i] < t[i - 1] + gap:
            t[i] = t[i - 1] + gap


# -- bit packing -----------------------------------------------------------------

@dataclass
class PackedWeights:
    """Dense little-endian stream of n-bit level indices plus the level grid."""

    bits: int
    shape: tuple[int, ...]
    bitstream: bytes
    levels: np.ndarray

    @property
    def payload_bytes(self) -> int:
        return len(self.bitstream)


def _level_indices(w_hat: np.ndarray, levels: np.ndarray) -> np.ndarray:
    idx = np.abs(w_hat.reshape(-1)[:, None] - levels[None, :]).argmin(axis=1)
    if np.any(np.abs(levels[idx] - w_hat.reshape(-1)) > 1e-9):
        raise ValueError("tensor contains off-grid values; quantize before packing")
    return idx


def pack_weights(w_hat: np.ndarray, p: RFAParams, n: int | None = None) -> PackedWeights:
    n = p.bits if n is None else n
    if 8 % n != 0:
        raise ValueError("bit-width must divide 8 for packing")
    w_hat = np.asarray(w_hat, dtype=np.float64)
    idx = _level_indices(w_hat, p.levels)
    per_byte = 8 // n
    pad = (-len(idx)) % per_byte
    if pad:
        idx = np.concatenate([idx, np.zeros(pad, dtype=idx.dtype)])
    groups = idx.reshape(-1, per_byte)
    shifts = (1 << (n * np.arange(per_byte))).astype(np.int64)
    packed = (groups * shifts).sum(axis=1).astype(np.uint8)
    return PackedWeights(bits=n, shape=tuple(w_hat.shape), bitstream=packed.tobytes(), levels=p.levels.copy())


def unpack_weights(pw: PackedWeights) -> np.ndarray:
    per_byte = 8 // pw.bits
    raw = np.frombuffer(pw.bitstream, dtype=np.uint8).astype(np.int64)
    mask = (1 << pw.bits) - 1
    idx = np.empty((len(raw), per_byte), dtype=np.int64)
    for k in range(per_byte):
        idx[:, k] = (raw >> (pw.bits * k)) & mask
    count = int(np.prod(pw.shape))
    return pw.levels[idx.reshape(-1)[:count]].reshape(pw.shape)


def packed_header_size(rank: int, level_count: int) -> int:
    """Bytes preceding the bitstream in the serialized container."""
    return 4 + 2 + 1 + 1 + 4 * rank + 2 + 8 * level_count


def serialize_packed(pw: PackedWeights) -> bytes:
    head = struct.pack("<4sHBB", MAGIC_PACKED, PACKED_VERSION, pw.bits, len(pw.shape))
    head += struct.pack(f"<{len(pw.shape)}I", *pw.shape)
    head += struct.pack("<H", len(pw.levels))
    head += np.asarray(pw.levels, dtype="<f8").tobytes()
    return head + pw.bitstream


def parse_packed(blob: bytes) -> PackedWeights:
    if blob[:4] != MAGIC_PACKED:
        raise ValueError("not a QSSM container")
    version, bits, rank = struct.unpack("<HBB", blob[4:8])
    if version != PACKED_VERSION:
        raise ValueError(f"unsupported QSSM container version {version}")
    off = 8
    shape = struct.unpack(f"<{rank}I", blob[off : off + 4 * rank])
    off += 4 * rank
    (level_count,) = struct.unpack("<H", blob[off : off + 2])
    off += 2
    levels = np.frombuffer(blob[off : off + 8 * level_count], dtype="<f8").astype(np.float64)
    off += 8 * level_count
    count = int(np.prod(shape))
    per_byte = 8 // bits
    nbytes = (count + per_byte - 1) // per_byte
    return PackedWeights(bits=bits, shape=tuple(shape), bitstream=blob[off : off + nbytes], levels=levels)
