"""QAT training loop with task presets, milestone schedule, paired
augmentation, synthetic degradations, and deterministic seeded batching.

Latent weights stay full precision; quantization is re-applied every
forward, and RFA thresholds are re-projected to strict ordering after each
optimizer step.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from . import metrics
from . import tensor as T
from .model import RestorationNet
from .resize import bicubic_down
from .tensor import Tape, Tensor

CHARBONNIER_EPS = 1e-3
MILESTONES = (10000, 15000, 17500, 18750)


@dataclass
class TrainPreset:
    task: str
    batch_size: int
    base_lr: float
    loss: str  # 'l1' | 'charbonnier'
    gt_size: int
    blocks: int
    milestones: tuple[int, ...] = MILESTONES


PRESETS = {
    "classic_sr": TrainPreset("classic_sr", 4, 1e-4, "l1", 192, 6),
    "light_sr": TrainPreset("light_sr", 2, 2e-4, "l1", 192, 4),
    "denoise": TrainPreset("denoise", 4, 1e-4, "charbonnier", 128, 6),
    "jpeg_car": TrainPreset("jpeg_car", 4, 1e-4, "charbonnier", 128, 6),
}

# CPU-budget settings: iterations and milestones scale by 0.1 and patches
# shrink (36 divides by every SR scale) so a full run stays in the minutes range.
DESK_ITERS = 2000
DESK_GT_SIZE = {"classic_sr": 36, "light_sr": 36, "denoise": 32, "jpeg_car": 32}


def desk_preset(task: str) -> TrainPreset:
    base = PRESETS[task]
    return replace(
        base,
        gt_size=DESK_GT_SIZE[task],
        milestones=tuple(int(m * 0.1) for m in base.milestones),
    )


@dataclass
class DegradationSpec:
    kind: str  # 'bicubic_down' | 'gaussian_noise' | 'jpeg_like'
    scale: int = 1
    sigma: float = 0.0  # on the 0..255 scale
    quality: int = 50

    def __post_init__(self) -> None:
        if self.kind not in ("bicubic_down", "gaussian_noise", "jpeg_like"):
            raise ValueError(f"unknown degradation {self.kind!r}")
        if not 1 <= self.quality <= 100:
            raise ValueError("JPEG quality must lie in [1, 100]")


def spec_for_task(task: str, scale: int, sigma: float = 25.0, quality: int = 30) -> DegradationSpec:
    if task in ("classic_sr", "light_sr"):
        return DegradationSpec("bicubic_down", scale=scale)
    if task == "denoise":
        return DegradationSpec("gaussian_noise", sigma=sigma)
    return DegradationSpec("jpeg_like", quality=quality)


# -- losses -----------------------------------------------------------------------

def l1_loss(pred: Tensor, gt: Tensor) -> Tensor:
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {gt.shape}")
    return T.mean_all(T.absolute(pred - gt))


def charbonnier_loss(pred: Tensor, gt: Tensor, eps: float = CHARBONNIER_EPS) -> Tensor:
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {gt.shape}")
    diff = pred - gt
    return T.mean_all(T.sqrt(diff * diff + eps * eps))


LOSSES = {"l1": l1_loss, "charbonnier": charbonnier_loss}


# -- schedule -----------------------------------------------------------------------

def lr_at(iteration: int, preset: TrainPreset) -> float:
    """Base LR halved at every passed milestone."""
    passed = sum(1 for m in preset.milestones if m <= iteration)
    return preset.base_lr * 0.5**passed


# -- augmentation ---------------------------------------------------------------------

def _apply_dihedral(img: np.ndarray, flip: bool, rot: int) -> np.ndarray:
    if flip:
        img = img[..., :, ::-1]
    if rot:
        img = np.rot90(img, rot, axes=(-2, -1))
    return np.ascontiguousarray(img)


def augment(hr: np.ndarray, lr: np.ndarray, rng: np.random.Generator):
    """Apply one transform drawn from {identity, hflip} x {0,90,180,270} to
    both patches of an aligned pair."""
    k = int(rng.integers(8))
    flip, rot = bool(k & 1), k >> 1
    return _apply_dihedral(hr, flip, rot), _apply_dihedral(lr, flip, rot)


# -- degradations ------------------------------------------------------------------------

_JPEG_LUMA_TABLE = np.array(
    [
        [16, 11, 10, 16, 24, 40, 51, 61],
        [12, 12, 14, 19, 26, 58, 60, 55],
        [14, 13, 16, 24, 40, 57, 69, 56],
        [14, 17, 22, 29, 51, 87, 80, 62],
        [18, 22, 37, 56, 68, 109, 103, 77],
        [24, 35, 55, 64, 81, 104, 113, 92],
        [49, 64, 78, 87, 103, 121, 120, 101],
        [72, 92, 95, 98, 112, 100, 103, 99],
    ],
    dtype=np.float64,
)


def _dct_matrix() -> np.ndarray:
    k = np.arange(8)
    m = np.cos((2 * k[None, :] + 1) * k[:, None] * np.pi / 16.0)
    m[0] *= 1.0 / math.sqrt(2.0)
    return m * 0.5


_DCT = _dct_matrix()


def _jpeg_table(quality: int) -> np.ndarray:
    scale = 5000.0 / quality if quality < 50 else 200.0 - 2.0 * quality
    return np.clip(np.floor((_JPEG_LUMA_TABLE * scale + 50.0) / 100.0), 1.0, 255.0)


def jpeg_like(img: np.ndarray, quality: int) -> np.ndarray:
    """Blockwise DCT quantization with the luminance table (all channels)."""
    c, h, w = img.shape
    ph, pw = (-h) % 8, (-w) % 8
    x = np.pad(img, ((0, 0), (0, ph), (0, pw)), mode="edge") * 255.0 - 128.0
    hb, wb = x.shape[1] // 8, x.shape[2] // 8
    blocks = x.reshape(c, hb, 8, wb, 8).transpose(0, 1, 3, 2, 4)
    coeff = np.einsum("ij,cbkjl,ml->cbkim", _DCT, blocks, _DCT)
    table = _jpeg_table(quality)
    coeff = np.round(coeff / table) * table
    rec = np.einsum("ji,cbkjl,lm->cbkim", _DCT, coeff, _DCT)
    out = rec.transpose(0, 1, 3, 2, 4).reshape(c, hb * 8, wb * 8)
    return np.clip((out[:, :h, :w] + 128.0) / 255.0, 0.0, 1.0)


def degrade(hr: np.ndarray, spec: DegradationSpec, rng: np.random.Generator | None = None) -> np.ndarray:
    hr = np.asarray(hr, dtype=np.float64)
    if spec.kind == "bicubic_down":
        # the cubic kernel can overshoot; LR images live in [0,1] like any stored image
        return np.clip(bicubic_down(hr, spec.scale), 0.0, 1.0)
    if spec.kind == "gaussian_noise":
        if spec.sigma == 0.0:
            return hr.copy()
        if rng is None:
            raise ValueError("gaussian noise needs an RNG")
        noisy = hr + rng.normal(0.0, spec.sigma / 255.0, size=hr.shape)
        return np.clip(noisy, 0.0, 1.0)
    return jpeg_like(hr, spec.quality)


# -- optimizer ---------------------------------------------------------------------------

class Adam:
    def __init__(self, params, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)  # (name, Tensor) pairs, stable order
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = [np.zeros(p.shape) for _, p in self.params]
        self.v = [np.zeros(p.shape) for _, p in self.params]
        self.t = 0

    def step(self, lr: float) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        bias1 = 1.0 - b1**self.t
        bias2 = 1.0 - b2**self.t
        for i, (_, p) in enumerate(self.params):
            if p.grad is None:
                continue
            self.m[i] = b1 * self.m[i] + (1 - b1) * p.grad
            self.v[i] = b2 * self.v[i] + (1 - b2) * p.grad**2
            p.data -= lr * (self.m[i] / bias1) / (np.sqrt(self.v[i] / bias2) + self.eps)

    def zero_grad(self) -> None:
        for _, p in self.params:
            p.grad = None


# -- training loop ---------------------------------------------------------------------------

@dataclass
class TrainLogRow:
    iteration: int
    lr: float
    loss: float
    psnr_val: float = math.nan
    ssim_val: float = math.nan


def _crop_patch(img: np.ndarray, size: int, rng: np.random.Generator) -> np.ndarray:
    _, h, w = img.shape
    if h < size or w < size:
        raise ValueError(f"image {h}x{w} smaller than patch size {size}")
    top = int(rng.integers(h - size + 1))
    left = int(rng.integers(w - size + 1))
    return img[:, top : top + size, left : left + size]


def make_batch(dataset, preset: TrainPreset, spec: DegradationSpec, rng: np.random.Generator):
    """Crop, augment and degrade one training batch; returns (inputs, targets)."""
    hrs, lrs = [], []
    idx = rng.integers(len(dataset), size=preset.batch_size)
    for i in idx:
        hr = _crop_patch(dataset[int(i)], preset.gt_size, rng)
        hr, _ = augment(hr, hr, rng)
        lrs.append(degrade(hr, spec, rng))
        hrs.append(hr)
    return np.stack(lrs), np.stack(hrs)


def evaluate(net: RestorationNet, pairs, crop_border: int):
    """Per-image (psnr, ssim) on the Y channel plus their means."""
    rows = []
    for lr_img, hr_img in pairs:
        out = net.forward(lr_img)
        pred = np.clip(out.data, 0.0, 1.0)
        q = metrics.quality_report(pred, hr_img, crop_border)
        rows.append((q.psnr_db, q.ssim))
    mean_psnr = float(np.mean([r[0] for r in rows]))
    mean_ssim = float(np.mean([r[1] for r in rows]))
    return rows, mean_psnr, mean_ssim


def validation_pairs(dataset, spec: DegradationSpec, seed: int, crop: int | None = None):
    """Deterministic degraded/clean pairs for periodic validation."""
    rng = np.random.default_rng(seed)
    pairs = []
    for img in dataset:
        hr = img
        if crop is not None and (img.shape[1] > crop or img.shape[2] > crop):
            top = (img.shape[1] - crop) // 2
            left = (img.shape[2] - crop) // 2
            hr = img[:, top : top + crop, left : left + crop]
        pairs.append((degrade(hr, spec, rng), hr))
    return pairs


def qat_train(
    net: RestorationNet,
    dataset,
    preset: TrainPreset,
    iters: int,
    seed: int,
    spec: DegradationSpec | None = None,
    eval_every: int = 0,
    val_crop: int = 128,
    log_every: int = 50,
) -> list[TrainLogRow]:
    """Run the QAT loop in place and return the metrics log.

    Deterministic for a given (net, dataset, preset, iters, seed).
    """
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    if spec is None:
        spec = spec_for_task(preset.task, net.cfg.scale)
    rng = np.random.default_rng(seed)
    loss_fn = LOSSES[preset.loss]
    opt = Adam(net.named_params())
    val = validation_pairs(dataset, spec, seed, crop=val_crop) if eval_every else None

    log: list[TrainLogRow] = []
    for it in range(iters):
        lr_batch, hr_batch = make_batch(dataset, preset, spec, rng)
        lr = lr_at(it, preset)
        with Tape() as tape:
            pred = net.forward(lr_batch)
            loss = loss_fn(pred, Tensor(hr_batch))
        loss_val = loss.item()
        if not math.isfinite(loss_val):
            culprit = tape.first_nonfinite_node() or "loss"
            raise T.NumericError(f"non-finite loss at iteration {it}; first produced by {culprit}")
        tape.backward(loss)
        opt.step(lr)
        opt.zero_grad()
        if net.qenv is not None:
            net.qenv.project()

        if (it + 1) % log_every == 0 or it == iters - 1:
            row = TrainLogRow(iteration=it + 1, lr=lr, loss=loss_val)
            if eval_every and ((it + 1) % eval_every == 0 or it == iters - 1):
                border = net.cfg.scale if net.cfg.scale > 1 else 0
                _, row.psnr_val, row.ssim_val = evaluate(net, val, crop_border=border)
            log.append(row)
    return log
