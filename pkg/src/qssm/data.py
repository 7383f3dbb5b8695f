"""Bundled toy dataset: eight procedurally generated 256x256 RGB images
(checkerboards, gradients, value-noise textures, stripes, shapes) committed
as PNGs so experiments and tests need no downloads.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .io import load_png, save_png
from .resize import bicubic_resize

TOY_SIZE = 256
TOY_COUNT = 8

REPO_ROOT = Path(__file__).resolve().parents[2]
TOY_ROOT = REPO_ROOT / "data" / "toy"


def _grid(size: int):
    y, x = np.mgrid[0:size, 0:size].astype(np.float64)
    return y / (size - 1), x / (size - 1)


def _tint(lum: np.ndarray, color) -> np.ndarray:
    lum = np.clip(lum, 0.0, 1.0)
    return np.clip(np.stack([lum * c for c in color]), 0.0, 1.0)


def _value_noise(size: int, cells: int, rng: np.random.Generator) -> np.ndarray:
    coarse = rng.random((cells, cells))
    return bicubic_resize(coarse, size, size)


def make_toy_images(seed: int = 0, size: int = TOY_SIZE) -> list[np.ndarray]:
    """Eight textured images; each carries enough fine-scale structure that
    plain bicubic x2 upsampling stays in the 20-35 dB band."""
    rng = np.random.default_rng(seed)
    yy, xx = _grid(size)
    images = []

    checker8 = ((np.floor(yy * size / 8) + np.floor(xx * size / 8)) % 2) * 0.8 + 0.1
    images.append(_tint(checker8, (1.0, 0.85, 0.6)))

    checker5 = ((np.floor(yy * size / 5) + np.floor(xx * size / 5)) % 2) * 0.7 + 0.15
    images.append(_tint(checker5 + 0.1 * np.sin(14 * np.pi * xx), (0.6, 0.8, 1.0)))

    grad = 0.15 + 0.5 * xx + 0.14 * np.sin(62 * np.pi * yy) + 0.12 * np.sin(86 * np.pi * (xx + 0.3 * yy))
    images.append(_tint(grad, (0.9, 0.9, 0.95)))

    radius = np.hypot(yy - 0.5, xx - 0.5)
    rings = 0.5 + 0.38 * np.sin(120.0 * np.pi * radius)
    images.append(_tint(rings, (0.8, 1.0, 0.8)))

    noise_mid = 0.45 * _value_noise(size, 33, rng) + 0.55 * _value_noise(size, 86, rng)
    images.append(_tint(0.15 + 0.7 * noise_mid, (1.0, 0.95, 0.9)))

    noise_fine = 0.5 * _value_noise(size, 49, rng) + 0.5 * _value_noise(size, 97, rng)
    images.append(_tint(0.15 + 0.7 * noise_fine, (0.85, 0.9, 1.0)))

    stripes = (
        0.5
        + 0.2 * np.sin(58 * np.pi * (xx + yy))
        + 0.16 * np.sin(34 * np.pi * (xx - yy))
        + 0.08 * np.sin(90 * np.pi * xx)
    )
    images.append(_tint(stripes, (1.0, 0.8, 0.8)))

    shapes = 0.25 + 0.1 * np.sin(70 * np.pi * yy)
    for _ in range(60):
        cy, cx = rng.integers(8, size - 8, size=2)
        r = int(rng.integers(3, 14))
        level = rng.uniform(0.1, 0.95)
        if rng.random() < 0.5:
            mask = np.hypot(yy * (size - 1) - cy, xx * (size - 1) - cx) <= r
        else:
            mask = (np.abs(yy * (size - 1) - cy) <= r) & (np.abs(xx * (size - 1) - cx) <= r)
        shapes = np.where(mask, level, shapes)
    images.append(_tint(shapes, (0.95, 0.95, 0.85)))

    return images


def make_toy_dataset(root: Path | str = TOY_ROOT, seed: int = 0) -> list[Path]:
    root = Path(root)
    hr = root / "hr"
    hr.mkdir(parents=True, exist_ok=True)
    paths = []
    for i, img in enumerate(make_toy_images(seed)):
        path = hr / f"toy_{i:02d}.png"
        save_png(img, path)
        paths.append(path)
    return paths


def toy_dataset(root: Path | str = TOY_ROOT) -> list[np.ndarray]:
    """Load the committed toy set, generating it first if absent."""
    root = Path(root)
    hr = root / "hr"
    if not hr.is_dir() or not sorted(hr.glob("*.png")):
        make_toy_dataset(root)
    return [load_png(p) for p in sorted(hr.glob("*.png"))]
