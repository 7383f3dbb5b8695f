"""File-format plumbing: PNG load/save, canonical key-value config text,
RFC-4180 CSV reports, dataset directory layout, and run manifests.
"""

from __future__ import annotations

import csv
import json
import math
import subprocess
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

__version__ = "0.1.0"


# -- PNG ---------------------------------------------------------------------------

def load_png(path) -> np.ndarray:
    """Read an 8/16-bit RGB or grayscale PNG as (3,H,W) in [0,1]."""
    img = Image.open(path)
    mode = img.mode
    if mode in ("L", "RGB"):
        arr = np.asarray(img, dtype=np.float64) / 255.0
    elif mode in ("I", "I;16"):
        arr = np.asarray(img, dtype=np.float64) / 65535.0
    else:
        raise ValueError(f"unsupported PNG color type {mode!r} in {path}")
    if arr.ndim == 2:
        arr = np.repeat(arr[None], 3, axis=0)
    else:
        arr = arr.transpose(2, 0, 1)
    return np.ascontiguousarray(arr)


def save_png(img: np.ndarray, path) -> None:
    """Write a (3,H,W) [0,1] image as 8-bit RGB, rounding half away from zero."""
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 3 or img.shape[0] != 3:
        raise ValueError("expected a (3,H,W) image")
    u8 = np.clip(np.floor(img * 255.0 + 0.5), 0, 255).astype(np.uint8)
    Image.fromarray(u8.transpose(1, 2, 0), mode="RGB").save(path, format="PNG")


# -- canonical key-value config text ----------------------------------------------------

def to_config_text(d: dict) -> str:
    """One sorted 'key = value' line per entry (the canonical form)."""
    return "".join(f"{k} = {d[k]}\n" for k in sorted(d))


def parse_config_text(text: str) -> dict:
    out: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ValueError(f"config line {lineno} is not 'key = value': {line!r}")
        out[key.strip()] = value.strip()
    return out


def load_config(path) -> dict:
    return parse_config_text(Path(path).read_text())


def coerce(value: str):
    """Best-effort typing of a config value string."""
    low = value.lower()
    if low in ("true", "false"):
        return low == "true"
    try:
        return int(value)
    except ValueError:
        pass
    try:
        return float(value)
    except ValueError:
        return value


# -- CSV reports --------------------------------------------------------------------------

def _fmt(value, spec: str) -> str:
    if isinstance(value, float):
        if math.isinf(value):
            return "inf"
        if math.isnan(value):
            return ""
        return format(value, spec)
    return str(value)


def write_metrics_csv(path, rows) -> None:
    """Training log: iter, lr, loss, psnr_val, ssim_val."""
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["iter", "lr", "loss", "psnr_val", "ssim_val"])
        for r in rows:
            w.writerow(
                [
                    r.iteration,
                    _fmt(r.lr, ".8g"),
                    _fmt(r.loss, ".8g"),
                    _fmt(r.psnr_val, ".4f"),
                    _fmt(r.ssim_val, ".6f"),
                ]
            )


def write_eval_csv(path, rows, bits_w, bits_a, task, scale) -> None:
    """Per-image quality rows plus a trailing mean row."""
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["image_id", "psnr_db", "ssim", "bits_w", "bits_a", "task", "scale"])
        for image_id, p, s in rows:
            w.writerow([image_id, _fmt(p, ".4f"), _fmt(s, ".6f"), bits_w, bits_a, task, scale])
        mean_p = float(np.mean([r[1] for r in rows])) if rows else math.nan
        mean_s = float(np.mean([r[2] for r in rows])) if rows else math.nan
        w.writerow(["mean", _fmt(mean_p, ".4f"), _fmt(mean_s, ".6f"), bits_w, bits_a, task, scale])


def write_stats_csv(hist_path, stats_path, histograms, stats_rows) -> None:
    """Histograms: site, bin, lo, hi, count. Stats: one phi row per site/batch."""
    with open(hist_path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["site", "bin", "lo", "hi", "count"])
        for site, edges, counts in histograms:
            for i, c in enumerate(counts):
                w.writerow([site, i, _fmt(float(edges[i]), ".8g"), _fmt(float(edges[i + 1]), ".8g"), int(c)])
    with open(stats_path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["site", "batch", "mu", "sigma", "min", "max"])
        for site, batch, phi in stats_rows:
            w.writerow(
                [site, batch]
                + [_fmt(float(v), ".8g") for v in (phi.mu, phi.sigma, phi.xmin, phi.xmax)]
            )


# -- dataset layout -----------------------------------------------------------------------

@dataclass
class DatasetLayout:
    """HR images under root/hr_dir; optional LR pairs matched by filename stem."""

    root: Path
    hr_dir: str = "hr"
    lr_dir: str | None = None

    def __post_init__(self) -> None:
        self.root = Path(self.root)

    def hr_files(self) -> list[Path]:
        d = self.root / self.hr_dir
        if not d.is_dir():
            raise FileNotFoundError(f"dataset hr directory missing: {d}")
        files = sorted(d.glob("*.png"))
        if not files:
            raise FileNotFoundError(f"no PNG files in dataset directory {d}")
        return files

    def pairs(self) -> list[tuple[Path, Path | None]]:
        hr = self.hr_files()
        if self.lr_dir is None:
            return [(p, None) for p in hr]
        lr_map = {p.stem: p for p in sorted((self.root / self.lr_dir).glob("*.png"))}
        hr_stems = {p.stem for p in hr}
        orphans = sorted(set(lr_map) - hr_stems)
        if orphans:
            raise ValueError(f"LR files without matching HR stems: {orphans}")
        return [(p, lr_map.get(p.stem)) for p in hr]

    def load_hr(self) -> list[np.ndarray]:
        return [load_png(p) for p in self.hr_files()]


# -- run manifest ----------------------------------------------------------------------------

def version_string() -> str:
    try:
        described = subprocess.run(
            ["git", "describe", "--always", "--dirty"],
            capture_output=True,
            text=True,
            timeout=5,
            cwd=Path(__file__).parent,
        )
        if described.returncode == 0:
            return f"qssm-{__version__}+g{described.stdout.strip()}"
    except OSError:
        pass
    return f"qssm-{__version__}"


@dataclass
class RunManifest:
    config: dict
    seed: int
    version: str = field(default_factory=version_string)
    started: str = ""
    finished: str = ""
    artifacts: dict = field(default_factory=dict)

    def save(self, path) -> None:
        payload = {
            "config": {k: str(v) for k, v in sorted(self.config.items())},
            "seed": self.seed,
            "version": self.version,
            "started": self.started,
            "finished": self.finished,
            "artifacts": self.artifacts,
        }
        Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path) -> "RunManifest":
        payload = json.loads(Path(path).read_text())
        return cls(
            config=payload["config"],
            seed=payload["seed"],
            version=payload["version"],
            started=payload["started"],
            finished=payload["finished"],
            artifacts=payload["artifacts"],
        )
