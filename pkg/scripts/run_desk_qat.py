#!/usr/bin/env python3
"""Desk-scale QAT comparison on the bundled toy set.

Trains a full-precision model, the learnable-quantizer model at two
bit-widths, and a static min-max STE baseline, then reports Y-channel PSNR
against a bicubic-upsampling reference.
"""

import argparse
import time

import numpy as np

from qssm import metrics, train
from qssm.data import toy_dataset
from qssm.model import ModelConfig, build_model, quantize_model
from qssm.resize import bicubic_down, bicubic_up


def calibration_batch(ds, size, scale, count=4):
    crops = []
    for img in ds[:count]:
        t = (img.shape[1] - size) // 2
        l = (img.shape[2] - size) // 2
        crops.append(np.clip(bicubic_down(img[:, t : t + size, l : l + size], scale), 0, 1))
    return np.stack(crops)


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--iters", type=int, default=train.DESK_ITERS)
    ap.add_argument("--seed", type=int, default=7)
    ap.add_argument("--scale", type=int, default=2)
    args = ap.parse_args()

    ds = toy_dataset()
    preset = train.desk_preset("light_sr")
    spec = train.spec_for_task("light_sr", args.scale)
    pairs = train.validation_pairs(ds, spec, seed=args.seed, crop=None)
    bicubic = float(
        np.mean(
            [
                metrics.psnr(metrics.rgb_to_y(np.clip(bicubic_up(lr, args.scale), 0, 1)), metrics.rgb_to_y(hr), args.scale)
                for lr, hr in pairs
            ]
        )
    )
    print(f"bicubic reference: {bicubic:.3f} dB")

    cal = calibration_batch(ds, preset.gt_size, args.scale)
    variants = [
        ("full precision", None, None),
        ("4/4 learnable", (4, 4), "dls_rfa"),
        ("2/2 learnable", (2, 2), "dls_rfa"),
        ("4/4 static STE", (4, 4), "static"),
    ]
    for name, bits, mode in variants:
        net = build_model(ModelConfig(task="light_sr", scale=args.scale), seed=args.seed)
        if bits is not None:
            net = quantize_model(net, bits[0], bits[1], cal, mode=mode)
        t0 = time.perf_counter()
        train.qat_train(net, ds, preset, iters=args.iters, seed=args.seed, eval_every=0, log_every=500)
        _, psnr, ssim = train.evaluate(net, pairs, crop_border=args.scale)
        print(f"{name}: {psnr:.3f} dB / {ssim:.4f} SSIM ({time.perf_counter() - t0:.0f}s)")


if __name__ == "__main__":
    main()
