#!/usr/bin/env python3
"""Quantizer-range initialization ablation at desk scale.

Compares the four (scale, shift) calibration strategies for the activation
quantizer over a fixed seed set and reports mean Y-channel PSNR.
"""

import argparse
import time

import numpy as np

from qssm import train
from qssm.data import toy_dataset
from qssm.model import ModelConfig, build_model, quantize_model
from qssm.resize import bicubic_down

STRATEGIES = ("mu3sigma_mu", "mu3sigma_mid", "minmax_mu", "minmax_mid")


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--iters", type=int, default=500)
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--gt-size", type=int, default=24)
    args = ap.parse_args()

    ds = toy_dataset()
    frac = args.iters / 20000
    preset = train.TrainPreset(
        "light_sr", 2, 2e-4, "l1", args.gt_size, 4,
        milestones=tuple(int(m * frac) for m in train.MILESTONES),
    )
    spec = train.spec_for_task("light_sr", 2)
    pairs = train.validation_pairs(ds, spec, seed=0, crop=128)
    crops = []
    for img in ds[:4]:
        t = (img.shape[1] - args.gt_size) // 2
        l = (img.shape[2] - args.gt_size) // 2
        crops.append(np.clip(bicubic_down(img[:, t : t + args.gt_size, l : l + args.gt_size], 2), 0, 1))
    cal = np.stack(crops)

    for strategy in STRATEGIES:
        scores = []
        for seed in args.seeds:
            net = build_model(ModelConfig(task="light_sr", scale=2), seed=seed)
            qnet = quantize_model(net, 4, 4, cal, dls_strategy=strategy)
            t0 = time.perf_counter()
            train.qat_train(qnet, ds, preset, iters=args.iters, seed=seed, eval_every=0, log_every=args.iters)
            _, p, _ = train.evaluate(qnet, pairs, crop_border=2)
            scores.append(p)
            print(f"  {strategy} seed {seed}: {p:.3f} dB ({time.perf_counter() - t0:.0f}s)")
        print(f"{strategy}: mean {np.mean(scores):.3f} dB over seeds {args.seeds}")


if __name__ == "__main__":
    main()
