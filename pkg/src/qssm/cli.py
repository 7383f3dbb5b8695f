"""Command-line surface: train / eval / export / stats.

Exit codes: 0 success, 2 usage or config error, 3 data error, 4 numeric
failure. All commands are deterministic given (config, seed, dataset); the
only environment override is QSSM_SEED.
"""

from __future__ import annotations

import argparse
import os
import sys
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import io, metrics, model, quant, train
from .tensor import NumericError

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4


class ConfigError(ValueError):
    pass


class DataError(ValueError):
    pass


def _build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="qssm", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)
    for name in ("train", "eval", "export", "stats"):
        c = sub.add_parser(name)
        c.add_argument("--config", type=Path, default=None)
        c.add_argument("--task", choices=model.TASKS, default=None)
        c.add_argument("--bits", nargs=2, type=int, metavar=("W", "A"), default=None)
        c.add_argument("--scale", type=int, default=None)
        c.add_argument("--desk", action="store_true")
        c.add_argument("--seed", type=int, default=None)
        c.add_argument("--out", type=Path, default=None)
        c.add_argument("--data", type=Path, default=None, help="dataset root (hr/ and optional lr/)")
        if name in ("eval", "export", "stats"):
            c.add_argument("--checkpoint", type=Path, default=None)
        if name == "stats":
            c.add_argument("--select", default="", help="substring selecting activation sites")
    return p


def _resolve(args) -> dict:
    cfg: dict = {}
    if args.config is not None:
        if not Path(args.config).is_file():
            raise ConfigError(f"config file not found: {args.config}")
        cfg.update({k: io.coerce(v) for k, v in io.load_config(args.config).items()})
    if args.task:
        cfg["task"] = args.task
    if args.bits:
        cfg["bits_w"], cfg["bits_a"] = args.bits
    if args.scale is not None:
        cfg["scale"] = args.scale
    if args.desk:
        cfg["desk"] = True
    if args.seed is not None:
        cfg["seed"] = args.seed
    if args.data is not None:
        cfg["data_root"] = str(args.data)
    if getattr(args, "checkpoint", None) is not None:
        cfg["checkpoint"] = str(args.checkpoint)
    if "QSSM_SEED" in os.environ:
        cfg["seed"] = int(os.environ["QSSM_SEED"])
    cfg.setdefault("seed", 0)
    return cfg


def _dataset(cfg: dict) -> io.DatasetLayout:
    root = cfg.get("data_root")
    if not root:
        raise ConfigError("no dataset: set data_root in the config or pass --data")
    layout = io.DatasetLayout(Path(root), hr_dir=cfg.get("hr_dir", "hr"), lr_dir=cfg.get("lr_dir"))
    try:
        layout.hr_files()
    except FileNotFoundError as e:
        # a missing directory is a misconfiguration, not bad data
        raise ConfigError(str(e)) from e
    return layout


def _now() -> str:
    return datetime.now(timezone.utc).isoformat()


def _preset(cfg: dict) -> train.TrainPreset:
    task = cfg.get("task")
    if task not in model.TASKS:
        raise ConfigError(f"task must be set to one of {model.TASKS}")
    preset = train.desk_preset(task) if cfg.get("desk") else train.PRESETS[task]
    overrides = {}
    for key in ("batch_size", "gt_size", "base_lr"):
        if key in cfg:
            overrides[key] = cfg[key]
    if overrides:
        from dataclasses import replace

        preset = replace(preset, **overrides)
    return preset


def cmd_train(args) -> int:
    cfg = _resolve(args)
    preset = _preset(cfg)
    layout = _dataset(cfg)
    dataset = layout.load_hr()
    seed = int(cfg["seed"])
    task = cfg["task"]
    scale = int(cfg.get("scale", 2 if task.endswith("_sr") else 1))
    bits = (int(cfg.get("bits_w", 32)), int(cfg.get("bits_a", 32)))
    iters = int(cfg.get("iters", train.DESK_ITERS if cfg.get("desk") else 20000))

    mcfg = model.ModelConfig(
        task=task,
        scale=scale,
        blocks=int(cfg.get("blocks", preset.blocks)),
        channels=int(cfg.get("channels", 16)),
        state_size=int(cfg.get("state_size", 4)),
    )
    net = model.build_model(mcfg, seed)
    spec = train.spec_for_task(
        task, scale, sigma=float(cfg.get("sigma", 25.0)), quality=int(cfg.get("quality", 30))
    )
    if bits != (32, 32):
        crops = _calibration_batch(dataset, preset.gt_size, int(cfg.get("calib_images", 4)))
        calib_rng = np.random.default_rng(seed)
        calib = np.stack([train.degrade(c, spec, calib_rng) for c in crops])
        net = model.quantize_model(
            net,
            bits[0],
            bits[1],
            calib,
            mode=cfg.get("quant_mode", "dls_rfa"),
            dls_strategy=cfg.get("dls_strategy", "mu3sigma_mu"),
        )

    out_dir = Path(args.out) if args.out else Path(cfg.get("out_dir", "runs/latest"))
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = io.RunManifest(config=cfg, seed=seed, started=_now())

    log = train.qat_train(
        net,
        dataset,
        preset,
        iters=iters,
        seed=seed,
        spec=spec,
        eval_every=int(cfg.get("eval_every", 500)),
        val_crop=int(cfg.get("val_crop", 128)),
        log_every=int(cfg.get("log_every", 50)),
    )

    ckpt = out_dir / "checkpoint.qirc"
    csv_path = out_dir / "metrics.csv"
    model.save_checkpoint(net, ckpt)
    io.write_metrics_csv(csv_path, log)
    manifest.finished = _now()
    manifest.artifacts = {"checkpoint": str(ckpt), "metrics": str(csv_path)}
    manifest.save(out_dir / "manifest.json")
    print(f"wrote {ckpt}, {csv_path}, {out_dir / 'manifest.json'}")
    return EXIT_OK


def _calibration_batch(dataset, size: int, count: int) -> np.ndarray:
    batch = []
    for img in dataset[: max(1, count)]:
        _, h, w = img.shape
        top, left = (h - size) // 2, (w - size) // 2
        batch.append(img[:, top : top + size, left : left + size])
    return np.stack(batch)


def _load_checkpoint(cfg: dict) -> model.RestorationNet:
    path = cfg.get("checkpoint")
    if not path:
        raise ConfigError("no checkpoint: set checkpoint in the config or pass --checkpoint")
    if not Path(path).is_file():
        raise DataError(f"checkpoint not found: {path}")
    return model.load_checkpoint(path)


def _eval_pairs(net: model.RestorationNet, layout: io.DatasetLayout, cfg: dict):
    spec = train.spec_for_task(
        net.cfg.task,
        net.cfg.scale,
        sigma=float(cfg.get("sigma", 25.0)),
        quality=int(cfg.get("quality", 30)),
    )
    rng = np.random.default_rng(int(cfg["seed"]))
    pairs, ids = [], []
    for hr_path, lr_path in layout.pairs():
        hr = io.load_png(hr_path)
        if lr_path is not None:
            lr = io.load_png(lr_path)
            expect = (hr.shape[1] // net.cfg.scale, hr.shape[2] // net.cfg.scale)
            if lr.shape[1:] != expect:
                raise DataError(
                    f"scale mismatch for pair {hr_path.name}/{lr_path.name}: "
                    f"LR is {lr.shape[1:]}, expected {expect}"
                )
        else:
            lr = train.degrade(hr, spec, rng)
        pairs.append((lr, hr))
        ids.append(hr_path.stem)
    return pairs, ids


def cmd_eval(args) -> int:
    cfg = _resolve(args)
    net = _load_checkpoint(cfg)
    layout = _dataset(cfg)
    pairs, ids = _eval_pairs(net, layout, cfg)
    rows, _, _ = train.evaluate(net, pairs, crop_border=net.cfg.scale if net.cfg.scale > 1 else 0)
    out = Path(args.out) if args.out else Path("eval.csv")
    bits = net.cfg.bits or (32, 32)
    io.write_eval_csv(
        out,
        [(i, p, s) for i, (p, s) in zip(ids, rows)],
        bits[0],
        bits[1],
        net.cfg.task,
        net.cfg.scale,
    )
    print(f"wrote {out}")
    return EXIT_OK


def cmd_export(args) -> int:
    cfg = _resolve(args)
    net = _load_checkpoint(cfg)
    if net.qenv is None or net.qenv.mode == "frozen":
        raise ConfigError("checkpoint is not a trainable quantized model; run train with --bits first")
    out = Path(args.out) if args.out else Path("model_packed.qirc")
    h, w = int(cfg.get("input_h", 64)), int(cfg.get("input_w", 64))
    rep = metrics.count_complexity(net, (3, h, w), bits=(net.qenv.w_bits, net.qenv.a_bits))
    model.export_frozen(net, out, report=rep)
    print(f"wrote {out}")
    print(
        f"params {rep.params_full:.0f} -> effective {rep.params_effective:.1f} "
        f"(down {rep.params_reduction:.1%})"
    )
    print(f"ops    {rep.ops_full:.0f} -> effective {rep.ops_effective:.1f} (down {rep.ops_reduction:.1%})")
    return EXIT_OK


def cmd_stats(args) -> int:
    cfg = _resolve(args)
    net = _load_checkpoint(cfg)
    layout = _dataset(cfg)
    dataset = layout.load_hr()
    size = int(cfg.get("gt_size", 64))
    batch = _calibration_batch(dataset, min(size, dataset[0].shape[1]), int(cfg.get("calib_images", 4)))
    spec = train.spec_for_task(net.cfg.task, net.cfg.scale)
    rng = np.random.default_rng(int(cfg["seed"]))
    inputs = np.stack([train.degrade(img, spec, rng) for img in batch])

    selector = getattr(args, "select", "") or cfg.get("select", "")
    available = net.act_sites()
    selected = [s for s in available if selector in s]
    if not selected:
        raise ConfigError(f"selector {selector!r} matches no activation site; available: {available}")

    captured: dict[str, list[np.ndarray]] = {}

    def tap(site: str, value: np.ndarray) -> None:
        if site in selected:
            captured.setdefault(site, []).append(value.reshape(-1).copy())

    net.forward(inputs, tap=tap)

    histograms, stats_rows = [], []
    for site in selected:
        values = np.concatenate(captured[site])
        lo, hi = float(values.min()), float(values.max())
        if hi <= lo:
            hi = lo + 1.0
        counts, edges = np.histogram(values, bins=256, range=(lo, hi))
        histograms.append((site, edges, counts))
        for b, chunk in enumerate(captured[site]):
            phi, _ = quant.compute_stats(chunk)
            stats_rows.append((site, b, phi))

    out = Path(args.out) if args.out else Path("stats")
    hist_path = Path(f"{out}_hist.csv")
    stats_path = Path(f"{out}_phi.csv")
    io.write_stats_csv(hist_path, stats_path, histograms, stats_rows)
    print(f"wrote {hist_path}, {stats_path}")
    return EXIT_OK


_COMMANDS = {"train": cmd_train, "eval": cmd_eval, "export": cmd_export, "stats": cmd_stats}


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except (ConfigError, ValueError) as e:
        if isinstance(e, DataError):
            print(f"error: {e}", file=sys.stderr)
            return EXIT_DATA
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except FileNotFoundError as e:
        print(f"error: dataset problem: {e}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as e:
        print(f"error: numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
