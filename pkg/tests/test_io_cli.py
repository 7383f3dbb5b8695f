import math

import numpy as np
import pytest
from PIL import Image

import qssm.io as qio
import qssm.quant as Q
from qssm.cli import main
from qssm.data import make_toy_dataset
from qssm.model import ModelConfig, build_model, save_checkpoint


def test_png_roundtrip_8bit(tmp_path, rng):
    img = np.round(rng.uniform(0, 1, (3, 12, 9)) * 255) / 255.0
    path = tmp_path / "img.png"
    qio.save_png(img, path)
    np.testing.assert_array_equal(qio.load_png(path), img)


def test_png_single_white_pixel(tmp_path):
    path = tmp_path / "white.png"
    qio.save_png(np.ones((3, 1, 1)), path)
    np.testing.assert_array_equal(qio.load_png(path), np.ones((3, 1, 1)))


def test_png_16bit_gradient_monotone(tmp_path):
    strip = (np.arange(0, 60000, 1000, dtype=np.uint32)).astype(np.uint16).reshape(1, -1)
    path = tmp_path / "grad16.png"
    Image.fromarray(strip).save(path)
    arr = qio.load_png(path)
    assert arr.shape[0] == 3
    assert np.all(np.diff(arr[0, 0]) > 0)
    assert arr.max() <= 1.0


def test_png_grayscale_replicates_channels(tmp_path):
    gray = (np.arange(16, dtype=np.uint8).reshape(4, 4) * 16).astype(np.uint8)
    path = tmp_path / "gray.png"
    Image.fromarray(gray, mode="L").save(path)
    arr = qio.load_png(path)
    np.testing.assert_array_equal(arr[0], arr[1])
    np.testing.assert_array_equal(arr[0], arr[2])


def test_png_unsupported_mode_errors(tmp_path):
    path = tmp_path / "pal.png"
    Image.new("P", (4, 4)).save(path)
    with pytest.raises(ValueError, match="unsupported"):
        qio.load_png(path)


def test_save_png_rounds_half_away_from_zero(tmp_path):
    # 0.5/255 rounds up to 1/255
    img = np.full((3, 1, 1), 0.5 / 255.0)
    path = tmp_path / "round.png"
    qio.save_png(img, path)
    assert qio.load_png(path)[0, 0, 0] == 1.0 / 255.0


def test_config_text_roundtrip():
    d = {"task": "light_sr", "seed": 7, "base_lr": 2e-4, "desk": True}
    text = qio.to_config_text(d)
    assert text.splitlines() == sorted(text.splitlines())
    back = {k: qio.coerce(v) for k, v in qio.parse_config_text(text).items()}
    assert back == {"task": "light_sr", "seed": 7, "base_lr": 2e-4, "desk": True}


def test_config_text_rejects_garbage():
    with pytest.raises(ValueError):
        qio.parse_config_text("no equals sign here")


def test_dataset_layout_sorted_and_paired(tmp_path, rng):
    (tmp_path / "hr").mkdir()
    (tmp_path / "lr").mkdir()
    for stem in ("b", "a"):
        qio.save_png(rng.uniform(0, 1, (3, 8, 8)), tmp_path / "hr" / f"{stem}.png")
        qio.save_png(rng.uniform(0, 1, (3, 4, 4)), tmp_path / "lr" / f"{stem}.png")
    layout = qio.DatasetLayout(tmp_path, lr_dir="lr")
    pairs = layout.pairs()
    assert [p[0].stem for p in pairs] == ["a", "b"]
    assert all(p[1] is not None for p in pairs)


def test_dataset_layout_orphan_lr_errors(tmp_path, rng):
    (tmp_path / "hr").mkdir()
    (tmp_path / "lr").mkdir()
    qio.save_png(rng.uniform(0, 1, (3, 8, 8)), tmp_path / "hr" / "a.png")
    qio.save_png(rng.uniform(0, 1, (3, 4, 4)), tmp_path / "lr" / "zz.png")
    with pytest.raises(ValueError, match="zz"):
        qio.DatasetLayout(tmp_path, lr_dir="lr").pairs()


def test_metrics_csv_rfc4180(tmp_path):
    from qssm.train import TrainLogRow

    rows = [TrainLogRow(1, 2e-4, 0.5, math.inf, 0.9), TrainLogRow(2, 2e-4, 0.25)]
    path = tmp_path / "m.csv"
    qio.write_metrics_csv(path, rows)
    raw = path.read_bytes()
    assert b"\r\n" in raw
    lines = raw.decode().strip().splitlines()
    assert lines[0] == "iter,lr,loss,psnr_val,ssim_val"
    assert lines[1].split(",")[3] == "inf"
    assert lines[2].split(",")[3] == ""


def test_eval_csv_mean_row(tmp_path):
    path = tmp_path / "e.csv"
    qio.write_eval_csv(path, [("a", 30.0, 0.9), ("b", 32.0, 0.8)], 4, 4, "light_sr", 2)
    lines = path.read_text().strip().splitlines()
    assert lines[0] == "image_id,psnr_db,ssim,bits_w,bits_a,task,scale"
    mean = lines[-1].split(",")
    assert mean[0] == "mean"
    assert float(mean[1]) == pytest.approx(31.0)
    assert float(mean[2]) == pytest.approx(0.85)


# -- CLI ---------------------------------------------------------------------------


def toy_root(tmp_path, rng, count=2, size=32):
    root = tmp_path / "data"
    (root / "hr").mkdir(parents=True)
    for i in range(count):
        base = rng.uniform(0.1, 0.9, (3, size, size))
        base[:, ::3, :] = 0.9  # some structure
        qio.save_png(base, root / "hr" / f"img_{i}.png")
    return root


def run_config(tmp_path, root, name="run.cfg", **kw):
    cfg = {
        "task": "light_sr",
        "scale": 2,
        "data_root": str(root),
        "iters": 4,
        "gt_size": 16,
        "eval_every": 0,
        "log_every": 2,
        "channels": 8,
        "blocks": 1,
        "calib_images": 2,
    }
    cfg.update(kw)
    path = tmp_path / name
    path.write_text(qio.to_config_text(cfg))
    return path


def test_cli_missing_dataset_exit_2(tmp_path, capsys):
    cfg = run_config(tmp_path, tmp_path / "nowhere")
    code = main(["train", "--config", str(cfg), "--out", str(tmp_path / "out")])
    assert code == 2
    assert "dataset" in capsys.readouterr().err


def test_cli_train_writes_artifacts(tmp_path, rng):
    root = toy_root(tmp_path, rng)
    cfg = run_config(tmp_path, root, bits_w=4, bits_a=4)
    out = tmp_path / "out"
    assert main(["train", "--config", str(cfg), "--out", str(out), "--seed", "5"]) == 0
    assert (out / "checkpoint.qirc").is_file()
    assert (out / "metrics.csv").is_file()
    assert (out / "manifest.json").is_file()
    manifest = qio.RunManifest.load(out / "manifest.json")
    assert manifest.seed == 5
    assert manifest.artifacts["checkpoint"].endswith("checkpoint.qirc")


def test_cli_train_desk_flag_uses_desk_preset(tmp_path, rng):
    # desk preset with an iteration override: completes and writes artifacts
    root = toy_root(tmp_path, rng, size=40)
    cfg = run_config(tmp_path, root, iters=3, gt_size=None)
    text = "\n".join(l for l in cfg.read_text().splitlines() if not l.startswith("gt_size"))
    cfg.write_text(text + "\n")
    out = tmp_path / "desk"
    code = main(["train", "--config", str(cfg), "--desk", "--bits", "4", "4", "--out", str(out), "--seed", "1"])
    assert code == 0
    assert (out / "checkpoint.qirc").is_file()
    assert (out / "metrics.csv").is_file()
    assert (out / "manifest.json").is_file()


def test_cli_train_repeat_identical_outputs(tmp_path, rng):
    root = toy_root(tmp_path, rng)
    cfg = run_config(tmp_path, root)
    outs = []
    for tag in ("a", "b"):
        out = tmp_path / tag
        assert main(["train", "--config", str(cfg), "--out", str(out), "--seed", "3"]) == 0
        outs.append((out / "checkpoint.qirc").read_bytes() + (out / "metrics.csv").read_bytes())
    assert outs[0] == outs[1]


def test_cli_eval_identity_model_infinite_psnr(tmp_path, rng):
    root = toy_root(tmp_path, rng)
    net = build_model(ModelConfig(task="denoise", blocks=1, channels=8), seed=0)
    for _, p in net.named_params():
        p.data[...] = 0.0
    for block in net.body:
        block.ln1.gamma.data[:] = 1.0
        block.ln2.gamma.data[:] = 1.0
        block.ss2d.norm.gamma.data[:] = 1.0
    ckpt = tmp_path / "id.qirc"
    save_checkpoint(net, ckpt)
    cfg = tmp_path / "eval.cfg"
    cfg.write_text(qio.to_config_text({"data_root": str(root), "sigma": 0.0, "seed": 0}))
    out_csv = tmp_path / "eval.csv"
    code = main(["eval", "--config", str(cfg), "--checkpoint", str(ckpt), "--out", str(out_csv)])
    assert code == 0
    lines = out_csv.read_text().strip().splitlines()
    data_rows = [l.split(",") for l in lines[1:]]
    assert all(r[1] == "inf" for r in data_rows)


def test_cli_eval_mean_row_is_mean(tmp_path, rng):
    root = toy_root(tmp_path, rng)
    cfg = run_config(tmp_path, root)
    out = tmp_path / "out"
    main(["train", "--config", str(cfg), "--out", str(out), "--seed", "1"])
    out_csv = tmp_path / "eval.csv"
    code = main(
        ["eval", "--config", str(cfg), "--checkpoint", str(out / "checkpoint.qirc"), "--out", str(out_csv)]
    )
    assert code == 0
    lines = [l.split(",") for l in out_csv.read_text().strip().splitlines()[1:]]
    per_image = [float(r[1]) for r in lines[:-1]]
    assert float(lines[-1][1]) == pytest.approx(np.mean(per_image), abs=5e-4)


def test_cli_eval_scale_mismatch_exit_3(tmp_path, rng):
    root = toy_root(tmp_path, rng, size=32)
    (root / "lr").mkdir()
    qio.save_png(rng.uniform(0, 1, (3, 9, 9)), root / "lr" / "img_0.png")
    qio.save_png(rng.uniform(0, 1, (3, 16, 16)), root / "lr" / "img_1.png")
    cfg = run_config(tmp_path, root, name="paired.cfg", lr_dir="lr")
    out = tmp_path / "out"
    main(["train", "--config", run_config(tmp_path, root).as_posix(), "--out", str(out), "--seed", "1"])
    code = main(
        ["eval", "--config", str(cfg), "--checkpoint", str(out / "checkpoint.qirc"), "--out", str(tmp_path / "e.csv")]
    )
    assert code == 3


def test_cli_export_and_stats(tmp_path, rng, capsys):
    root = toy_root(tmp_path, rng)
    cfg = run_config(tmp_path, root, bits_w=2, bits_a=2)
    out = tmp_path / "out"
    assert main(["train", "--config", str(cfg), "--out", str(out), "--seed", "2"]) == 0
    packed = tmp_path / "packed.qirc"
    assert main(["export", "--checkpoint", str(out / "checkpoint.qirc"), "--out", str(packed)]) == 0
    assert packed.is_file()
    printed = capsys.readouterr().out
    assert "down" in printed

    # exporting a full-precision checkpoint is refused
    fp_cfg = run_config(tmp_path, root)
    fp_out = tmp_path / "fp"
    main(["train", "--config", str(fp_cfg), "--out", str(fp_out), "--seed", "2"])
    assert main(["export", "--checkpoint", str(fp_out / "checkpoint.qirc"), "--out", str(packed)]) == 2

    stats_out = tmp_path / "stats"
    code = main(
        [
            "stats",
            "--config", str(cfg),
            "--checkpoint", str(out / "checkpoint.qirc"),
            "--out", str(stats_out),
            "--select", "ln1_out",
        ]
    )
    assert code == 0
    hist = (tmp_path / "stats_hist.csv").read_text().strip().splitlines()
    assert hist[0] == "site,bin,lo,hi,count"
    counts = [int(r.split(",")[4]) for r in hist[1:]]
    assert len(counts) == 256  # one selected site
    phi = (tmp_path / "stats_phi.csv").read_text().strip().splitlines()
    assert phi[0] == "site,batch,mu,sigma,min,max"
    assert len(phi) > 1


def test_cli_stats_selector_mismatch_exit_2(tmp_path, rng, capsys):
    root = toy_root(tmp_path, rng)
    cfg = run_config(tmp_path, root, bits_w=4, bits_a=4)
    out = tmp_path / "out"
    main(["train", "--config", str(cfg), "--out", str(out), "--seed", "2"])
    code = main(
        ["stats", "--config", str(cfg), "--checkpoint", str(out / "checkpoint.qirc"), "--select", "bogus_site"]
    )
    assert code == 2
    assert "available" in capsys.readouterr().err


def test_stats_histogram_conservation_and_outlier_shift(tmp_path, rng):
    # histogram machinery: counts conserve elements; an injected outlier
    # must shift the reported maximum
    net = build_model(ModelConfig(task="light_sr", scale=2, blocks=1, channels=8), seed=0)
    x = rng.uniform(0, 1, (1, 3, 8, 8))
    captured = {}

    def tap(site, value):
        captured.setdefault(site, []).append(value.reshape(-1).copy())

    net.forward(x, tap=tap)
    site = sorted(captured)[0]
    values = np.concatenate(captured[site])
    counts, edges = np.histogram(values, bins=256)
    assert counts.sum() == values.size

    phi_before, _ = Q.compute_stats(values)
    phi_after, _ = Q.compute_stats(np.append(values, 50.0))
    assert phi_after.xmax == 50.0
    assert phi_after.xmax > phi_before.xmax


def test_constant_activation_single_bin():
    values = np.full(100, 0.37)
    lo, hi = float(values.min()), float(values.max())
    if hi <= lo:
        hi = lo + 1.0
    counts, _ = np.histogram(values, bins=256, range=(lo, hi))
    assert counts[0] == 100 and counts[1:].sum() == 0


def test_cli_env_seed_override(tmp_path, rng, monkeypatch):
    root = toy_root(tmp_path, rng)
    cfg = run_config(tmp_path, root)
    out = tmp_path / "env"
    monkeypatch.setenv("QSSM_SEED", "123")
    assert main(["train", "--config", str(cfg), "--out", str(out), "--seed", "5"]) == 0
    manifest = qio.RunManifest.load(out / "manifest.json")
    assert manifest.seed == 123


def test_toy_dataset_generation_deterministic(tmp_path):
    a = make_toy_dataset(tmp_path / "a")
    b = make_toy_dataset(tmp_path / "b")
    for pa, pb in zip(a, b):
        assert pa.read_bytes() == pb.read_bytes()
