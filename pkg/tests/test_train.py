from dataclasses import asdict

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

import qssm.tensor as T
import qssm.train as train
from qssm.io import parse_config_text, to_config_text
from qssm.model import ModelConfig, build_model
from qssm.resize import bicubic_down
from qssm.tensor import NumericError, Tape, Tensor
from tests.test_tensor import fd_check


def test_presets_field_for_field():
    p = train.PRESETS["classic_sr"]
    assert (p.batch_size, p.base_lr, p.loss, p.gt_size, p.blocks) == (4, 1e-4, "l1", 192, 6)
    p = train.PRESETS["light_sr"]
    assert (p.batch_size, p.base_lr, p.loss, p.gt_size, p.blocks) == (2, 2e-4, "l1", 192, 4)
    p = train.PRESETS["denoise"]
    assert (p.batch_size, p.base_lr, p.loss, p.gt_size, p.blocks) == (4, 1e-4, "charbonnier", 128, 6)
    p = train.PRESETS["jpeg_car"]
    assert (p.batch_size, p.base_lr, p.loss, p.gt_size, p.blocks) == (4, 1e-4, "charbonnier", 128, 6)
    for p in train.PRESETS.values():
        assert p.milestones == (10000, 15000, 17500, 18750)


def test_presets_roundtrip_config_text():
    for name, p in train.PRESETS.items():
        d = asdict(p)
        d["milestones"] = ",".join(str(m) for m in p.milestones)
        text = to_config_text(d)
        back = parse_config_text(text)
        rebuilt = train.TrainPreset(
            task=back["task"],
            batch_size=int(back["batch_size"]),
            base_lr=float(back["base_lr"]),
            loss=back["loss"],
            gt_size=int(back["gt_size"]),
            blocks=int(back["blocks"]),
            milestones=tuple(int(m) for m in back["milestones"].split(",")),
        )
        assert rebuilt == p


def test_lr_schedule_values():
    light = train.PRESETS["light_sr"]
    assert train.lr_at(0, light) == 2e-4
    assert train.lr_at(12000, light) == 1e-4
    assert train.lr_at(19000, light) == pytest.approx(2e-4 * 0.5**4)
    classic = train.PRESETS["classic_sr"]
    assert train.lr_at(0, classic) == 1e-4


def test_lr_schedule_plateaus():
    p = train.PRESETS["light_sr"]
    lrs = [train.lr_at(i, p) for i in range(0, 20001, 50)]
    assert all(a >= b for a, b in zip(lrs, lrs[1:]))
    assert len(set(lrs)) == len(p.milestones) + 1


# -- augmentation -------------------------------------------------------------------


class _FixedRng:
    def __init__(self, k):
        self.k = k

    def integers(self, n):
        return self.k


def test_augment_identity_draw(rng):
    hr = rng.uniform(0, 1, (3, 6, 6))
    out_hr, out_lr = train.augment(hr, hr.copy(), _FixedRng(0))
    np.testing.assert_array_equal(out_hr, hr)
    np.testing.assert_array_equal(out_lr, hr)


def test_augment_180_twice_is_identity(rng):
    hr = rng.uniform(0, 1, (3, 6, 6))
    once, _ = train.augment(hr, hr.copy(), _FixedRng(4))  # rot=2, flip=0
    twice, _ = train.augment(once, once.copy(), _FixedRng(4))
    np.testing.assert_array_equal(twice, hr)


def test_augment_applies_same_transform_to_both(rng):
    hr = rng.uniform(0, 1, (3, 8, 8))
    lr = bicubic_down(hr, 2)
    for k in range(8):
        out_hr, out_lr = train.augment(hr, lr, _FixedRng(k))
        np.testing.assert_allclose(bicubic_down(out_hr, 2), out_lr, atol=1e-12)


@given(st.integers(0, 7), st.integers(0, 7), st.integers(0, 1000))
def test_augment_group_closure(k1, k2, seed):
    rng = np.random.default_rng(seed)
    img = rng.uniform(0, 1, (1, 4, 4))
    a, _ = train.augment(img, img.copy(), _FixedRng(k1))
    b, _ = train.augment(a, a.copy(), _FixedRng(k2))
    matches = []
    for k in range(8):
        c, _ = train.augment(img, img.copy(), _FixedRng(k))
        matches.append(np.array_equal(b, c))
    assert any(matches)


# -- degradations --------------------------------------------------------------------


def test_degrade_zero_sigma_identity(rng):
    hr = rng.uniform(0, 1, (3, 8, 8))
    out = train.degrade(hr, train.DegradationSpec("gaussian_noise", sigma=0.0), rng)
    np.testing.assert_array_equal(out, hr)


def test_degrade_noise_statistics(rng):
    hr = np.full((3, 512, 512), 0.5)
    sigma = 25.0
    out = train.degrade(hr, train.DegradationSpec("gaussian_noise", sigma=sigma), rng)
    measured = np.std(out - hr)
    assert measured == pytest.approx(sigma / 255.0, rel=0.02)


def test_degrade_jpeg_constant_image(rng):
    hr = np.full((3, 16, 16), 0.42)
    out = train.degrade(hr, train.DegradationSpec("jpeg_like", quality=30), rng)
    # DC-only blocks stay spatially constant; the level may shift by at most
    # half a DC quantization step
    for c in range(3):
        assert np.ptp(out[c]) == pytest.approx(0.0, abs=1e-12)
    table_scale = 5000.0 / 30.0
    dc_step = np.floor((16 * table_scale + 50) / 100.0)  # top-left table entry is 16
    assert np.max(np.abs(out - hr)) <= (dc_step / 2) / 255.0 / 8.0 * 8.0 + 1e-9


def test_degrade_jpeg_reduces_detail(rng):
    hr = rng.uniform(0, 1, (3, 32, 32))
    out = train.degrade(hr, train.DegradationSpec("jpeg_like", quality=10), rng)
    assert out.shape == hr.shape
    assert not np.array_equal(out, hr)
    assert np.all((out >= 0) & (out <= 1))


def test_degrade_bicubic_shape_and_range(rng):
    hr = rng.uniform(0, 1, (3, 24, 24))
    out = train.degrade(hr, train.DegradationSpec("bicubic_down", scale=3), rng)
    assert out.shape == (3, 8, 8)
    assert np.all((out >= 0) & (out <= 1))


def test_degradation_spec_validation():
    with pytest.raises(ValueError):
        train.DegradationSpec("melt")
    with pytest.raises(ValueError):
        train.DegradationSpec("jpeg_like", quality=0)


# -- losses ------------------------------------------------------------------------


def test_losses_zero_residual(rng):
    x = Tensor(rng.uniform(0, 1, (2, 3)))
    assert train.l1_loss(x, x).item() == 0.0
    assert train.charbonnier_loss(x, x).item() == pytest.approx(1e-3, abs=1e-15)


def test_l1_constant_offset(rng):
    a = rng.uniform(0, 1, (4, 4))
    assert train.l1_loss(Tensor(a + 0.25), Tensor(a)).item() == pytest.approx(0.25, abs=1e-12)


def test_loss_shape_mismatch():
    with pytest.raises(ValueError):
        train.l1_loss(Tensor(np.zeros((2, 2))), Tensor(np.zeros((3, 3))))


def test_charbonnier_gradient_finite_difference(rng):
    pred = rng.uniform(0, 1, (3, 4))
    gt = rng.uniform(0, 1, (3, 4))
    fd_check(
        lambda p: train.charbonnier_loss(p, Tensor(gt)),
        [pred],
        rel_tol=1e-6,
        abs_tol=1e-9,
        h=1e-6,
    )


# -- optimizer and loop ----------------------------------------------------------------


def test_adam_minimizes_quadratic():
    x = Tensor(np.array([5.0, -3.0]), requires_grad=True)
    opt = train.Adam([("x", x)])
    for _ in range(800):
        with Tape() as tape:
            loss = T.sum_all(x * x)
        tape.backward(loss)
        opt.step(0.05)
        opt.zero_grad()
    assert np.all(np.abs(x.data) < 1e-2)


def symmetric_image(size=16):
    yy, xx = np.mgrid[0:size, 0:size]
    r = np.hypot(yy - (size - 1) / 2, xx - (size - 1) / 2)
    img = 0.5 + 0.4 * np.sin(r * 1.7)
    return np.clip(np.stack([img, img, img]), 0, 1)


def test_qat_zero_iterations_returns_unchanged(toy_images):
    net = build_model(ModelConfig(task="light_sr", scale=2, blocks=1, channels=8), seed=0)
    before = {n: p.data.copy() for n, p in net.named_params()}
    log = train.qat_train(net, toy_images, train.desk_preset("light_sr"), iters=0, seed=0)
    assert log == []
    for n, p in net.named_params():
        np.testing.assert_array_equal(p.data, before[n])


def test_qat_overfit_single_batch_non_increasing():
    # a dihedral-symmetric image the size of one patch makes every sampled
    # batch identical, so this is a pure optimization smoke test
    ds = [symmetric_image(16)]
    preset = train.TrainPreset("light_sr", 2, 2e-4, "l1", 16, 1, milestones=())
    net = build_model(ModelConfig(task="light_sr", scale=2, blocks=1, channels=8), seed=0)
    log = train.qat_train(net, ds, preset, iters=200, seed=0, log_every=1)
    losses = np.array([r.loss for r in log])
    ma = np.convolve(losses, np.ones(10) / 10, mode="valid")
    assert ma[-1] <= ma[0]
    assert np.all(np.diff(ma) < 0.002)  # no sustained increase


def test_qat_determinism_bitwise(toy_images):
    preset = train.TrainPreset("light_sr", 2, 2e-4, "l1", 16, 1, milestones=())
    runs = []
    for _ in range(2):
        net = build_model(ModelConfig(task="light_sr", scale=2, blocks=1, channels=8), seed=3)
        log = train.qat_train(net, toy_images, preset, iters=5, seed=3)
        runs.append((log[-1].loss, {n: p.data.copy() for n, p in net.named_params()}))
    assert runs[0][0] == runs[1][0]
    for n in runs[0][1]:
        np.testing.assert_array_equal(runs[0][1][n], runs[1][1][n])


def test_qat_aborts_on_nonfinite_with_node_name(toy_images):
    net = build_model(ModelConfig(task="light_sr", scale=2, blocks=1, channels=8), seed=0)
    net.shallow.w.data[0, 0, 0, 0] = np.nan
    preset = train.TrainPreset("light_sr", 2, 2e-4, "l1", 16, 1, milestones=())
    with pytest.raises(NumericError, match="node"):
        train.qat_train(net, toy_images, preset, iters=1, seed=0)


def test_qat_quantized_weights_stay_on_grid(toy_images, rng):
    from qssm.model import quantize_model
    import qssm.quant as Q

    net = build_model(ModelConfig(task="light_sr", scale=2, blocks=1, channels=8), seed=0)
    qnet = quantize_model(net, 4, 4, rng.uniform(0, 1, (2, 3, 16, 16)))
    preset = train.TrainPreset("light_sr", 2, 2e-4, "l1", 16, 1, milestones=())
    train.qat_train(qnet, toy_images, preset, iters=5, seed=0)
    weights = qnet._weight_tensors()
    for name, p in qnet.qenv.weight_q.items():
        w_hat = Q.rfa_forward(weights[name].data, p)
        assert set(np.unique(w_hat)).issubset(set(p.levels))
        # latent weights moved off the grid while the forward stays on it
    assert np.all(np.diff(p.thresholds.data) > 0)
