"""Restoration networks built from residual state-space blocks, and their
quantized counterparts: RFA on every body projection/convolution weight, DLS
at the designated activation sites, shallow and head layers full-precision.
"""

from __future__ import annotations

import copy
import struct
from dataclasses import dataclass

import numpy as np

from . import quant
from . import ssm
from .io import parse_config_text, to_config_text
from . import tensor as T
from .resize import bicubic_up
from .tensor import Tensor

TASKS = ("classic_sr", "light_sr", "denoise", "jpeg_car")
FP_SENTINEL = 32
MAGIC_CHECKPOINT = b"QIRC"
CHECKPOINT_VERSION = 1


@dataclass
class ModelConfig:
    task: str
    scale: int = 1
    blocks: int = 0  # 0 resolves to the task default
    channels: int = 16
    state_size: int = 4
    bits: tuple[int, int] | None = None
    reduction: int = 4

    def __post_init__(self) -> None:
        if self.task not in TASKS:
            raise ValueError(f"unknown task {self.task!r}")
        if self.task in ("denoise", "jpeg_car"):
            if self.scale != 1:
                raise ValueError(f"{self.task} requires scale 1")
        elif self.scale not in (2, 3, 4):
            raise ValueError(f"{self.task} requires scale in {{2,3,4}}")
        if self.blocks == 0:
            self.blocks = 4 if self.task == "light_sr" else 6
        if self.blocks < 1 or self.channels < 1 or self.state_size < 1:
            raise ValueError("blocks, channels and state_size must be positive")
        if self.bits is not None:
            w, a = self.bits
            ok = {2, 4, 8, FP_SENTINEL}
            if w not in ok or a not in ok:
                raise ValueError("bit-widths must be one of 2/4/8 (or 32 for full precision)")

    def to_dict(self) -> dict:
        d = {
            "task": self.task,
            "scale": self.scale,
            "blocks": self.blocks,
            "channels": self.channels,
            "state_size": self.state_size,
            "reduction": self.reduction,
        }
        if self.bits is not None:
            d["bits_w"], d["bits_a"] = self.bits
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        bits = None
        if "bits_w" in d:
            bits = (int(d["bits_w"]), int(d["bits_a"]))
        return cls(
            task=d["task"],
            scale=int(d.get("scale", 1)),
            blocks=int(d.get("blocks", 0)),
            channels=int(d.get("channels", 16)),
            state_size=int(d.get("state_size", 4)),
            bits=bits,
            reduction=int(d.get("reduction", 4)),
        )


class QuantEnv:
    """Per-model quantizer registry.

    modes: ``dls_rfa`` (the learnable quantizers), ``static`` (min-max STE
    baseline), ``frozen`` (weights already on-grid, used as-is).
    """

    def __init__(self, mode: str, w_bits: int, a_bits: int):
        if mode not in ("dls_rfa", "static", "frozen"):
            raise ValueError(f"unknown quantization mode {mode!r}")
        self.mode = mode
        self.w_bits = w_bits
        self.a_bits = a_bits
        self.weight_q: dict[str, quant.RFAParams] = {}
        self.act_q: dict[str, quant.DLSParams | quant.UniformQuantConfig] = {}
        self.dls_strategy = "mu3sigma_mu"

    def quantize_weight(self, name: str, w: Tensor) -> Tensor:
        if name not in self.weight_q:
            return w
        if self.mode == "dls_rfa":
            return quant.rfa_quantize(w, self.weight_q[name])
        if self.mode == "static":
            cfg = quant.minmax_config(w.data, self.w_bits)
            return quant.quantize_uniform_ste(w, cfg)
        return w  # frozen: latent weights are the quantized weights

    def quantize_act(self, site: str, t: Tensor) -> Tensor:
        q = self.act_q.get(site)
        if q is None:
            return t
        if isinstance(q, quant.DLSParams):
            return quant.dls_quantize(t, q)
        return quant.quantize_uniform_ste(t, q)

    def parameters(self):
        if self.mode == "dls_rfa":
            for name in sorted(self.weight_q):
                yield f"{name}.rfa.thresholds", self.weight_q[name].thresholds
            for site in sorted(self.act_q):
                yield f"{site}.dls.w1", self.act_q[site].w1
                yield f"{site}.dls.w2", self.act_q[site].w2

    def project(self) -> None:
        if self.mode == "dls_rfa":
            for p in self.weight_q.values():
                quant.project_thresholds(p)


class RestorationNet:
    """Shallow conv -> RSSB body with end conv and feature residual -> head
    (pixel-shuffle upsampler for SR, plain conv otherwise) + global residual."""

    def __init__(self, cfg: ModelConfig, seed: int):
        self.cfg = cfg
        self.qenv: QuantEnv | None = None
        rng = np.random.default_rng(seed)
        c = cfg.channels
        self.shallow = ssm.Conv(rng, 3, c, 3, "shallow")
        self.body = [
            ssm.RSSB(rng, c, cfg.state_size, cfg.reduction, f"body.{i}") for i in range(cfg.blocks)
        ]
        self.body_end = ssm.Conv(rng, c, c, 3, "body_end")
        out_ch = 3 * cfg.scale * cfg.scale if cfg.scale > 1 else 3
        self.head = ssm.Conv(rng, c, out_ch, 3, "head")

    # -- structure ------------------------------------------------------------
    def named_params(self):
        yield from self.shallow.named_params()
        for block in self.body:
            yield from block.named_params()
        yield from self.body_end.named_params()
        yield from self.head.named_params()
        if self.qenv is not None:
            yield from self.qenv.parameters()

    def body_weight_names(self) -> list[str]:
        names = []
        for block in self.body:
            names.extend(block.weight_names())
        names.append(self.body_end.name)
        return names

    def act_sites(self) -> list[str]:
        sites = []
        for block in self.body:
            sites.extend(block.act_sites())
        return sites

    def rfa_sites(self) -> list[str]:
        return sorted(self.qenv.weight_q) if self.qenv else []

    def dls_sites(self) -> list[str]:
        return sorted(self.qenv.act_q) if self.qenv else []

    def _weight_tensors(self) -> dict[str, Tensor]:
        out = {}
        for name, p in self.named_params():
            if name.endswith(".w"):
                out[name[:-2]] = p
        return out

    # -- forward ----------------------------------------------------------------
    def forward(self, img, tap=None) -> Tensor:
        x = img if isinstance(img, Tensor) else Tensor(img)
        squeeze = x.data.ndim == 3
        if squeeze:
            x = T.reshape(x, (1, *x.shape))
        b, c, h, w = x.shape
        if c != 3:
            raise ValueError("expected a 3-channel image")
        if h < 8 or w < 8:
            raise ValueError("spatial extent must be at least 8")
        if x.data.min() < 0.0 or x.data.max() > 1.0:
            raise ValueError("input values must be pre-normalized to [0, 1]")

        ctx = ssm.ForwardCtx(qenv=self.qenv, tap=tap)
        f0 = self.shallow.forward(x, ctx)
        f = f0
        for block in self.body:
            f = block.forward(f, ctx)
        f = self.body_end.forward(f, ctx) + f0
        s = self.cfg.scale
        if s > 1:
            up = _pixel_shuffle(self.head.forward(f, ctx), s)
            base = Tensor(bicubic_up(x.data, s))
            out = up + base
        else:
            out = self.head.forward(f, ctx) + x
        return T.select(out, 0, axis=0) if squeeze else out


def _pixel_shuffle(t: Tensor, s: int) -> Tensor:
    b, c, h, w = t.shape
    c0 = c // (s * s)
    t = T.reshape(t, (b, c0, s, s, h, w))
    t = T.permute(t, (0, 1, 4, 2, 5, 3))
    return T.reshape(t, (b, c0, h * s, w * s))


def build_model(cfg: ModelConfig, seed: int) -> RestorationNet:
    return RestorationNet(cfg, seed)


def forward(net: RestorationNet, img) -> Tensor:
    return net.forward(img)


def quantize_model(
    net: RestorationNet,
    w_bits: int,
    a_bits: int,
    calib_batch: np.ndarray,
    mode: str = "dls_rfa",
    dls_strategy: str = "mu3sigma_mu",
) -> RestorationNet:
    """Wrap body weights with RFA and the designated activation sites with DLS
    (calibrated on ``calib_batch``); shallow and head stay full-precision.
    The (32, 32) sentinel returns an unwrapped full-precision copy."""
    calib_batch = np.asarray(calib_batch, dtype=np.float64)
    if calib_batch.size == 0:
        raise ValueError("calibration batch is empty")
    qnet = copy.deepcopy(net)
    qnet.qenv = None
    if w_bits == FP_SENTINEL and a_bits == FP_SENTINEL:
        qnet.cfg.bits = None
        return qnet

    captured: dict[str, list[np.ndarray]] = {}

    def tap(site: str, value: np.ndarray) -> None:
        captured.setdefault(site, []).append(value.reshape(-1))

    qnet.forward(calib_batch, tap=tap)

    env = QuantEnv(mode, w_bits, a_bits)
    env.dls_strategy = dls_strategy
    weights = qnet._weight_tensors()
    for name in qnet.body_weight_names():
        if w_bits == FP_SENTINEL:
            break
        try:
            if mode == "static":
                quant.minmax_config(weights[name].data, w_bits)  # validate range
                env.weight_q[name] = None
            else:
                env.weight_q[name] = quant.init_rfa(weights[name].data, w_bits)
        except ValueError as e:
            raise ValueError(f"calibration failed for weight {name!r}: {e}") from e
    for site in qnet.act_sites():
        if a_bits == FP_SENTINEL:
            break
        sample = np.concatenate(captured.get(site, [np.empty(0)]))
        try:
            if mode == "static":
                env.act_q[site] = quant.minmax_config(sample, a_bits)
            else:
                env.act_q[site] = quant.init_dls(sample, a_bits, dls_strategy)
        except ValueError as e:
            raise ValueError(f"calibration failed for activation site {site!r}: {e}") from e
    qnet.qenv = env
    qnet.cfg.bits = (w_bits, a_bits)
    return qnet


# -- checkpoint container (QIRC) --------------------------------------------------

def _collect_state(net: RestorationNet):
    params = list(net.named_params())
    buffers = []
    packed = []
    if net.qenv is not None:
        env = net.qenv
        if env.mode == "dls_rfa":
            for name in sorted(env.weight_q):
                buffers.append((f"{name}.rfa.levels", env.weight_q[name].levels))
        if env.mode == "static":
            for site in sorted(env.act_q):
                cfg = env.act_q[site]
                buffers.append((f"{site}.static", np.array([cfg.alpha, cfg.beta])))
        if env.mode == "frozen":
            for site in sorted(env.act_q):
                q = env.act_q[site]
                if isinstance(q, quant.DLSParams):
                    buffers.append((f"{site}.dls.w1", q.w1.data))
                    buffers.append((f"{site}.dls.w2", q.w2.data))
                else:
                    buffers.append((f"{site}.static", np.array([q.alpha, q.beta])))
            weights = net._weight_tensors()
            for name in sorted(env.weight_q):
                p = env.weight_q[name]
                pw = quant.pack_weights(weights[name].data, p)
                packed.append((name, quant.serialize_packed(pw)))
            params = [(n, p) for n, p in params if not (n.endswith(".w") and n[:-2] in env.weight_q)]
    return params, buffers, packed


def save_checkpoint(net: RestorationNet, path: str) -> None:
    meta = net.cfg.to_dict()
    if net.qenv is not None:
        meta["quant_mode"] = net.qenv.mode
        meta["bits_w"], meta["bits_a"] = net.qenv.w_bits, net.qenv.a_bits
        meta["dls_strategy"] = net.qenv.dls_strategy
    meta.update(getattr(net, "_export_meta", {}))
    params, buffers, packed = _collect_state(net)
    blob = bytearray()
    text = to_config_text(meta).encode()
    blob += struct.pack("<4sHI", MAGIC_CHECKPOINT, CHECKPOINT_VERSION, len(text))
    blob += text
    entries = [(n, p.data) for n, p in params] + buffers
    blob += struct.pack("<I", len(entries))
    for name, arr in entries:
        nb = name.encode()
        arr = np.ascontiguousarray(arr, dtype="<f8")
        blob += struct.pack("<H", len(nb)) + nb
        blob += struct.pack("<BB", 0, arr.ndim)
        blob += struct.pack(f"<{arr.ndim}I", *arr.shape)
        blob += arr.tobytes()
    blob += struct.pack("<I", len(packed))
    for name, section in packed:
        nb = name.encode()
        blob += struct.pack("<H", len(nb)) + nb
        blob += struct.pack("<I", len(section)) + section
    with open(path, "wb") as f:
        f.write(bytes(blob))


def _read_entries(blob: bytes, off: int):
    (count,) = struct.unpack_from("<I", blob, off)
    off += 4
    entries = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", blob, off)
        off += 2
        name = blob[off : off + nlen].decode()
        off += nlen
        dtype, rank = struct.unpack_from("<BB", blob, off)
        off += 2
        shape = struct.unpack_from(f"<{rank}I", blob, off)
        off += 4 * rank
        size = int(np.prod(shape)) if rank else 1
        arr = np.frombuffer(blob, dtype="<f8", count=size, offset=off).reshape(shape).astype(np.float64)
        off += 8 * size
        entries[name] = arr
    return entries, off


def load_checkpoint(path: str) -> RestorationNet:
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:4] != MAGIC_CHECKPOINT:
        raise ValueError("not a QIRC checkpoint")
    version, text_len = struct.unpack_from("<HI", blob, 4)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    off = 10
    meta = parse_config_text(blob[off : off + text_len].decode())
    off += text_len
    entries, off = _read_entries(blob, off)
    (n_packed,) = struct.unpack_from("<I", blob, off)
    off += 4
    packed = {}
    for _ in range(n_packed):
        (nlen,) = struct.unpack_from("<H", blob, off)
        off += 2
        name = blob[off : off + nlen].decode()
        off += nlen
        (slen,) = struct.unpack_from("<I", blob, off)
        off += 4
        packed[name] = quant.parse_packed(blob[off : off + slen])
        off += slen

    cfg = ModelConfig.from_dict(meta)
    mode = meta.get("quant_mode")
    net = build_model(cfg, seed=0)
    if mode is not None:
        env = QuantEnv(mode, int(meta["bits_w"]), int(meta["bits_a"]))
        env.dls_strategy = meta.get("dls_strategy", "mu3sigma_mu")
        if mode in ("dls_rfa", "frozen"):
            for name in net.body_weight_names():
                levels = entries.get(f"{name}.rfa.levels")
                thresholds = entries.get(f"{name}.rfa.thresholds")
                if mode == "frozen":
                    env.weight_q[name] = quant.RFAParams(
                        levels=packed[name].levels,
                        thresholds=Tensor(_midpoint_thresholds(packed[name].levels), requires_grad=True),
                        bits=env.w_bits,
                    )
                elif levels is not None and thresholds is not None:
                    env.weight_q[name] = quant.RFAParams(
                        levels=levels, thresholds=Tensor(thresholds, requires_grad=True), bits=env.w_bits
                    )
        if mode == "static":
            env.weight_q = {name: None for name in net.body_weight_names()}
        for site in net.act_sites():
            w1, w2 = entries.get(f"{site}.dls.w1"), entries.get(f"{site}.dls.w2")
            cfgv = entries.get(f"{site}.static")
            if w1 is not None:
                env.act_q[site] = quant.DLSParams(
                    w1=Tensor(w1, requires_grad=True), w2=Tensor(w2, requires_grad=True), bits=env.a_bits
                )
            elif cfgv is not None:
                env.act_q[site] = quant.UniformQuantConfig(env.a_bits, float(cfgv[0]), float(cfgv[1]))
        net.qenv = env
    for name, p in net.named_params():
        if name in entries:
            p.data[...] = entries[name]
    weights = net._weight_tensors()
    for name, pw in packed.items():
        weights[name].data[...] = quant.unpack_weights(pw)
    return net


def _midpoint_thresholds(levels: np.ndarray) -> np.ndarray:
    mids = (levels[:-1] + levels[1:]) / 2.0
    return np.concatenate([[levels[0] - (levels[1] - levels[0]) / 2.0], mids])


def export_frozen(net: RestorationNet, path: str, report=None) -> None:
    """Materialize the quantized body as packed level indices and write a
    frozen checkpoint whose forward uses them directly. An optional
    complexity report is embedded as accounting metadata."""
    if net.qenv is None or net.qenv.mode not in ("dls_rfa", "static"):
        raise ValueError("model is full-precision; quantize before exporting")
    frozen = copy.deepcopy(net)
    if report is not None:
        frozen._export_meta = {
            "params_full": f"{report.params_full:.1f}",
            "params_effective": f"{report.params_effective:.1f}",
            "params_reduction": f"{report.params_reduction:.4f}",
            "ops_full": f"{report.ops_full:.1f}",
            "ops_effective": f"{report.ops_effective:.1f}",
            "ops_reduction": f"{report.ops_reduction:.4f}",
        }
    env = frozen.qenv
    weights = frozen._weight_tensors()
    if env.mode == "static":
        new_q = {}
        for name in frozen.body_weight_names():
            cfg = quant.minmax_config(weights[name].data, env.w_bits)
            levels = quant.rfa_levels(
                env.w_bits,
                quantize_uniform_lo(cfg),
                quantize_uniform_hi(cfg),
            )
            new_q[name] = quant.RFAParams(
                levels=levels,
                thresholds=Tensor(_midpoint_thresholds(levels), requires_grad=True),
                bits=env.w_bits,
            )
            weights[name].data[...] = quant.quantize_uniform(weights[name].data, cfg)
        env.weight_q = new_q
    else:
        for name, p in env.weight_q.items():
            weights[name].data[...] = quant.rfa_forward(weights[name].data, p)
    env.mode = "frozen"
    save_checkpoint(frozen, path)


def quantize_uniform_lo(cfg: quant.UniformQuantConfig) -> float:
    return -(2 ** (cfg.bits - 1)) / cfg.alpha + cfg.beta


def quantize_uniform_hi(cfg: quant.UniformQuantConfig) -> float:
    return (2 ** (cfg.bits - 1) - 1) / cfg.alpha + cfg.beta
