"""Inference: pixel-domain pre-upsampling, condition assembly and DDPM sampling.

Also hosts the small x4 residual upsampler used to build the condition image
and its pre-training loop.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import nn
from .autoencoder import AutoencoderSpec, decode_tensor
from .conditioning import ScaleCondition, null_class, semantics_for
from .denoiser import UNetSpec, denoise
from .errors import InvalidStateError
from .imaging import (
    DegradationConfig,
    Image,
    PairSpec,
    bicubic_resample,
    compute_scale,
    degrade,
    hr_size_for,
    random_crop,
    resample_weights,
)
from .layers import conv
from .nn import AdamW, ParamStore, Tensor, init_conv, no_grad
from .schedule import DiffusionSchedule, ddpm_jump, subsample_steps

log = logging.getLogger(__name__)

UP_FACTOR = 4


# ----------------------------------------------------------------- upsampler
@dataclass(frozen=True)
class UpsamplerSpec:
    channels: int = 48
    blocks: int = 4


def init_upsampler(spec: UpsamplerSpec = UpsamplerSpec(), seed: int = 0,
                   store: ParamStore | None = None) -> ParamStore:
    rng = np.random.default_rng(seed)
    p = store if store is not None else ParamStore()
    c = spec.channels
    init_conv(p, rng, "up.head", 3, c)
    for i in range(spec.blocks):
        init_conv(p, rng, f"up.block{i}.c1", c, c)
        init_conv(p, rng, f"up.block{i}.c2", c, c, gain=0.3)
    # zero tail: an untrained upsampler is exactly bicubic x4
    init_conv(p, rng, "up.tail", c, 3 * UP_FACTOR ** 2, zero=True)
    return p


def upsampler_blocks(p: ParamStore) -> int:
    return len({n.split(".")[1] for n in p.names("up.block")})


def _bicubic_batch(x: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bicubic resize of ``(N, C, H, W)`` arrays (same weights as :func:`bicubic_resample`)."""
    h, w = x.shape[-2:]
    if (h, w) == (out_h, out_w):
        return x.copy()
    wy = resample_weights(h, out_h).astype(x.dtype)
    wx = resample_weights(w, out_w).astype(x.dtype)
    return np.einsum("oh,nchw,pw->ncop", wy, x, wx, optimize=True)


def upsample_x4_tensor(x: Tensor, p: ParamStore) -> Tensor:
    """``(N, 3, h, w)`` signed -> ``(N, 3, 4h, 4w)``: bicubic x4 plus a learned residual."""
    h, w = x.shape[-2:]
    base = _bicubic_batch(x.data, h * UP_FACTOR, w * UP_FACTOR)
    f = conv(p, "up.head", x)
    for i in range(upsampler_blocks(p)):
        f = f + conv(p, f"up.block{i}.c2", nn.silu(conv(p, f"up.block{i}.c1", f)))
    return nn.depth_to_space(conv(p, "up.tail", nn.silu(f)), UP_FACTOR) + base


def upsample_x4(img: Image, up: ParamStore) -> Image:
    x = img.to_signed().to_chw(up.dtype)[None]
    with no_grad():
        y = upsample_x4_tensor(Tensor(x), up).data[0]
    out = Image.from_chw(np.clip(y, -1.0, 1.0), "signed")
    return out if img.range_tag == "signed" else out.to_unit()


def preupsample_array(x: np.ndarray, out_h: int, out_w: int, up: ParamStore | None) -> np.ndarray:
    """Batched pre-upsampling of signed ``(N, 3, h, w)`` arrays (the training path)."""
    h, w = x.shape[-2:]
    if out_h < h or out_w < w:
        raise ValueError(f"pre-upsampling cannot shrink {h}x{w} to {out_h}x{out_w}")
    if up is not None and out_h >= UP_FACTOR * h and out_w >= UP_FACTOR * w:
        with no_grad():
            x = np.clip(upsample_x4_tensor(Tensor(x.astype(up.dtype)), up).data, -1.0, 1.0)
    return np.clip(_bicubic_batch(x, out_h, out_w), -1.0, 1.0)


def preupsample(I_LR: Image, H_out: int, W_out: int, up: ParamStore | None) -> Image:
    """M_up (x4) followed by bicubic to ``(H_out, W_out)``.

    Targets below 4x the input, or ``up=None`` (the no-M_up ablation), take
    the plain bicubic path.
    """
    if H_out < I_LR.height or W_out < I_LR.width:
        raise ValueError(f"pre-upsampling cannot shrink {I_LR.height}x{I_LR.width} to {H_out}x{W_out}")
    if up is None or H_out < UP_FACTOR * I_LR.height or W_out < UP_FACTOR * I_LR.width:
        return bicubic_resample(I_LR, H_out, W_out)
    return bicubic_resample(upsample_x4(I_LR, up), H_out, W_out)


def _x4_batch(corpus, rng: np.random.Generator, batch: int, lr_crop: int,
              cfg: DegradationConfig) -> tuple[np.ndarray, np.ndarray]:
    spec = PairSpec.make(lr_crop * UP_FACTOR, float(UP_FACTOR))
    lr, hr = [], []
    for i in rng.integers(len(corpus), size=batch):
        img = corpus[int(i)][0]
        patch = random_crop(img, spec.hr_size, rng)
        low = degrade(patch, cfg, spec, int(rng.integers(2**31)))
        hr.append(patch.to_signed().to_chw())
        lr.append(low.to_signed().to_chw())
    return np.stack(lr), np.stack(hr)


def pretrain_upsampler(corpus, steps: int, seed: int = 0, spec: UpsamplerSpec = UpsamplerSpec(),
                       lr: float = 1e-3, batch: int = 16, lr_crop: int = 16,
                       degradation: DegradationConfig = DegradationConfig(),
                       history: list | None = None) -> ParamStore:
    """Fit M_up by mean-abs error on x4 degraded pairs; returns frozen weights."""
    if not corpus:
        raise ValueError("corpus is empty")
    p = init_upsampler(spec, seed)
    rng = np.random.default_rng([seed, 2])
    opt = AdamW(p, lr=lr)
    for step in range(steps):
        opt.lr = lr * min(1.0, 0.5 * (1 + math.cos(math.pi * step / steps)) + 0.05)
        x, y = _x4_batch(corpus, rng, batch, lr_crop, degradation)
        loss = nn.l1(upsample_x4_tensor(Tensor(x), p), y)
        loss.backward()
        opt.step()
        if history is not None:
            history.append(float(loss.data))
        if step % 200 == 0:
            log.info("upsampler step %d loss %.5f", step, float(loss.data))
    p.set_trainable("up.", False)
    return p


# ------------------------------------------------------------------- sampling
@dataclass
class SRModel:
    """Everything inference needs: weights plus the specs they were built with."""

    params: ParamStore
    unet: UNetSpec = UNetSpec()
    ae: AutoencoderSpec = AutoencoderSpec()
    latent_scale: float = 1.0
    use_mup: bool = True
    max_size: int = 1024
    meta: dict = field(default_factory=dict)

    @property
    def upsampler(self) -> ParamStore | None:
        if not self.use_mup or "up.head.w" not in self.params:
            return None
        return self.params

    @property
    def multiple(self) -> int:
        """Pixel sides must be divisible by this to land on a valid latent grid."""
        return self.ae.downsample_factor * self.unet.latent_multiple


@dataclass(frozen=True)
class SampleRequest:
    I_LR: Image
    scale: float | None = None
    size: tuple[int, int] | None = None
    steps: int = 50
    seed: int = 0
    class_id: int | str = "auto"
    cond_scale: float | None = None  # overrides the s fed to the conditioning networks

    def __post_init__(self):
        if (self.scale is None) == (self.size is None):
            raise ValueError("give exactly one of scale or size")
        if self.scale is not None and self.scale < 1.0:
            raise ValueError(f"scale must be >= 1, got {self.scale}")
        if self.steps < 1:
            raise ValueError(f"steps must be >= 1, got {self.steps}")
        if self.cond_scale is not None and self.cond_scale <= 0:
            raise ValueError(f"cond_scale must be positive, got {self.cond_scale}")

    def resolve(self) -> tuple[int, int, float]:
        """Output ``(H, W)`` and the conditioning scale."""
        h, w = self.I_LR.height, self.I_LR.width
        if self.size is not None:
            H, W = int(self.size[0]), int(self.size[1])
            if H < h or W < w:
                raise ValueError(f"target {H}x{W} is smaller than the input {h}x{w}")
            return H, W, compute_scale(h, H)
        return hr_size_for(h, self.scale), hr_size_for(w, self.scale), float(self.scale)


def _reflect_pad(img: np.ndarray, H: int, W: int) -> np.ndarray:
    """Pad ``(C, h, w)`` at the bottom/right to ``(C, H, W)`` by reflection."""
    _, h, w = img.shape
    while img.shape[1] < H or img.shape[2] < W:
        ph = min(H - img.shape[1], img.shape[1] - 1)
        pw = min(W - img.shape[2], img.shape[2] - 1)
        if ph <= 0 and pw <= 0:
            mode = "edge"
            ph, pw = H - img.shape[1], W - img.shape[2]
        else:
            mode = "reflect"
        img = np.pad(img, ((0, 0), (0, max(ph, 0)), (0, max(pw, 0))), mode=mode)
    return img


def _check_loaded(model: SRModel | None) -> None:
    if model is None or model.params is None or "unet.conv_in.w" not in model.params \
            or "ae.dec.out.w" not in model.params:
        raise InvalidStateError("super_resolve needs a loaded checkpoint (denoiser and autoencoder)")


def super_resolve(req: SampleRequest, model: SRModel, sched: DiffusionSchedule) -> Image:
    """``I_HR' = Phi(I_LR, s)``: condition, sample the latent from noise, decode, crop."""
    _check_loaded(model)
    H, W, s = req.resolve()
    if req.cond_scale is not None:
        s = float(req.cond_scale)
    if max(H, W) > model.max_size:
        raise ValueError(f"output {H}x{W} exceeds the configured maximum side {model.max_size}")
    p, spec = model.params, model.unet
    m = model.multiple
    Hp, Wp = -(-H // m) * m, -(-W // m) * m

    cond_img = preupsample(req.I_LR.to_unit(), H, W, model.upsampler).to_signed()
    I_cond = _reflect_pad(cond_img.to_chw(p.dtype), Hp, Wp)[None]
    class_id = null_class(p) if req.class_id == "auto" else int(req.class_id)
    sem = semantics_for(class_id, p)
    cond = ScaleCondition(s, spec.pe_dim, spec.scale_encoding)

    f = model.ae.downsample_factor
    rng = np.random.default_rng(req.seed)
    z = rng.standard_normal((1, spec.latent_channels, Hp // f, Wp // f)).astype(p.dtype)
    ladder = subsample_steps(sched.T, req.steps)
    with no_grad():
        for i, t in enumerate(ladder):
            t_prev = ladder[i + 1] if i + 1 < len(ladder) else -1
            eps = denoise(Tensor(z), t, cond, sem, Tensor(I_cond), p, spec).data
            noise = rng.standard_normal(z.shape).astype(p.dtype) if t_prev >= 0 else np.zeros_like(z)
            z = ddpm_jump(z, eps, t, t_prev, noise, sched)
        x = decode_tensor(Tensor(z / np.asarray(model.latent_scale, p.dtype)), p, model.ae).data[0]
    out = Image.from_chw(np.clip(x[:, :H, :W], -1.0, 1.0), "signed")
    return out.to_unit()
