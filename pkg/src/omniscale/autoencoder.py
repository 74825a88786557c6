"""Deterministic convolutional autoencoder used as the frozen latent codec."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from . import nn
from .imaging import Image, random_crop
from .layers import conv
from .nn import AdamW, ParamStore, Tensor, init_conv, no_grad

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class AutoencoderSpec:
    downsample_factor: int = 4
    latent_channels: int = 4
    base_channels: int = 32

    def __post_init__(self):
        f = self.downsample_factor
        if f < 1 or f & (f - 1):
            raise ValueError(f"downsample_factor must be a power of two, got {f}")
        if self.latent_channels < 1 or self.base_channels < 1:
            raise ValueError("channel counts must be >= 1")

    @property
    def stages(self) -> int:
        return int(math.log2(self.downsample_factor))

    def width(self, stage: int) -> int:
        return self.base_channels * min(2 ** stage, 2)


def _init_res(p: ParamStore, rng: np.random.Generator, name: str, c: int) -> None:
    init_conv(p, rng, f"{name}.c1", c, c)
    init_conv(p, rng, f"{name}.c2", c, c, gain=0.5)


def _res(p: ParamStore, name: str, x: Tensor) -> Tensor:
    return x + conv(p, f"{name}.c2", nn.silu(conv(p, f"{name}.c1", x)))


def init_autoencoder(spec: AutoencoderSpec = AutoencoderSpec(), seed: int = 0,
                     store: ParamStore | None = None) -> ParamStore:
    """Norm-free codec: normalization over space would discard absolute colour."""
    rng = np.random.default_rng(seed)
    p = store if store is not None else ParamStore()
    cin = 3
    for i in range(spec.stages):
        cout = spec.width(i)
        init_conv(p, rng, f"ae.enc.down{i}", cin * 4, cout)
        cin = cout
    top = spec.width(spec.stages - 1)
    _init_res(p, rng, "ae.enc.mid", top)
    init_conv(p, rng, "ae.enc.out", top, spec.latent_channels)

    init_conv(p, rng, "ae.dec.in", spec.latent_channels, top)
    _init_res(p, rng, "ae.dec.mid", top)
    for i in reversed(range(1, spec.stages)):
        init_conv(p, rng, f"ae.dec.up{i}", spec.width(i), spec.width(i - 1))
        _init_res(p, rng, f"ae.dec.res{i}", spec.width(i - 1))
    init_conv(p, rng, "ae.dec.out", spec.width(0), 3 * 4)
    return p


def encode_tensor(x: Tensor, p: ParamStore, spec: AutoencoderSpec) -> Tensor:
    """``(N, 3, H, W)`` signed pixels -> ``(N, latent, H/f, W/f)``."""
    h, w = x.shape[-2:]
    f = spec.downsample_factor
    if h % f or w % f:
        raise ValueError(f"image size {h}x{w} not divisible by downsample factor {f}")
    for i in range(spec.stages):
        x = nn.silu(conv(p, f"ae.enc.down{i}", nn.space_to_depth(x, 2)))
    x = _res(p, "ae.enc.mid", x)
    return conv(p, "ae.enc.out", x)


def decode_tensor(z: Tensor, p: ParamStore, spec: AutoencoderSpec) -> Tensor:
    """Latent -> signed pixels, unclamped (the training path)."""
    x = nn.silu(conv(p, "ae.dec.in", z))
    x = _res(p, "ae.dec.mid", x)
    for i in reversed(range(1, spec.stages)):
        x = nn.silu(conv(p, f"ae.dec.up{i}", nn.upsample_nearest(x, 2)))
        x = _res(p, f"ae.dec.res{i}", x)
    return nn.depth_to_space(conv(p, "ae.dec.out", x), 2)


def encode(img: Image, params: ParamStore, spec: AutoencoderSpec = AutoencoderSpec()) -> np.ndarray:
    """Signed image -> latent array ``(latent_channels, H/f, W/f)``."""
    x = img.to_signed().to_chw(params.dtype)[None]
    with no_grad():
        return encode_tensor(Tensor(x), params, spec).data[0]


def decode(z: np.ndarray, params: ParamStore, spec: AutoencoderSpec = AutoencoderSpec()) -> Image:
    z = np.asarray(z, dtype=params.dtype)
    if z.ndim != 3 or z.shape[0] != spec.latent_channels:
        raise ValueError(f"latent must be ({spec.latent_channels}, h, w), got {z.shape}")
    with no_grad():
        out = decode_tensor(Tensor(z[None]), params, spec).data[0]
    return Image.from_chw(np.clip(out, -1.0, 1.0), "signed")


def reconstruction_loss(x: Tensor, p: ParamStore, spec: AutoencoderSpec,
                        latent_penalty: float = 0.0) -> Tensor:
    z = encode_tensor(x, p, spec)
    loss = nn.mse(decode_tensor(z, p, spec), x)
    if latent_penalty:
        # keeps latent channels centred near zero without a KL term
        loss = loss + nn.mse(z, np.zeros(z.shape, dtype=z.dtype)) * latent_penalty
    return loss


def _batch(corpus, rng: np.random.Generator, batch: int, crop: int) -> np.ndarray:
    picks = rng.integers(len(corpus), size=batch)
    imgs = []
    for i in picks:
        img = corpus[int(i)][0] if isinstance(corpus[int(i)], tuple) else corpus[int(i)]
        patch = random_crop(img, crop, rng).to_signed().to_chw()
        if rng.random() < 0.5:
            patch = patch[:, :, ::-1]
        imgs.append(patch)
    return np.ascontiguousarray(np.stack(imgs))


def pretrain_autoencoder(corpus, steps: int, seed: int = 0, spec: AutoencoderSpec = AutoencoderSpec(),
                         lr: float = 2e-3, batch: int = 8, crop: int = 32, latent_penalty: float = 1e-3,
                         history: list | None = None) -> ParamStore:
    """Fit the codec by L2 reconstruction on random crops; returns frozen weights."""
    if not corpus:
        raise ValueError("corpus is empty")
    p = init_autoencoder(spec, seed)
    rng = np.random.default_rng([seed, 1])
    opt = AdamW(p, lr=lr)
    for step in range(steps):
        opt.lr = lr * min(1.0, 0.5 * (1 + math.cos(math.pi * step / steps)) + 0.05)
        x = Tensor(_batch(corpus, rng, batch, crop))
        loss = reconstruction_loss(x, p, spec, latent_penalty)
        loss.backward()
        opt.step()
        if history is not None:
            history.append(float(loss.data))
        if step % 200 == 0:
            log.info("ae step %d loss %.5f", step, float(loss.data))
    p.set_trainable("ae.", False)
    return p


def latent_stats(corpus, params: ParamStore, spec: AutoencoderSpec = AutoencoderSpec(),
                 crop: int = 32, n: int = 64, seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Per-channel mean and std of latents over random crops."""
    rng = np.random.default_rng(seed)
    x = _batch(corpus, rng, n, crop)
    with no_grad():
        z = encode_tensor(Tensor(x.astype(params.dtype)), params, spec).data
    return z.mean(axis=(0, 2, 3)), z.std(axis=(0, 2, 3))
