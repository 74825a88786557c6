"""Dual-branch conditional denoiser.

Generation branch: a small UNet over the latent with scale-injected ResNet
blocks, caption cross-attention and SePR attention. Fidelity branch: an image
encoder over the pre-upsampled LR condition plus a mirror of the UNet
encoder. Its per-level features pass through the scale-modulated RefineNet
and are added at the decoder skip junctions.

All tensors are batch-first ``(N, C, H, W)``; the single-sample forms of the
public functions add and strip the batch axis.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import nn
from .conditioning import (
    ScaleCondition,
    SemanticCondition,
    init_scale_networks,
    init_semantics,
    init_timestep_networks,
    modulation_params,
    scale_embed,
    timestep_embed,
)
from .errors import InvalidStateError
from .layers import channel_bias, channel_scale, conv, groups_for, linear, norm, norm_act
from .nn import ParamStore, Tensor, init_conv, init_linear, init_norm


@dataclass(frozen=True)
class UNetSpec:
    channels: tuple[int, ...] = (32, 64, 96)
    attention_levels: tuple[int, ...] = (1, 2)
    latent_channels: int = 4
    pe_dim: int = 64
    sem_dim: int = 32
    num_classes: int = 4
    imgenc_channels: tuple[int, int, int, int] = (16, 32, 64, 64)
    T: int = 1000
    scale_encoding: str = "raw"
    global_scale: bool = True
    local_mod: bool = True
    sepr: bool = True
    fidelity: bool = True
    extra: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        for c in self.channels:
            if c % groups_for(c):
                raise ValueError(f"channel count {c} not divisible by its group count")
        if any(a < 0 or a >= self.levels for a in self.attention_levels):
            raise ValueError(f"attention levels {self.attention_levels} outside [0, {self.levels})")

    @property
    def levels(self) -> int:
        return len(self.channels)

    @property
    def latent_multiple(self) -> int:
        """Latent sides must be divisible by this (UNet depth, and the 1/8 image-encoder level)."""
        return max(2 ** (self.levels - 1), 2)

    def to_dict(self) -> dict:
        d = asdict(self)
        d.pop("extra")
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "UNetSpec":
        d = dict(d)
        for k in ("channels", "attention_levels", "imgenc_channels"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(**d)

    def baseline(self) -> "UNetSpec":
        """The same UNet with every added conditioning path removed."""
        return replace(self, global_scale=False, local_mod=False, sepr=False, fidelity=False)


@dataclass
class EncoderPyramid:
    """Image-encoder features at 1/2, 1/4 and 1/8 of the condition resolution."""

    levels: list[Tensor]


@dataclass
class ControlFeatures:
    control: list[Tensor]
    refined: list[Tensor] | None = None
    injections: list[Tensor] | None = None
    pyramid: EncoderPyramid | None = None


# ------------------------------------------------------------------ building
def init_denoiser(spec: UNetSpec = UNetSpec(), seed: int = 0, store: ParamStore | None = None) -> ParamStore:
    rng = np.random.default_rng(seed)
    p = store if store is not None else ParamStore()
    ch = spec.channels
    init_semantics(p, rng, spec.num_classes, spec.sem_dim)
    init_timestep_networks(p, rng, ch, spec.pe_dim)
    init_scale_networks(p, rng, ch, spec.pe_dim, spec.global_scale, spec.local_mod and spec.fidelity)

    init_conv(p, rng, "unet.conv_in", spec.latent_channels, ch[0])
    for i, c in enumerate(ch):
        for part in ("enc", "dec"):
            _init_block(p, rng, f"unet.{part}{i}", c, spec, attn=i in spec.attention_levels)
            if spec.sepr and i in spec.attention_levels:
                _init_attn(p, rng, f"sepr.{part}{i}", c, spec.sem_dim, zero_out=True)
        if i + 1 < len(ch):
            init_conv(p, rng, f"unet.down{i}", c * 4, ch[i + 1])
            init_conv(p, rng, f"unet.up{i}", ch[i + 1], c)
    init_norm(p, "unet.out_norm", ch[0])
    init_conv(p, rng, "unet.out", ch[0], spec.latent_channels)

    if spec.fidelity:
        e = spec.imgenc_channels
        init_conv(p, rng, "imgenc.in", 3, e[0])
        init_conv(p, rng, "imgenc.d1", e[0] * 4, e[1])
        init_conv(p, rng, "imgenc.d2", e[1] * 4, e[2])
        init_conv(p, rng, "imgenc.d3", e[2] * 4, e[3])
        init_conv(p, rng, "imgenc.out2", e[2], ch[0], k=1)
        init_conv(p, rng, "imgenc.out3", e[3], ch[0], k=1)
        for n in (1, 2, 3):
            init_conv(p, rng, f"torgb.{n}", e[n], 3, k=1)
        init_conv(p, rng, "ctrl.conv_in", spec.latent_channels, ch[0])
        for i, c in enumerate(ch):
            _init_block(p, rng, f"ctrl.enc{i}", c, spec, attn=i in spec.attention_levels)
            if i + 1 < len(ch):
                init_conv(p, rng, f"ctrl.down{i}", c * 4, ch[i + 1])
            init_conv(p, rng, f"refine.{i}.out", c, c, k=1, zero=True)
    return p


def _init_block(p, rng, name, c, spec: UNetSpec, attn: bool) -> None:
    init_norm(p, f"{name}.res.norm1", c)
    init_conv(p, rng, f"{name}.res.conv1", c, c)
    init_norm(p, f"{name}.res.norm2", c)
    init_conv(p, rng, f"{name}.res.conv2", c, c, gain=0.5)
    if attn:
        init_norm(p, f"{name}.xattn.norm", c)
        _init_attn(p, rng, f"{name}.xattn", c, spec.sem_dim, zero_out=False)


def _init_attn(p, rng, name, c, ctx_dim, zero_out: bool) -> None:
    init_linear(p, rng, f"{name}.q", c, c)
    init_linear(p, rng, f"{name}.k", ctx_dim, c)
    init_linear(p, rng, f"{name}.v", ctx_dim, c)
    init_linear(p, rng, f"{name}.out", c, c, zero=zero_out)
    if not zero_out:
        p[f"{name}.out.w"].data *= 0.5


# ------------------------------------------------------------------- blocks
def _as_batch(x: Tensor) -> tuple[Tensor, bool]:
    if x.ndim == 3:
        return x.reshape((1,) + x.shape), True
    return x, False


def scale_injected_resblock(F_u: Tensor, t, cond: ScaleCondition | None, level: int, params: ParamStore,
                            name: str | None = None, T: int = 1000) -> Tensor:
    """Residual block with timestep and scale features added between its two convs.

    ``h1 = conv(act(norm(F)))``, ``h2 = h1 + temb(t) + gscale(s)``,
    ``out = F + conv(act(norm(h2)))``. ``cond=None`` drops the scale term.
    """
    F_u = nn.as_tensor(F_u)
    F_u, squeeze = _as_batch(F_u)
    name = name or f"unet.enc{level}"
    c = F_u.shape[1]
    pe_dim = params[f"unet.temb.{level}.l2.w"].shape[0]
    temb = timestep_embed(t, level, params, T=T, pe_dim=pe_dim)
    if temb.shape[-1] != c:
        raise InvalidStateError(f"level {level}: timestep embedding width {temb.shape[-1]} != {c} channels")
    h = conv(params, f"{name}.res.conv1", norm_act(params, f"{name}.res.norm1", F_u))
    h = channel_bias(h, temb)
    if cond is not None:
        gs = scale_embed(level, cond, "global", params)
        if gs.shape[-1] != c:
            raise InvalidStateError(f"level {level}: scale embedding width {gs.shape[-1]} != {c} channels")
        h = channel_bias(h, gs)
    out = F_u + conv(params, f"{name}.res.conv2", norm_act(params, f"{name}.res.norm2", h))
    return out.reshape(out.shape[1:]) if squeeze else out


def _tokens(x: Tensor) -> Tensor:
    n, c, h, w = x.shape
    return x.reshape(n, c, h * w).transpose(0, 2, 1)


def _untokens(tok: Tensor, shape) -> Tensor:
    n, c, h, w = shape
    return tok.transpose(0, 2, 1).reshape(n, c, h, w)


def _cross_attention(x_tok: Tensor, ctx: Tensor, params: ParamStore, name: str) -> Tensor:
    q = linear(params, f"{name}.q", x_tok)
    k = linear(params, f"{name}.k", ctx)
    v = linear(params, f"{name}.v", ctx)
    return linear(params, f"{name}.out", nn.attention(q, k, v))


def _batched_ctx(ctx: Tensor, n: int) -> Tensor:
    if ctx.ndim == 2:
        ctx = ctx.reshape((1,) + ctx.shape)
    if ctx.shape[0] != n:
        if ctx.shape[0] != 1:
            raise ValueError(f"context batch {ctx.shape[0]} does not match feature batch {n}")
        ctx = nn.concat([ctx] * n, axis=0)
    return ctx


def caption_attention(F_U: Tensor, sem: SemanticCondition, name: str, params: ParamStore) -> Tensor:
    n = F_U.shape[0]
    tok = _tokens(norm(params, f"{name}.xattn.norm", F_U))
    ctx = _batched_ctx(sem.caption_tokens, n)
    return F_U + _untokens(_cross_attention(tok, ctx, params, f"{name}.xattn"), F_U.shape)


def sepr_attention(F_U: Tensor, sem: SemanticCondition, level: int, params: ParamStore,
                   name: str | None = None) -> Tensor:
    """Attend from UNet feature tokens to the fine-grained semantic tokens.

    ``Q = W_Q F_U``, ``K = W_K F_sem``, ``V = W_V F_sem``; the attended values
    return through a zero-initialized output projection as a residual.
    """
    if sem is None or sem.fine_features is None:
        raise ValueError("SePR attention needs fine-grained semantic features")
    F_U = nn.as_tensor(F_U)
    F_U, squeeze = _as_batch(F_U)
    name = name or f"sepr.enc{level}"
    if f"{name}.q.w" not in params:
        raise ValueError(f"level {level} has no SePR attention parameters ({name})")
    ctx = _batched_ctx(sem.fine_features, F_U.shape[0])
    out = F_U + _untokens(_cross_attention(_tokens(F_U), ctx, params, name), F_U.shape)
    return out.reshape(out.shape[1:]) if squeeze else out


def sepr_attention_weights(F_U: Tensor, sem: SemanticCondition, params: ParamStore, name: str) -> np.ndarray:
    """Attention matrix of one SePR layer, for inspection."""
    F_U, _ = _as_batch(nn.as_tensor(F_U))
    ctx = _batched_ctx(sem.fine_features, F_U.shape[0])
    q = linear(params, f"{name}.q", _tokens(F_U))
    k = linear(params, f"{name}.k", ctx)
    return nn.attention_weights(q, k)


def _block(h: Tensor, t, cond, sem, level: int, params: ParamStore, name: str, spec: UNetSpec,
           sepr_name: str | None) -> Tensor:
    h = scale_injected_resblock(h, t, cond if spec.global_scale else None, level, params, name, spec.T)
    if level in spec.attention_levels:
        h = caption_attention(h, sem, name, params)
        if spec.sepr and sepr_name is not None:
            h = sepr_attention(h, sem, level, params, sepr_name)
    return h


def _down(params, name, h):
    return conv(params, name, nn.space_to_depth(h, 2))


def _up(params, name, h):
    return conv(params, name, nn.upsample_nearest(h, 2))


# ------------------------------------------------------------- fidelity path
def image_encode(I_cond: Tensor, params: ParamStore) -> tuple[Tensor, EncoderPyramid]:
    """Condition image ``(N, 3, H, W)`` -> latent-resolution features and the 1/2, 1/4, 1/8 pyramid."""
    e0 = nn.silu(conv(params, "imgenc.in", I_cond))
    f1 = _down(params, "imgenc.d1", e0)
    f2 = _down(params, "imgenc.d2", nn.silu(f1))
    f3 = _down(params, "imgenc.d3", nn.silu(f2))
    out = conv(params, "imgenc.out2", nn.silu(f2)) + nn.upsample_nearest(
        conv(params, "imgenc.out3", nn.silu(f3)), 2
    )
    return out, EncoderPyramid([f1, f2, f3])


def fidelity_encode(I_cond, t, cond: ScaleCondition, params: ParamStore, z_t=None,
                    sem: SemanticCondition | None = None, spec: UNetSpec = UNetSpec()) -> ControlFeatures:
    """Run the image encoder and the control-encoder mirror of the UNet encoder."""
    I_cond, squeeze = _as_batch(nn.as_tensor(I_cond))
    n, _, H, W = I_cond.shape
    if z_t is None:
        raise ValueError("fidelity_encode needs the noisy latent z_t")
    z_t, _ = _as_batch(nn.as_tensor(z_t))
    h, w = z_t.shape[-2:]
    if H % h or W % w or H // h != W // w or (H // h) & (H // h - 1) or H // h < 2:
        raise ValueError(f"condition {H}x{W} does not sit on the latent grid {h}x{w}")
    feat, pyramid = image_encode(I_cond, params)
    if feat.shape[-2:] != (h, w):
        raise ValueError(f"condition {H}x{W} does not sit on the latent grid {h}x{w}")
    hc = conv(params, "ctrl.conv_in", z_t) + feat
    control = []
    for i in range(spec.levels):
        hc = _block(hc, t, cond, sem, i, params, f"ctrl.enc{i}", spec, None)
        control.append(hc)
        if i + 1 < spec.levels:
            hc = _down(params, f"ctrl.down{i}", hc)
    return ControlFeatures(control=control, pyramid=pyramid)


def refine(features: ControlFeatures, cond: ScaleCondition | None, params: ParamStore,
           local_mod: bool = True) -> ControlFeatures:
    """``gain * GroupNorm(F_c) + bias`` per level, then a zero-initialized 1x1 conv."""
    refined, injections = [], []
    for i, fc in enumerate(features.control):
        x = nn.group_norm(fc, groups_for(fc.shape[1]))
        if local_mod and cond is not None:
            gain, bias = modulation_params(i, cond, params)
            x = channel_bias(channel_scale(x, gain), bias)
        refined.append(x)
        injections.append(conv(params, f"refine.{i}.out", x))
    return ControlFeatures(features.control, refined, injections, features.pyramid)


# ------------------------------------------------------------------ denoise
def unet_forward(z_t: Tensor, t, cond, sem: SemanticCondition, params: ParamStore, spec: UNetSpec,
                 injections: list[Tensor] | None = None) -> Tensor:
    h = conv(params, "unet.conv_in", z_t)
    skips = []
    for i in range(spec.levels):
        h = _block(h, t, cond, sem, i, params, f"unet.enc{i}", spec, f"sepr.enc{i}")
        skips.append(h)
        if i + 1 < spec.levels:
            h = _down(params, f"unet.down{i}", h)
    for i in reversed(range(spec.levels)):
        if i + 1 < spec.levels:
            h = _up(params, f"unet.up{i}", h) + skips[i]
        if injections is not None:
            if injections[i].shape != h.shape:
                raise ValueError(f"level {i}: injection {injections[i].shape} != feature {h.shape}")
            h = h + injections[i]
        h = _block(h, t, cond, sem, i, params, f"unet.dec{i}", spec, f"sepr.dec{i}")
    return conv(params, "unet.out", norm_act(params, "unet.out_norm", h))


def check_latent(z_t: Tensor, spec: UNetSpec) -> None:
    if z_t.ndim != 4 or z_t.shape[1] != spec.latent_channels:
        raise ValueError(f"latent must be (N, {spec.latent_channels}, h, w), got {z_t.shape}")
    m = spec.latent_multiple
    if z_t.shape[2] % m or z_t.shape[3] % m:
        raise ValueError(f"latent sides {z_t.shape[2:]} must be divisible by {m} for {spec.levels} levels")


def denoise_full(z_t, t, cond: ScaleCondition, sem: SemanticCondition, I_cond, params: ParamStore,
                 spec: UNetSpec = UNetSpec()) -> tuple[Tensor, ControlFeatures | None]:
    """Batched forward returning the noise prediction and the fidelity features."""
    z_t, squeeze = _as_batch(nn.as_tensor(z_t))
    check_latent(z_t, spec)
    t = np.broadcast_to(np.asarray(t), (z_t.shape[0],))
    features = None
    injections = None
    if spec.fidelity:
        if I_cond is None:
            raise ValueError("the fidelity branch needs a condition image")
        features = fidelity_encode(I_cond, t, cond, params, z_t=z_t, sem=sem, spec=spec)
        features = refine(features, cond, params, local_mod=spec.local_mod)
        injections = features.injections
    eps = unet_forward(z_t, t, cond, sem, params, spec, injections)
    if squeeze:
        eps = eps.reshape(eps.shape[1:])
    return eps, features


def denoise(z_t, t, cond: ScaleCondition, sem: SemanticCondition, I_cond, params: ParamStore,
            spec: UNetSpec = UNetSpec()) -> Tensor:
    """Noise prediction for ``z_t`` at step ``t`` given scale, semantics and the condition image."""
    return denoise_full(z_t, t, cond, sem, I_cond, params, spec)[0]


def baseline_unet(z_t, t, sem: SemanticCondition, params: ParamStore, spec: UNetSpec = UNetSpec()) -> Tensor:
    """The bare UNet: timestep and captions only."""
    return denoise(z_t, t, None, sem, None, params, spec.baseline())


def zero_added_paths(params: ParamStore) -> None:
    """Zero the output layers of every added conditioning path."""
    for name in params.names("gscale."):
        if ".l1." in name:
            params[name].data[...] = 0
    for name in params.names("mscale."):
        if ".l1." in name:
            params[name].data[...] = 0
    for name in params.names("refine."):
        params[name].data[...] = 0
    for name in params.names("sepr."):
        if ".out." in name:
            params[name].data[...] = 0
