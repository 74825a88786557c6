"""Scale, timestep and semantic condition vectors.

Every per-level embedding network has the same shape: a sinusoidal encoding
followed by ``Linear -> SiLU -> Linear``. Newly added projections start at
zero so that the untrained conditioning paths contribute nothing.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nn
from .errors import InvalidStateError
from .layers import linear
from .nn import ParamStore, Tensor, init_linear


@dataclass(frozen=True)
class ScaleCondition:
    s: float | np.ndarray
    pe_dim: int = 64
    encoding: str = "raw"

    def __post_init__(self):
        if self.pe_dim < 2 or self.pe_dim % 2:
            raise ValueError(f"pe_dim must be even, got {self.pe_dim}")
        if np.any(np.asarray(self.s) <= 0):
            raise ValueError(f"scale must be positive, got {self.s}")
        if self.encoding not in ("raw", "log2"):
            raise ValueError(f"scale encoding must be 'raw' or 'log2', got {self.encoding!r}")

    def encode(self, dtype=np.float32) -> np.ndarray:
        s = np.asarray(self.s, dtype=np.float64)
        if self.encoding == "log2":
            s = np.log2(s)
        return nn.sinusoidal_encode(s, self.pe_dim, dtype)


@dataclass
class SemanticCondition:
    """Caption tokens ``(.., L_c, d)`` and fine-grained tokens ``(.., L_f, d)``."""

    caption_tokens: Tensor
    fine_features: Tensor
    class_id: int | np.ndarray


FAMILIES = ("global", "modulation")
_PREFIX = {"global": "gscale", "modulation": "mscale"}


def init_embed_net(p: ParamStore, rng: np.random.Generator, name: str, pe_dim: int, width: int,
                   zero_out: bool) -> None:
    init_linear(p, rng, f"{name}.l2", pe_dim, width)
    init_linear(p, rng, f"{name}.l1", width, width, zero=zero_out)


def embed_net(p: ParamStore, name: str, pe: np.ndarray) -> Tensor:
    """``Linear_1(SiLU(Linear_2(pe)))``."""
    if f"{name}.l1.w" not in p:
        raise InvalidStateError(f"missing parameters for embedding network {name!r}")
    return linear(p, f"{name}.l1", nn.silu(linear(p, f"{name}.l2", pe)))


def scale_embed(level: int, cond: ScaleCondition, family: str, params: ParamStore) -> Tensor:
    """Per-channel scale feature for one UNet level (``(C,)`` or ``(N, C)``)."""
    if family not in _PREFIX:
        raise ValueError(f"family must be one of {FAMILIES}, got {family!r}")
    return embed_net(params, f"{_PREFIX[family]}.{level}", cond.encode(params.dtype))


def timestep_embed(t, level: int, params: ParamStore, T: int = 1000, pe_dim: int = 64) -> Tensor:
    t = np.asarray(t)
    if np.any(t < 0) or np.any(t >= T):
        raise ValueError(f"timestep {t} outside [0, {T})")
    return embed_net(params, f"unet.temb.{level}", nn.sinusoidal_encode(t, pe_dim, params.dtype))


def modulation_params(level: int, cond: ScaleCondition, params: ParamStore) -> tuple[Tensor, Tensor]:
    """Channel-wise ``(gain, bias)`` with ``gain = 1 + Linear_g(F)``, ``bias = Linear_b(F)``."""
    f = scale_embed(level, cond, "modulation", params)
    gain = linear(params, f"refine.{level}.gain", f) + 1.0
    bias = linear(params, f"refine.{level}.bias", f)
    return gain, bias


def init_scale_networks(p: ParamStore, rng: np.random.Generator, channels, pe_dim: int,
                        global_scale: bool = True, local_mod: bool = True) -> None:
    """Global and modulation scale networks plus the gain/bias heads.

    Global networks end in a zero layer. Modulation networks keep a random
    last layer; zero gain/bias heads already make them neutral, and zeroing
    both would leave no gradient path into either.
    """
    for i, c in enumerate(channels):
        if global_scale:
            init_embed_net(p, rng, f"gscale.{i}", pe_dim, c, zero_out=True)
        if local_mod:
            init_embed_net(p, rng, f"mscale.{i}", pe_dim, c, zero_out=False)
            init_linear(p, rng, f"refine.{i}.gain", c, c, zero=True)
            init_linear(p, rng, f"refine.{i}.bias", c, c, zero=True)


def init_timestep_networks(p: ParamStore, rng: np.random.Generator, channels, pe_dim: int) -> None:
    for i, c in enumerate(channels):
        init_embed_net(p, rng, f"unet.temb.{i}", pe_dim, c, zero_out=False)


# ----------------------------------------------------------------- semantics
CAPTION_TOKENS = 4
FINE_TOKENS = 8


def null_class(params: ParamStore) -> int:
    """Index of the reserved unconditional entry (the last table row)."""
    return params["sem.caption"].shape[0] - 1


def init_semantics(p: ParamStore, rng: np.random.Generator, num_classes: int, dim: int) -> None:
    p.add("sem.caption", rng.normal(0.0, 1.0, (num_classes + 1, CAPTION_TOKENS, dim)))
    p.add("sem.fine", rng.normal(0.0, 1.0, (num_classes + 1, FINE_TOKENS, dim)))


def semantics_for(class_id, params: ParamStore) -> SemanticCondition:
    """Look up caption and fine-grained token tables for a class (or a batch of classes).

    Passing :func:`null_class` yields the learned unconditional tokens.
    """
    ids = np.asarray(class_id, dtype=np.int64)
    n = params["sem.caption"].shape[0]
    if np.any(ids < 0) or np.any(ids >= n):
        raise ValueError(f"class id {class_id} outside [0, {n})")
    return SemanticCondition(
        nn.embedding(params["sem.caption"], ids),
        nn.embedding(params["sem.fine"], ids),
        class_id,
    )
