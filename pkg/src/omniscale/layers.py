"""Thin parameter-name-keyed wrappers around the nn primitives."""

from __future__ import annotations

from . import nn
from .nn import ParamStore, Tensor


def groups_for(channels: int) -> int:
    return min(8, channels)


def conv(p: ParamStore, name: str, x: Tensor) -> Tensor:
    w = p[f"{name}.w"]
    k = w.shape[-1]
    return nn.conv2d(x, w, p[f"{name}.b"], stride=1, pad=k // 2)


def linear(p: ParamStore, name: str, x) -> Tensor:
    return nn.linear(x, p[f"{name}.w"], p[f"{name}.b"])


def norm(p: ParamStore, name: str, x: Tensor, eps: float = 1e-5) -> Tensor:
    gamma = p[f"{name}.gamma"]
    return nn.group_norm(x, groups_for(gamma.shape[0]), gamma, p[f"{name}.beta"], eps)


def norm_act(p: ParamStore, name: str, x: Tensor) -> Tensor:
    return nn.silu(norm(p, name, x))


def channel_bias(x: Tensor, v: Tensor) -> Tensor:
    """Add a per-channel vector ``(N, C)`` or ``(C,)`` to every spatial site of ``x``."""
    if v.ndim == 1:
        return x + v.reshape(1, -1, 1, 1)
    return x + v.reshape(v.shape[0], v.shape[1], 1, 1)


def channel_scale(x: Tensor, v: Tensor) -> Tensor:
    if v.ndim == 1:
        return x * v.reshape(1, -1, 1, 1)
    return x * v.reshape(v.shape[0], v.shape[1], 1, 1)
