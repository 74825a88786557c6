"""Differentiable primitives with hand-written backward passes.

Spatial tensors are channels-first. ``conv2d``, ``group_norm`` and friends
accept either a single sample ``(C, H, W)`` or a batch ``(N, C, H, W)``.
"""

from __future__ import annotations

import math

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import Tensor, as_tensor, make_node, unbroadcast


def _batched(x: Tensor) -> tuple[Tensor, bool]:
    if x.ndim == 3:
        return x.reshape((1,) + x.shape), True
    if x.ndim != 4:
        raise ValueError(f"expected (C,H,W) or (N,C,H,W), got shape {x.shape}")
    return x, False


def _unbatched(y: Tensor, squeeze: bool) -> Tensor:
    return y.reshape(y.shape[1:]) if squeeze else y


# --------------------------------------------------------------------- linear
def linear(x, w, b=None) -> Tensor:
    """``x @ w + b`` over the last axis of ``x``; ``w`` is ``(in, out)``."""
    x, w = as_tensor(x), as_tensor(w)
    if x.shape[-1] != w.shape[0]:
        raise ValueError(f"linear: input dim {x.shape[-1]} does not match weight {w.shape}")
    if b is not None:
        b = as_tensor(b)
        if b.shape != (w.shape[1],):
            raise ValueError(f"linear: bias shape {b.shape} does not match weight {w.shape}")
    lead = x.shape[:-1]
    x2 = x.data.reshape(-1, w.shape[0])
    out = x2 @ w.data
    if b is not None:
        out = out + b.data
    out = out.reshape(lead + (w.shape[1],))

    def backward(g):
        g2 = g.reshape(-1, w.shape[1])
        gx = (g2 @ w.data.T).reshape(x.shape) if x.requires_grad else None
        gw = x2.T @ g2 if w.requires_grad else None
        if b is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    parents = (x, w) if b is None else (x, w, b)
    return make_node(out, parents, backward)


# ----------------------------------------------------------------- convolution
def conv_output_size(size: int, k: int, stride: int, pad: int) -> int:
    span = size + 2 * pad - k
    if span < 0 or span % stride:
        raise ValueError(
            f"conv2d: (size {size} + 2*pad {pad} - kernel {k}) / stride {stride} is not integral"
        )
    return span // stride + 1


def conv2d(x, w, b=None, stride: int = 1, pad: int = 0) -> Tensor:
    """Zero-padded cross-correlation; ``w`` is ``(C_out, C_in, kh, kw)``."""
    x, w = as_tensor(x), as_tensor(w)
    x, squeeze = _batched(x)
    n, c, h, wd = x.shape
    o, ci, kh, kw = w.shape
    if ci != c:
        raise ValueError(f"conv2d: input has {c} channels, kernel expects {ci}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise ValueError("conv2d: kernel sizes must be odd")
    ho = conv_output_size(h, kh, stride, pad)
    wo = conv_output_size(wd, kw, stride, pad)
    if b is not None:
        b = as_tensor(b)

    if kh == 1 and kw == 1 and stride == 1 and pad == 0:
        out = np.einsum("nchw,oc->nohw", x.data, w.data[:, :, 0, 0], optimize=True)
        if b is not None:
            out = out + b.data[None, :, None, None]

        def backward(g):
            w2 = w.data[:, :, 0, 0]
            gx = np.einsum("nohw,oc->nchw", g, w2, optimize=True) if x.requires_grad else None
            gw = (
                np.einsum("nohw,nchw->oc", g, x.data, optimize=True)[:, :, None, None]
                if w.requires_grad
                else None
            )
            if b is None:
                return gx, gw
            return gx, gw, g.sum(axis=(0, 2, 3))

        parents = (x, w) if b is None else (x, w, b)
        return _unbatched(make_node(out, parents, backward), squeeze)

    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    # im2col as (c*kh*kw, n*ho*wo): one GEMM for the whole batch
    cols = win.transpose(1, 4, 5, 0, 2, 3).reshape(c * kh * kw, n * ho * wo)
    wmat = w.data.reshape(o, -1)
    out = wmat @ cols
    if b is not None:
        out += b.data[:, None]
    out = out.reshape(o, n, ho, wo).transpose(1, 0, 2, 3)

    def backward(g):
        g2 = g.transpose(1, 0, 2, 3).reshape(o, n * ho * wo)
        gx = gw = None
        if w.requires_grad:
            gw = (g2 @ cols.T).reshape(w.shape)
        if x.requires_grad:
            dcols = (wmat.T @ g2).reshape(c, kh, kw, n, ho, wo)
            gxp = np.zeros((n, c) + xp.shape[2:], dtype=g.dtype)
            gview = gxp.transpose(1, 0, 2, 3)
            for i in range(kh):
                for j in range(kw):
                    gview[:, :, i : i + stride * (ho - 1) + 1 : stride, j : j + stride * (wo - 1) + 1 : stride] += dcols[:, i, j]
            gx = gxp[:, :, pad : pad + h, pad : pad + wd] if pad else gxp
        if b is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3))

    parents = (x, w) if b is None else (x, w, b)
    return _unbatched(make_node(out, parents, backward), squeeze)


# ------------------------------------------------------------------ activations
def sigmoid_np(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def silu(x) -> Tensor:
    x = as_tensor(x)
    sig = sigmoid_np(x.data)
    out = x.data * sig

    def backward(g):
        return (g * sig * (1.0 + x.data * (1.0 - sig)),)

    return make_node(out, (x,), backward)


# ---------------------------------------------------------------- normalization
def group_norm(x, groups: int, gamma=None, beta=None, eps: float = 1e-5) -> Tensor:
    """Normalize over (channels-in-group, H, W), then per-channel affine."""
    x = as_tensor(x)
    x, squeeze = _batched(x)
    n, c, h, w = x.shape
    if groups < 1 or c % groups:
        raise ValueError(f"group_norm: {c} channels not divisible into {groups} groups")
    m = (c // groups) * h * w
    xr = x.data.reshape(n, groups, m)
    mu = xr.mean(axis=2, keepdims=True)
    xc = xr - mu
    var = (xc * xc).mean(axis=2, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xc * inv).reshape(n, c, h, w)
    out = xhat
    if gamma is not None:
        gamma = as_tensor(gamma)
        out = out * gamma.data[None, :, None, None]
    if beta is not None:
        beta = as_tensor(beta)
        out = out + beta.data[None, :, None, None]

    def backward(g):
        grads = []
        dxhat = g * gamma.data[None, :, None, None] if gamma is not None else g
        if x.requires_grad:
            d = dxhat.reshape(n, groups, m)
            xh = xhat.reshape(n, groups, m)
            gx = inv * (d - d.mean(axis=2, keepdims=True) - xh * (d * xh).mean(axis=2, keepdims=True))
            grads.append(gx.reshape(n, c, h, w))
        else:
            grads.append(None)
        if gamma is not None:
            grads.append((g * xhat).sum(axis=(0, 2, 3)))
        if beta is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return grads

    parents = (x,) + tuple(p for p in (gamma, beta) if p is not None)
    return _unbatched(make_node(out, parents, backward), squeeze)


# -------------------------------------------------------------------- attention
def softmax_np(s: np.ndarray, axis: int = -1) -> np.ndarray:
    s = s - s.max(axis=axis, keepdims=True)
    e = np.exp(s)
    return e / e.sum(axis=axis, keepdims=True)


def attention_weights(q, k) -> np.ndarray:
    """Row-stochastic matrix ``softmax(q k^T / sqrt(d))`` (no graph)."""
    q = q.data if isinstance(q, Tensor) else np.asarray(q)
    k = k.data if isinstance(k, Tensor) else np.asarray(k)
    return softmax_np(q @ np.swapaxes(k, -1, -2) / math.sqrt(q.shape[-1]))


def attention(q, k, v) -> Tensor:
    """Scaled dot-product attention over the last two axes.

    Args:
      q: ``(..., n, d)`` queries.
      k: ``(..., m, d)`` keys.
      v: ``(..., m, dv)`` values.

    Returns:
      ``(..., n, dv)``; each output row is a convex combination of rows of ``v``.
    """
    q, k, v = as_tensor(q), as_tensor(k), as_tensor(v)
    if q.shape[-1] != k.shape[-1]:
        raise ValueError(f"attention: query dim {q.shape[-1]} != key dim {k.shape[-1]}")
    if k.shape[-2] != v.shape[-2]:
        raise ValueError(f"attention: {k.shape[-2]} keys but {v.shape[-2]} values")
    scale = 1.0 / math.sqrt(q.shape[-1])
    p = softmax_np((q.data @ np.swapaxes(k.data, -1, -2)) * scale)
    out = p @ v.data

    def backward(g):
        gv = np.swapaxes(p, -1, -2) @ g if v.requires_grad else None
        gq = gk = None
        if q.requires_grad or k.requires_grad:
            dp = g @ np.swapaxes(v.data, -1, -2)
            ds = p * (dp - (dp * p).sum(axis=-1, keepdims=True)) * scale
            if q.requires_grad:
                gq = ds @ k.data
            if k.requires_grad:
                gk = np.swapaxes(ds, -1, -2) @ q.data
        return (
            None if gq is None else _sum_to(gq, q.shape),
            None if gk is None else _sum_to(gk, k.shape),
            None if gv is None else _sum_to(gv, v.shape),
        )

    return make_node(out, (q, k, v), backward)


def _sum_to(g: np.ndarray, shape) -> np.ndarray:
    return unbroadcast(g, tuple(shape))


# ------------------------------------------------------------- resampling ops
def upsample_nearest(x, factor: int = 2) -> Tensor:
    x = as_tensor(x)
    x, squeeze = _batched(x)
    out = x.data.repeat(factor, axis=2).repeat(factor, axis=3)

    def backward(g):
        n, c, h, w = x.shape
        return (g.reshape(n, c, h, factor, w, factor).sum(axis=(3, 5)),)

    return _unbatched(make_node(out, (x,), backward), squeeze)


def space_to_depth(x, factor: int = 2) -> Tensor:
    """``(N, C, H, W) -> (N, C*f*f, H/f, W/f)`` lossless downsampling."""
    x = as_tensor(x)
    x, squeeze = _batched(x)
    n, c, h, w = x.shape
    if h % factor or w % factor:
        raise ValueError(f"space_to_depth: {h}x{w} not divisible by {factor}")
    y = x.reshape(n, c, h // factor, factor, w // factor, factor)
    y = y.transpose(0, 1, 3, 5, 2, 4).reshape(n, c * factor * factor, h // factor, w // factor)
    return _unbatched(y, squeeze)


def depth_to_space(x, factor: int = 2) -> Tensor:
    """Inverse of :func:`space_to_depth`."""
    x = as_tensor(x)
    x, squeeze = _batched(x)
    n, c, h, w = x.shape
    if c % (factor * factor):
        raise ValueError(f"depth_to_space: {c} channels not divisible by {factor * factor}")
    co = c // (factor * factor)
    y = x.reshape(n, co, factor, factor, h, w).transpose(0, 1, 4, 2, 5, 3)
    return _unbatched(y.reshape(n, co, h * factor, w * factor), squeeze)


def avg_pool(x, factor: int = 2) -> Tensor:
    x = as_tensor(x)
    x, squeeze = _batched(x)
    n, c, h, w = x.shape
    if h % factor or w % factor:
        raise ValueError(f"avg_pool: {h}x{w} not divisible by {factor}")
    y = x.reshape(n, c, h // factor, factor, w // factor, factor).transpose(0, 1, 2, 4, 3, 5)
    y = y.reshape(n, c, h // factor, w // factor, factor * factor).mean(axis=-1)
    return _unbatched(y, squeeze)


# ------------------------------------------------------------------- lookups
def embedding(table, idx) -> Tensor:
    """Rows of ``table`` selected by integer array ``idx``."""
    table = as_tensor(table)
    idx = np.asarray(idx, dtype=np.int64)
    out = table.data[idx]

    def backward(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, idx, g)
        return (gt,)

    return make_node(out, (table,), backward)


# ---------------------------------------------------------------- encodings
def sinusoidal_encode(s, dim: int, dtype=np.float64) -> np.ndarray:
    """Half-sin / half-cos encoding of a scalar (or a vector of scalars).

    ``out[k] = sin(s * w_k)`` and ``out[dim/2 + k] = cos(s * w_k)`` with
    ``w_k = 10000 ** (-k / (dim/2))``.
    """
    if dim < 2 or dim % 2:
        raise ValueError(f"sinusoidal_encode: dim must be even and >= 2, got {dim}")
    half = dim // 2
    freqs = 10000.0 ** (-np.arange(half, dtype=np.float64) / half)
    s = np.asarray(s, dtype=np.float64)
    phase = s[..., None] * freqs
    return np.concatenate([np.sin(phase), np.cos(phase)], axis=-1).astype(dtype)


# -------------------------------------------------------------------- losses
def mse(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ValueError(f"mse: shape mismatch {a.shape} vs {b.shape}")
    diff = a.data - b.data
    out = np.asarray((diff * diff).mean(), dtype=a.dtype)
    scale = 2.0 / diff.size

    def backward(g):
        return g * scale * diff, -g * scale * diff

    return make_node(out, (a, b), backward)


def l1(a, b) -> Tensor:
    """Mean absolute difference."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ValueError(f"l1: shape mismatch {a.shape} vs {b.shape}")
    diff = a.data - b.data
    out = np.asarray(np.abs(diff).mean(), dtype=a.dtype)
    sign = np.sign(diff) / diff.size

    def backward(g):
        return g * sign, -g * sign

    return make_node(out, (a, b), backward)
