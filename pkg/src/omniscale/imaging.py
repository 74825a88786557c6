"""Images, bicubic resampling, degradation synthesis and training-pair sampling."""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Literal

import numpy as np
from PIL import Image as PILImage

RangeTag = Literal["unit", "signed"]
RANGES: dict[str, tuple[float, float]] = {"unit": (0.0, 1.0), "signed": (-1.0, 1.0)}

MIN_LR_SIZE = 8


@dataclass
class Image:
    """``H x W x C`` float array tagged with its value range.

    ``unit`` images live in [0, 1] (pixel domain), ``signed`` in [-1, 1]
    (model domain). Construction clamps to the declared range.
    """

    data: np.ndarray
    range_tag: RangeTag = "unit"

    def __post_init__(self):
        if self.range_tag not in RANGES:
            raise ValueError(f"unknown range tag {self.range_tag!r}")
        data = np.asarray(self.data, dtype=np.float64)
        if data.ndim == 2:
            data = data[:, :, None]
        if data.ndim != 3 or data.shape[2] not in (1, 3) or data.shape[0] < 1 or data.shape[1] < 1:
            raise ValueError(f"image must be HxWxC with C in {{1,3}}, got {data.shape}")
        if not np.all(np.isfinite(data)):
            raise ValueError("image contains non-finite values")
        lo, hi = RANGES[self.range_tag]
        self.data = np.clip(data, lo, hi)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape

    def to_signed(self) -> "Image":
        if self.range_tag == "signed":
            return self
        return Image(self.data * 2.0 - 1.0, "signed")

    def to_unit(self) -> "Image":
        if self.range_tag == "unit":
            return self
        return Image((self.data + 1.0) * 0.5, "unit")

    def to_chw(self, dtype=np.float32) -> np.ndarray:
        return np.ascontiguousarray(self.data.transpose(2, 0, 1)).astype(dtype)

    @classmethod
    def from_chw(cls, arr: np.ndarray, range_tag: RangeTag) -> "Image":
        return cls(np.asarray(arr, dtype=np.float64).transpose(1, 2, 0), range_tag)


# ----------------------------------------------------------------------- PNG
def read_png(path, range_tag: RangeTag = "unit") -> Image:
    with PILImage.open(path) as im:
        mode = "L" if im.mode in ("L", "I", "I;16", "1") else "RGB"
        arr = np.asarray(im.convert(mode), dtype=np.float64)
    if range_tag == "unit":
        return Image(arr / 255.0, "unit")
    return Image(arr / 127.5 - 1.0, "signed")


def to_bytes(img: Image) -> np.ndarray:
    """Quantize to uint8: clamp, scale, round half up."""
    lo, hi = RANGES[img.range_tag]
    v = np.clip(img.data, lo, hi)
    scaled = v * 255.0 if img.range_tag == "unit" else (v + 1.0) * 127.5
    return np.floor(scaled + 0.5).clip(0, 255).astype(np.uint8)


def write_png(img: Image, path) -> None:
    b = to_bytes(img)
    arr = b[:, :, 0] if b.shape[2] == 1 else b
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    PILImage.fromarray(arr).save(path, format="PNG")


# ----------------------------------------------------------- bicubic resample
CUBIC_A = -0.5


def cubic_kernel(x: np.ndarray, a: float = CUBIC_A) -> np.ndarray:
    """Keys cubic convolution kernel; ``a = -0.5`` is Catmull-Rom."""
    x = np.abs(np.asarray(x, dtype=np.float64))
    x2, x3 = x * x, x * x * x
    near = (a + 2.0) * x3 - (a + 3.0) * x2 + 1.0
    far = a * x3 - 5.0 * a * x2 + 8.0 * a * x - 4.0 * a
    return np.where(x <= 1.0, near, np.where(x < 2.0, far, 0.0))


def resample_weights(in_size: int, out_size: int, antialias: bool = True) -> np.ndarray:
    """Dense ``(out_size, in_size)`` interpolation matrix for one axis.

    Output pixel ``i`` samples input coordinate ``(i + 0.5) * in/out - 0.5``.
    Out-of-range taps are clamped to the border pixel. When shrinking with
    ``antialias`` the kernel is stretched by the reduction factor. Rows are
    normalized to sum to one.
    """
    scale = in_size / out_size
    stretch = scale if (antialias and scale > 1.0) else 1.0
    support = 2.0 * stretch
    centers = (np.arange(out_size, dtype=np.float64) + 0.5) * scale - 0.5
    first = np.floor(centers - support).astype(np.int64) + 1
    taps = int(math.ceil(2 * support)) + 1
    idx = first[:, None] + np.arange(taps)[None, :]
    w = cubic_kernel((centers[:, None] - idx) / stretch)
    mat = np.zeros((out_size, in_size))
    rows = np.broadcast_to(np.arange(out_size)[:, None], idx.shape)
    np.add.at(mat, (rows, np.clip(idx, 0, in_size - 1)), w)
    return mat / mat.sum(axis=1, keepdims=True)


def bicubic_resample(img: Image, out_h: int, out_w: int, antialias: bool = True) -> Image:
    """Separable Catmull-Rom resize with half-pixel centers and edge clamping."""
    if out_h < 1 or out_w < 1:
        raise ValueError(f"target size must be positive, got {out_h}x{out_w}")
    if (out_h, out_w) == (img.height, img.width):
        return Image(img.data.copy(), img.range_tag)
    wy = resample_weights(img.height, out_h, antialias)
    wx = resample_weights(img.width, out_w, antialias)
    out = np.einsum("oh,hwc,pw->opc", wy, img.data, wx, optimize=True)
    return Image(out, img.range_tag)


def compute_scale(lr_size: int, hr_size: int) -> float:
    if lr_size < 1 or hr_size < 1:
        raise ValueError(f"sizes must be >= 1, got lr={lr_size}, hr={hr_size}")
    return hr_size / lr_size


def lr_size_for(hr_size: int, scale: float) -> int:
    return int(math.floor(hr_size / scale + 0.5))


def hr_size_for(lr_size: int, scale: float) -> int:
    return int(math.floor(lr_size * scale + 0.5))


# ---------------------------------------------------------------- pair specs
@dataclass(frozen=True)
class PairSpec:
    hr_size: int
    scale: float
    lr_size: int

    def __post_init__(self):
        if self.scale <= 1.0:
            raise ValueError(f"scale must exceed 1, got {self.scale}")
        if self.lr_size != lr_size_for(self.hr_size, self.scale):
            raise ValueError(
                f"lr_size {self.lr_size} != floor({self.hr_size}/{self.scale} + 0.5)"
            )

    @classmethod
    def make(cls, hr_size: int, scale: float) -> "PairSpec":
        return cls(int(hr_size), float(scale), lr_size_for(hr_size, scale))


def sample_pair_spec(
    rng_seed: int,
    hr_bounds: tuple[int, int] = (32, 512),
    scale_bounds: tuple[float, float] = (4.0, 16.0),
    multiple: int = 1,
    min_lr: int = MIN_LR_SIZE,
) -> PairSpec:
    """Draw an HR size and a continuous scale uniformly from their bounds.

    HR sizes are restricted to multiples of ``multiple``. Draws whose LR side
    would fall below ``min_lr`` are rejected and the HR size is redrawn.
    """
    hr_lo, hr_hi = int(hr_bounds[0]), int(hr_bounds[1])
    s_lo, s_hi = float(scale_bounds[0]), float(scale_bounds[1])
    if hr_lo < 1 or hr_lo > hr_hi or s_lo <= 1.0 or s_lo > s_hi or multiple < 1:
        raise ValueError(f"invalid bounds hr={hr_bounds} scale={scale_bounds}")
    sizes = np.arange(math.ceil(hr_lo / multiple) * multiple, hr_hi + 1, multiple)
    if sizes.size == 0 or lr_size_for(int(sizes[-1]), s_lo) < min_lr:
        raise ValueError(
            f"no HR size in {hr_bounds} gives an LR side >= {min_lr} for scales {scale_bounds}"
        )
    rng = np.random.default_rng(rng_seed)
    while True:
        scale = float(rng.uniform(s_lo, s_hi)) if s_hi > s_lo else s_lo
        if lr_size_for(int(sizes[-1]), scale) < min_lr:
            continue
        while True:
            hr = int(sizes[rng.integers(sizes.size)])
            if lr_size_for(hr, scale) >= min_lr:
                return PairSpec.make(hr, scale)


# --------------------------------------------------------------- degradation
@dataclass(frozen=True)
class DegradationConfig:
    blur_sigma_range: tuple[float, float] = (0.2, 1.5)
    noise_sigma_range: tuple[float, float] = (0.0, 0.02)
    quantize_levels: int | None = 64
    mode: Literal["bicubic_only", "realworld"] = "bicubic_only"

    def __post_init__(self):
        for name in ("blur_sigma_range", "noise_sigma_range"):
            lo, hi = getattr(self, name)
            if lo < 0 or lo > hi:
                raise ValueError(f"{name} must satisfy 0 <= lo <= hi, got {(lo, hi)}")
        if self.quantize_levels is not None and self.quantize_levels < 2:
            raise ValueError("quantize_levels must be >= 2 or None")
        if self.mode not in ("bicubic_only", "realworld"):
            raise ValueError(f"unknown degradation mode {self.mode!r}")


def gaussian_blur(img: Image, sigma: float) -> Image:
    if sigma <= 0:
        return img
    radius = max(1, int(math.ceil(3.0 * sigma)))
    taps = np.arange(-radius, radius + 1)
    k = np.exp(-0.5 * (taps / sigma) ** 2)
    k /= k.sum()

    def axis_matrix(n: int) -> np.ndarray:
        mat = np.zeros((n, n))
        rows = np.broadcast_to(np.arange(n)[:, None], (n, taps.size))
        cols = np.clip(np.arange(n)[:, None] + taps[None, :], 0, n - 1)
        np.add.at(mat, (rows, cols), np.broadcast_to(k, (n, taps.size)))
        return mat

    out = np.einsum("oh,hwc,pw->opc", axis_matrix(img.height), img.data, axis_matrix(img.width), optimize=True)
    return Image(out, img.range_tag)


def degrade(img: Image, cfg: DegradationConfig, spec: PairSpec, seed: int) -> Image:
    """HR patch -> LR: blur, bicubic downscale, additive noise, quantization.

    Only the resize runs in ``bicubic_only`` mode. Deterministic in ``seed``.
    """
    if img.height != spec.hr_size or img.width != spec.hr_size:
        raise ValueError(f"expected a {spec.hr_size}x{spec.hr_size} HR patch, got {img.height}x{img.width}")
    if cfg.mode == "bicubic_only":
        return bicubic_resample(img, spec.lr_size, spec.lr_size)
    rng = np.random.default_rng(seed)
    blur = rng.uniform(*cfg.blur_sigma_range)
    noise = rng.uniform(*cfg.noise_sigma_range)
    out = gaussian_blur(img, blur)
    out = bicubic_resample(out, spec.lr_size, spec.lr_size)
    lo, hi = RANGES[out.range_tag]
    data = out.data
    if noise > 0:
        data = data + rng.normal(0.0, noise * (hi - lo), data.shape)
    data = np.clip(data, lo, hi)
    if cfg.quantize_levels is not None:
        levels = cfg.quantize_levels - 1
        data = np.round((data - lo) / (hi - lo) * levels) / levels * (hi - lo) + lo
    return Image(data, out.range_tag)


# ------------------------------------------------------------ toy corpus
def _soft_step(field: np.ndarray, width: float) -> np.ndarray:
    """0/1 mask from a signed distance-like field with a ~``width`` pixel ramp."""
    return 0.5 + 0.5 * np.tanh(field / width)


def _grating(rng, n, yy, xx):
    out = np.zeros((n, n, 3))
    for _ in range(rng.integers(1, 3)):
        theta = rng.uniform(0, np.pi)
        period = rng.uniform(8.0, 18.0)
        phase = rng.uniform(0, 2 * np.pi)
        wave = np.sin(2 * np.pi * (xx * np.cos(theta) + yy * np.sin(theta)) / period + phase)
        out += wave[:, :, None] * rng.uniform(0.15, 0.3, 3)
    return 0.5 + out


def _checker(rng, n, yy, xx):
    theta = rng.uniform(0, np.pi / 2)
    cell = rng.uniform(8.0, 20.0)
    u = (xx * np.cos(theta) + yy * np.sin(theta)) / cell
    v = (-xx * np.sin(theta) + yy * np.cos(theta)) / cell
    # sin(pi u) sin(pi v) * cell/pi approximates the distance to the nearest cell edge
    field = np.sin(np.pi * u) * np.sin(np.pi * v) * cell / np.pi
    mask = _soft_step(field, rng.uniform(0.8, 1.6))
    c0, c1 = rng.uniform(0.05, 0.45, 3), rng.uniform(0.55, 0.95, 3)
    return c0 + mask[:, :, None] * (c1 - c0)


def _filtered_noise(rng, n, yy, xx):
    """Low-pass noise pushed through a soft threshold: curvy two-tone regions."""
    sigma = rng.uniform(3.0, 6.0)
    noise = Image(np.clip(rng.normal(0.0, 0.5, (n, n, 1)), -1, 1), "signed")
    field = gaussian_blur(noise, sigma).data[:, :, 0]
    field = field / (field.std() + 1e-8) * sigma
    mask = _soft_step(field, rng.uniform(0.8, 1.6))
    c0, c1 = rng.uniform(0.05, 0.5, 3), rng.uniform(0.5, 0.95, 3)
    return c0 + mask[:, :, None] * (c1 - c0)


def _blobs(rng, n, yy, xx):
    """Soft-edged elliptical blobs with gradient fills over a gradient background."""
    g = rng.normal(0, 0.003, (2, 3))
    out = rng.uniform(0.25, 0.75, 3) + (yy - n / 2)[:, :, None] * g[0] + (xx - n / 2)[:, :, None] * g[1]
    for _ in range(rng.integers(4, 9)):
        cy, cx = rng.uniform(0, n, 2)
        ry, rx = rng.uniform(n / 14, n / 5, 2)
        dist = np.sqrt(((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2)
        mask = _soft_step((1.0 - dist) * min(ry, rx), rng.uniform(0.8, 1.6))
        fill = rng.uniform(0.05, 0.95, 3) + (yy - cy)[:, :, None] * rng.normal(0, 0.004, 3)
        out = out * (1 - mask[:, :, None]) + mask[:, :, None] * fill
    return out


def _stripes(rng, n, yy, xx):
    theta = rng.uniform(0, np.pi)
    width = rng.uniform(5.0, 14.0)
    u = (xx * np.cos(theta) + yy * np.sin(theta)) / width
    mask = _soft_step(np.sin(np.pi * u) * width / np.pi, rng.uniform(0.8, 1.6))
    c0, c1 = rng.uniform(0.05, 0.5, 3), rng.uniform(0.5, 0.95, 3)
    return c0 + mask[:, :, None] * (c1 - c0)


def _rings(rng, n, yy, xx):
    cy, cx = rng.uniform(0, n, 2)
    period = rng.uniform(8.0, 18.0)
    r = np.sqrt((yy - cy) ** 2 + (xx - cx) ** 2)
    mask = _soft_step(np.sin(2 * np.pi * r / period) * period / (2 * np.pi), rng.uniform(0.8, 1.6))
    c0, c1 = rng.uniform(0.05, 0.5, 3), rng.uniform(0.5, 0.95, 3)
    return c0 + mask[:, :, None] * (c1 - c0)


TEXTURE_KINDS: dict[str, tuple] = {
    "basic": (_grating, _checker, _filtered_noise, _blobs),
    "extended": (_grating, _checker, _filtered_noise, _blobs, _stripes, _rings),
}


def num_classes(kind: str = "basic") -> int:
    if kind not in TEXTURE_KINDS:
        raise ValueError(f"unknown texture kind {kind!r}; choose from {sorted(TEXTURE_KINDS)}")
    return len(TEXTURE_KINDS[kind])


def synth_image(class_id: int, size: int, seed: int, kind: str = "basic") -> Image:
    gens = TEXTURE_KINDS[kind]
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    return Image(gens[class_id](rng, size, yy, xx), "unit")


def synth_dataset(n: int, kind: str = "basic", seed: int = 0, size: int = 128) -> list[tuple[Image, int]]:
    """``n`` procedural RGB images with their generator class ids.

    Image ``i`` depends only on ``(seed, i)``, so corpora can be generated
    in parallel by index.
    """
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    k = num_classes(kind)
    out = []
    for i in range(n):
        sub = np.random.SeedSequence([seed, i])
        class_id = int(np.random.default_rng(sub).integers(k))
        out.append((synth_image(class_id, size, int(sub.generate_state(1)[0]), kind), class_id))
    return out


def random_crop(img: Image, size: int, rng: np.random.Generator) -> Image:
    if size > img.height or size > img.width:
        raise ValueError(f"crop {size} exceeds image {img.height}x{img.width}")
    y = int(rng.integers(img.height - size + 1))
    x = int(rng.integers(img.width - size + 1))
    return Image(img.data[y : y + size, x : x + size], img.range_tag)


def center_crop(img: Image, size: int) -> Image:
    y = (img.height - size) // 2
    x = (img.width - size) // 2
    return Image(img.data[y : y + size, x : x + size], img.range_tag)
