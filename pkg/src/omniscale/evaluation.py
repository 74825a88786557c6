"""Reference metrics and the scale-grid evaluation protocol."""

from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .imaging import DegradationConfig, Image, PairSpec, bicubic_resample, center_crop, degrade, random_crop, write_png
from .pipeline import SampleRequest, SRModel, super_resolve
from .schedule import DiffusionSchedule

log = logging.getLogger(__name__)

PSNR_CAP = 100.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1, SSIM_K2 = 0.01, 0.03

DEFAULT_PAIRS: tuple[tuple[int, int], ...] = ((64, 340), (64, 512), (32, 342), (32, 512), (32, 666), (32, 768))
CSV_COLUMNS = ("scale_label", "lr_size", "hr_size", "method", "psnr_mean", "ssim_mean", "n_images")


def _check_pair(a: Image, b: Image) -> None:
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")


def psnr(a: Image, b: Image, cap: float | None = PSNR_CAP) -> float:
    """``10 log10(1 / MSE)`` on unit-range pixels; zero MSE gives ``cap`` (``inf`` when ``cap=None``)."""
    _check_pair(a, b)
    mse = float(np.mean((a.to_unit().data - b.to_unit().data) ** 2))
    if mse == 0.0:
        return math.inf if cap is None else cap
    value = 10.0 * math.log10(1.0 / mse)
    return value if cap is None else min(value, cap)


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    x = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(x**2) / (2.0 * sigma**2))
    return g / g.sum()


def _filter_valid(img: np.ndarray, g: np.ndarray) -> np.ndarray:
    k = g.size
    h, w = img.shape
    rows = np.lib.stride_tricks.sliding_window_view(img, k, axis=0) @ g        # (h-k+1, w)
    return np.lib.stride_tricks.sliding_window_view(rows, k, axis=1) @ g       # (h-k+1, w-k+1)


def ssim(a: Image, b: Image) -> float:
    """Single-scale SSIM over valid 11x11 Gaussian windows of the channel-mean image."""
    _check_pair(a, b)
    if min(a.height, a.width) < SSIM_WINDOW:
        raise ValueError(f"SSIM needs sides >= {SSIM_WINDOW}, got {a.height}x{a.width}")
    x = a.to_unit().data.mean(axis=2)
    y = b.to_unit().data.mean(axis=2)
    g = gaussian_window()
    c1, c2 = (SSIM_K1 * 1.0) ** 2, (SSIM_K2 * 1.0) ** 2
    mx, my = _filter_valid(x, g), _filter_valid(y, g)
    vx = _filter_valid(x * x, g) - mx * mx
    vy = _filter_valid(y * y, g) - my * my
    cxy = _filter_valid(x * y, g) - mx * my
    s = ((2 * mx * my + c1) * (2 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2))
    return float(s.mean())


def scale_label(lr: int, hr: int) -> str:
    return f"x{hr / lr:.1f}"


@dataclass(frozen=True)
class EvalProtocol:
    scale_pairs: tuple[tuple[int, int], ...] = DEFAULT_PAIRS
    degradation: str = "bicubic_only"
    crop: str = "random_n"
    n_images: int = 16
    steps: int = 50
    class_mode: str = "label"

    def __post_init__(self):
        object.__setattr__(self, "scale_pairs", tuple((int(l), int(h)) for l, h in self.scale_pairs))
        for lr, hr in self.scale_pairs:
            if lr < 1 or hr < lr:
                raise ValueError(f"scale pair ({lr}, {hr}) needs 1 <= lr <= hr")
        if self.crop not in ("random_n", "center"):
            raise ValueError(f"crop policy must be 'random_n' or 'center', got {self.crop!r}")
        if self.class_mode not in ("label", "auto"):
            raise ValueError(f"class mode must be 'label' or 'auto', got {self.class_mode!r}")
        if self.n_images < 1 or self.steps < 1:
            raise ValueError("n_images and steps must be >= 1")


@dataclass
class MetricRow:
    scale_label: str
    lr_size: int
    hr_size: int
    method: str
    psnr: list[float] = field(default_factory=list)
    ssim: list[float] = field(default_factory=list)
    failed: list[str] = field(default_factory=list)

    @property
    def psnr_mean(self) -> float:
        return float(np.mean(self.psnr)) if self.psnr else math.nan

    @property
    def ssim_mean(self) -> float:
        return float(np.mean(self.ssim)) if self.ssim else math.nan

    @property
    def n_images(self) -> int:
        return len(self.psnr)

    @property
    def flagged(self) -> bool:
        return bool(self.failed)


def rows_to_csv(rows: list[MetricRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for r in rows:
        w.writerow([r.scale_label, r.lr_size, r.hr_size, r.method, f"{r.psnr_mean:.6f}",
                    f"{r.ssim_mean:.6f}", r.n_images])
    return buf.getvalue()


def _eval_patches(corpus, hr: int, protocol: EvalProtocol, rng: np.random.Generator):
    picks = rng.choice(len(corpus), size=protocol.n_images, replace=len(corpus) < protocol.n_images)
    for i in picks:
        img, class_id = corpus[int(i)]
        if protocol.crop == "center":
            yield center_crop(img, hr), class_id
        else:
            yield random_crop(img, hr, rng), class_id


def _nearest(img: Image, h: int, w: int) -> Image:
    ys = np.arange(h) * img.height // h
    xs = np.arange(w) * img.width // w
    return Image(img.data[ys][:, xs], img.range_tag)


def run_eval(protocol: EvalProtocol, model: SRModel, sched: DiffusionSchedule, corpus, seed: int = 0,
             out_dir=None) -> list[MetricRow]:
    """Model and bicubic rows for every scale pair; optional CSV and LR/bicubic/model/HR grids."""
    if not corpus:
        raise ValueError("evaluation corpus is empty")
    rows: list[MetricRow] = []
    grids = {}
    for lr, hr in protocol.scale_pairs:
        label = scale_label(lr, hr)
        spec = PairSpec(hr, hr / lr, lr)
        dcfg = DegradationConfig(mode=protocol.degradation)
        model_row = MetricRow(label, lr, hr, "model")
        bic_row = MetricRow(label, lr, hr, "bicubic")
        rng = np.random.default_rng([seed, lr, hr])
        for k, (patch, class_id) in enumerate(_eval_patches(corpus, hr, protocol, rng)):
            low = degrade(patch, dcfg, spec, seed + k)
            bic = bicubic_resample(low, hr, hr)
            bic_row.psnr.append(psnr(bic, patch))
            bic_row.ssim.append(ssim(bic, patch))
            cls = class_id if protocol.class_mode == "label" else "auto"
            try:
                out = super_resolve(SampleRequest(low, size=(hr, hr), steps=protocol.steps,
                                                  seed=seed + k, class_id=cls), model, sched)
            except Exception as exc:  # keep going; the row is flagged
                log.warning("%s image %d failed: %s", label, k, exc)
                model_row.failed.append(f"{k}: {exc}")
                continue
            model_row.psnr.append(psnr(out, patch))
            model_row.ssim.append(ssim(out, patch))
            if k == 0:
                grids[label] = np.concatenate(
                    [_nearest(low, hr, hr).data, bic.data, out.data, patch.data], axis=1)
        rows += [model_row, bic_row]
        log.info("%s model %.2f dB, bicubic %.2f dB", label, model_row.psnr_mean, bic_row.psnr_mean)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "metrics.csv").write_text(rows_to_csv(rows), encoding="utf-8", newline="")
        for label, grid in grids.items():
            write_png(Image(grid), out / f"grid_{label}.png")
    return rows
