"""Losses, the multi-resolution training loop and checkpoint serialization."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import nn
from .autoencoder import AutoencoderSpec, encode_tensor
from .conditioning import ScaleCondition, null_class, semantics_for
from .denoiser import EncoderPyramid, UNetSpec, denoise_full
from .imaging import DegradationConfig, Image, compute_scale, degrade, random_crop, resample_weights, sample_pair_spec
from .errors import CorruptCheckpointError, TrainingDivergenceError
from .layers import conv
from .nn import AdamW, ParamStore, Tensor, no_grad
from .pipeline import SRModel, preupsample_array
from .schedule import DiffusionSchedule, add_noise, make_schedule

log = logging.getLogger(__name__)

LQA_LEVELS = (2, 4, 8)


# -------------------------------------------------------------------- losses
def _downsample_targets(hr: np.ndarray, factor: int) -> np.ndarray:
    h, w = hr.shape[-2:]
    if h % factor or w % factor:
        raise ValueError(f"HR size {h}x{w} is not divisible by {factor}")
    wy = resample_weights(h, h // factor).astype(hr.dtype)
    wx = resample_weights(w, w // factor).astype(hr.dtype)
    return np.einsum("oh,nchw,pw->ncop", wy, hr, wx, optimize=True)


def lqa_loss(pyramid: EncoderPyramid, I_HR, params: ParamStore) -> Tensor:
    """Sum over the 1/2, 1/4, 1/8 levels of the mean-abs gap between toRGB(F_e) and the downsampled HR.

    ``I_HR`` is an :class:`Image` or a ``(N, 3, H, W)`` array, in whatever
    value domain the encoder is trained to reproduce.
    """
    if isinstance(I_HR, Image):
        hr = I_HR.to_chw(params.dtype)[None]
    else:
        hr = np.asarray(I_HR, dtype=params.dtype)
        hr = hr[None] if hr.ndim == 3 else hr
    if len(pyramid.levels) != len(LQA_LEVELS):
        raise ValueError(f"expected {len(LQA_LEVELS)} pyramid levels, got {len(pyramid.levels)}")
    total = None
    for n, (feat, factor) in enumerate(zip(pyramid.levels, LQA_LEVELS), start=1):
        feat, _ = (feat.reshape((1,) + feat.shape), True) if feat.ndim == 3 else (feat, False)
        want = (hr.shape[-2] // factor, hr.shape[-1] // factor)
        if feat.shape[-2:] != want or feat.shape[0] != hr.shape[0]:
            raise ValueError(f"level {n}: feature {feat.shape} does not match HR {hr.shape} at 1/{factor}")
        target = _downsample_targets(hr, factor)
        term = nn.l1(conv(params, f"torgb.{n}", feat), target)
        total = term if total is None else total + term
    return total


def diffusion_loss(eps_pred: Tensor, eps) -> Tensor:
    eps_pred = nn.as_tensor(eps_pred)
    if tuple(eps_pred.shape) != tuple(np.shape(eps.data if isinstance(eps, Tensor) else eps)):
        raise ValueError(f"eps_pred shape {eps_pred.shape} != eps shape {np.shape(eps)}")
    return nn.mse(eps_pred, eps)


def total_loss(l_diff, l_lqa, alpha: float = 1.0):
    return l_diff + l_lqa * alpha


@dataclass(frozen=True)
class LossReport:
    l_diff: float
    l_lqa: float
    l_total: float
    step: int
    scale: float = 0.0
    hr_size: int = 0


# ---------------------------------------------------------------- config
@dataclass
class TrainConfig:
    alpha_lqa: float = 1.0
    learning_rate: float = 5e-5
    batch_size: int = 8
    steps: int = 5000
    hr_bounds: tuple[int, int] = (32, 512)
    scale_bounds: tuple[float, float] = (4.0, 16.0)
    degradation: str = "bicubic_only"
    seed: int = 0
    null_dropout: float = 0.1
    use_mup: bool = True
    global_scale: bool = True
    local_mod: bool = True
    sepr: bool = True
    clip_norm: float | None = None
    warmup: int = 0
    decay: str = "constant"
    log_every: int = 100

    def __post_init__(self):
        self.hr_bounds = tuple(int(v) for v in self.hr_bounds)
        self.scale_bounds = tuple(float(v) for v in self.scale_bounds)
        if self.learning_rate <= 0 or self.batch_size < 1 or self.steps < 0:
            raise ValueError("learning rate and batch size must be positive, steps non-negative")
        if self.alpha_lqa < 0:
            raise ValueError(f"alpha_lqa must be >= 0, got {self.alpha_lqa}")
        if not 0.0 <= self.null_dropout <= 1.0:
            raise ValueError(f"null_dropout must lie in [0, 1], got {self.null_dropout}")
        if self.decay not in ("constant", "cosine"):
            raise ValueError(f"decay must be 'constant' or 'cosine', got {self.decay!r}")
        if self.degradation not in ("bicubic_only", "realworld"):
            raise ValueError(f"unknown degradation mode {self.degradation!r}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hr_bounds"] = list(self.hr_bounds)
        d["scale_bounds"] = list(self.scale_bounds)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown training options {sorted(unknown)}")
        return cls(**d)

    def unet_spec(self, base: UNetSpec = UNetSpec()) -> UNetSpec:
        return replace(base, global_scale=self.global_scale, local_mod=self.local_mod, sepr=self.sepr)


def learning_rate_at(cfg: TrainConfig, step: int) -> float:
    """Linear warmup over ``cfg.warmup`` steps, then constant or cosine decay to zero at ``cfg.steps``."""
    lr = cfg.learning_rate
    if cfg.warmup:
        lr *= min(1.0, (step + 1) / cfg.warmup)
    if cfg.decay == "cosine" and cfg.steps > cfg.warmup:
        frac = min(max(step - cfg.warmup, 0) / (cfg.steps - cfg.warmup), 1.0)
        lr *= 0.5 * (1.0 + math.cos(math.pi * frac))
    return lr


@dataclass
class TrainState:
    model: SRModel
    opt: AdamW
    sched: DiffusionSchedule
    step: int = 0
    history: list[LossReport] = field(default_factory=list)


def estimate_latent_scale(corpus, params: ParamStore, spec: AutoencoderSpec = AutoencoderSpec(),
                          crop: int = 32, n: int = 64, seed: int = 0) -> float:
    """``1 / std`` of latents over random crops, so diffusion runs on unit-variance latents."""
    rng = np.random.default_rng(seed)
    x = np.stack([random_crop(corpus[int(i)][0], crop, rng).to_signed().to_chw(params.dtype)
                  for i in rng.integers(len(corpus), size=n)])
    with no_grad():
        z = encode_tensor(Tensor(x), params, spec).data
    return float(1.0 / max(z.std(), 1e-6))


def init_state(model: SRModel, cfg: TrainConfig, sched: DiffusionSchedule | None = None) -> TrainState:
    model.params.set_trainable("ae.", False)
    model.params.set_trainable("up.", False)
    opt = AdamW(model.params, lr=cfg.learning_rate, clip_norm=cfg.clip_norm)
    return TrainState(model, opt, sched or make_schedule(model.unet.T))


# ------------------------------------------------------------------ batches
@dataclass
class Batch:
    hr: np.ndarray        # (N, 3, H, W) signed
    cond: np.ndarray      # (N, 3, H, W) signed, pre-upsampled LR
    classes: np.ndarray
    scale: float


def make_batch(samples, cfg: TrainConfig, model: SRModel, step: int) -> Batch:
    """One bucket: a single PairSpec for the whole batch, per-sample crops and degradations."""
    rng = np.random.default_rng([cfg.seed, step, 7])
    spec = sample_pair_spec(int(rng.integers(2**31)), cfg.hr_bounds, cfg.scale_bounds, multiple=model.multiple)
    dcfg = DegradationConfig(mode=cfg.degradation)
    hr, lr, classes = [], [], []
    for img, class_id in samples:
        patch = random_crop(img, spec.hr_size, rng)
        if rng.random() < 0.5:
            patch = Image(patch.data[:, ::-1], patch.range_tag)
        low = degrade(patch, dcfg, spec, int(rng.integers(2**31)))
        hr.append(patch.to_signed().to_chw(model.params.dtype))
        lr.append(low.to_signed().to_chw(model.params.dtype))
        classes.append(class_id)
    up = model.upsampler if cfg.use_mup else None
    cond = preupsample_array(np.stack(lr), spec.hr_size, spec.hr_size, up).astype(model.params.dtype)
    return Batch(np.stack(hr), cond, np.asarray(classes), compute_scale(spec.lr_size, spec.hr_size))


def train_step(batch, cfg: TrainConfig, state: TrainState) -> LossReport:
    """One optimizer update on ``L_diff + alpha * L_LQA`` over a bucketed batch.

    ``batch`` is a list of ``(Image, class_id)`` or a prepared :class:`Batch`.
    Deterministic in ``(cfg.seed, state.step)``.
    """
    if not isinstance(batch, Batch):
        if not batch:
            raise ValueError("empty batch")
        batch = make_batch(batch, cfg, state.model, state.step)
    model, p, sched = state.model, state.model.params, state.sched
    rng = np.random.default_rng([cfg.seed, state.step, 11])
    n = batch.hr.shape[0]

    with no_grad():
        z0 = encode_tensor(Tensor(batch.hr), p, model.ae).data * np.asarray(model.latent_scale, p.dtype)
    t = rng.integers(0, sched.T, size=n)
    eps = rng.standard_normal(z0.shape).astype(p.dtype)
    z_t = add_noise(z0, t, eps, sched)
    classes = np.where(rng.random(n) < cfg.null_dropout, null_class(p), batch.classes)
    sem = semantics_for(classes, p)
    cond = ScaleCondition(np.full(n, batch.scale), model.unet.pe_dim, model.unet.scale_encoding)

    eps_pred, feats = denoise_full(Tensor(z_t), t, cond, sem, Tensor(batch.cond), p, model.unet)
    l_diff = diffusion_loss(eps_pred, eps)
    if feats is not None and cfg.alpha_lqa > 0:
        l_lqa = lqa_loss(feats.pyramid, batch.hr, p)
        loss = total_loss(l_diff, l_lqa, cfg.alpha_lqa)
        lqa_val = float(l_lqa.data)
    else:
        loss, lqa_val = l_diff, 0.0
        if feats is not None:
            with no_grad():
                lqa_val = float(lqa_loss(feats.pyramid, batch.hr, p).data)
    diff_val = float(l_diff.data)
    if not (math.isfinite(diff_val) and math.isfinite(lqa_val)):
        p.zero_grad()
        raise TrainingDivergenceError(state.step)
    state.opt.lr = learning_rate_at(cfg, state.step)
    loss.backward()
    state.opt.step()
    report = LossReport(diff_val, lqa_val, total_loss(diff_val, lqa_val, cfg.alpha_lqa), state.step,
                        batch.scale, batch.hr.shape[-1])
    state.history.append(report)
    state.step += 1
    return report


def train(corpus, cfg: TrainConfig, state: TrainState, steps: int | None = None,
          callback=None) -> list[LossReport]:
    """Run ``steps`` updates (default ``cfg.steps``), drawing batches deterministically from ``corpus``."""
    if not corpus:
        raise ValueError("corpus is empty")
    steps = cfg.steps if steps is None else steps
    reports = []
    for _ in range(steps):
        rng = np.random.default_rng([cfg.seed, state.step, 3])
        picks = rng.integers(len(corpus), size=cfg.batch_size)
        report = train_step([corpus[int(i)] for i in picks], cfg, state)
        reports.append(report)
        if cfg.log_every and report.step % cfg.log_every == 0:
            log.info("step %d l_diff %.4f l_lqa %.4f s=%.2f hr=%d", report.step, report.l_diff,
                     report.l_lqa, report.scale, report.hr_size)
        if callback is not None:
            callback(report)
    return reports


def smoothed(values, window: int = 100) -> np.ndarray:
    """Trailing moving average (shorter windows at the start)."""
    v = np.asarray(values, dtype=np.float64)
    c = np.concatenate([[0.0], np.cumsum(v)])
    idx = np.arange(1, len(v) + 1)
    lo = np.maximum(0, idx - window)
    return (c[idx] - c[lo]) / (idx - lo)


# -------------------------------------------------------------- checkpoints
FORMAT_VERSION = 1
MANIFEST = "manifest.json"
WEIGHTS = "weights.bin"


def save_checkpoint(params: ParamStore, meta: dict, path) -> Path:
    """Write ``manifest.json`` plus little-endian float32 ``weights.bin`` into directory ``path``."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    table, offset, chunks = [], 0, []
    for name, arr in params.items():
        if arr.data.dtype != np.float32:
            raise ValueError(f"{name}: only float32 parameters can be checkpointed, got {arr.data.dtype}")
        data = np.ascontiguousarray(arr.data, dtype="<f4")
        raw = data.tobytes()
        table.append({"name": name, "dtype": "f32", "shape": list(data.shape), "offset": offset,
                      "length": len(raw), "trainable": bool(arr.requires_grad)})
        chunks.append(raw)
        offset += len(raw)
    manifest = {"format_version": FORMAT_VERSION, "arrays": table, **meta}
    (path / WEIGHTS).write_bytes(b"".join(chunks))
    (path / MANIFEST).write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    return path


def read_manifest(path) -> dict:
    path = Path(path)
    if not (path / MANIFEST).is_file():
        raise FileNotFoundError(f"no checkpoint manifest at {path / MANIFEST}")
    try:
        manifest = json.loads((path / MANIFEST).read_text(encoding="utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptCheckpointError(f"unreadable manifest {path / MANIFEST}: {exc}") from exc
    if manifest.get("format_version") != FORMAT_VERSION:
        raise CorruptCheckpointError(f"unsupported checkpoint format {manifest.get('format_version')!r}")
    return manifest


def load_checkpoint(path, required: tuple[str, ...] = ()) -> tuple[ParamStore, dict]:
    """Validate the whole manifest against ``weights.bin`` before returning any array."""
    path = Path(path)
    manifest = read_manifest(path)
    if not (path / WEIGHTS).is_file():
        raise CorruptCheckpointError(f"missing weights file {path / WEIGHTS}")
    blob = (path / WEIGHTS).read_bytes()
    table = manifest.get("arrays")
    if not isinstance(table, list):
        raise CorruptCheckpointError("manifest has no array table")
    names = {entry.get("name") for entry in table}
    for name in required:
        if name not in names:
            raise CorruptCheckpointError(f"checkpoint is missing array {name!r}")
    expect = 0
    for entry in table:
        name = entry.get("name")
        shape = entry.get("shape")
        if entry.get("dtype") != "f32" or not isinstance(shape, list):
            raise CorruptCheckpointError(f"array {name!r}: bad dtype or shape entry")
        length = 4 * int(np.prod(shape, dtype=np.int64))
        if entry.get("length") != length:
            raise CorruptCheckpointError(f"array {name!r}: shape {shape} does not match byte length {entry.get('length')}")
        if entry.get("offset") != expect:
            raise CorruptCheckpointError(f"array {name!r}: offset {entry.get('offset')} != expected {expect}")
        if expect + length > len(blob):
            raise CorruptCheckpointError(f"array {name!r}: weights file truncated")
        expect += length
    if expect != len(blob):
        raise CorruptCheckpointError(f"weights file has {len(blob) - expect} trailing bytes")

    params = ParamStore(np.float32)
    for entry in table:
        raw = np.frombuffer(blob, dtype="<f4", count=entry["length"] // 4, offset=entry["offset"])
        params.add(entry["name"], raw.astype(np.float32).reshape(entry["shape"]),
                   entry.get("trainable", True))
    meta = {k: v for k, v in manifest.items() if k not in ("arrays", "format_version")}
    return params, meta


def model_meta(model: SRModel, sched: DiffusionSchedule, cfg: TrainConfig | None = None, **extra) -> dict:
    meta = {
        "unet": model.unet.to_dict(),
        "autoencoder": asdict(model.ae),
        "latent_scale": model.latent_scale,
        "use_mup": model.use_mup,
        "schedule": sched.to_dict(),
        "config": cfg.to_dict() if cfg is not None else {},
    }
    meta.update(extra)
    return meta


def save_model(model: SRModel, sched: DiffusionSchedule, path, cfg: TrainConfig | None = None, **extra) -> Path:
    return save_checkpoint(model.params, model_meta(model, sched, cfg, **extra), path)


def load_model(path) -> tuple[SRModel, DiffusionSchedule, dict]:
    params, meta = load_checkpoint(path)
    try:
        unet = UNetSpec.from_dict(meta["unet"])
        ae = AutoencoderSpec(**meta["autoencoder"])
        sched = DiffusionSchedule.from_dict(meta["schedule"])
        model = SRModel(params, unet, ae, float(meta["latent_scale"]), bool(meta.get("use_mup", True)), meta=meta)
    except (KeyError, TypeError) as exc:
        raise CorruptCheckpointError(f"checkpoint metadata incomplete: {exc}") from exc
    return model, sched, meta
