"""Command-line entry point: ``omniscale <command> [options]``.

Exit codes: 0 success, 1 user error (bad flags, missing files, invalid
values), 2 internal error.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import logging
import os
import sys
import time
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .autoencoder import AutoencoderSpec, pretrain_autoencoder
from .denoiser import UNetSpec, init_denoiser
from .evaluation import DEFAULT_PAIRS, EvalProtocol, run_eval
from .imaging import TEXTURE_KINDS, Image, read_png, synth_dataset, write_png
from .nn import ParamStore
from .errors import CorruptCheckpointError, InvalidStateError
from .pipeline import SampleRequest, SRModel, UpsamplerSpec, pretrain_upsampler, super_resolve
from .schedule import make_schedule
from .training import (
    TrainConfig,
    estimate_latent_scale,
    init_state,
    load_checkpoint,
    load_model,
    save_checkpoint,
    save_model,
    train,
)

log = logging.getLogger("omniscale")

SEED_ENV = "OMNISCALE_SEED"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


# ------------------------------------------------------------------ helpers
def resolve_seed(seed: int) -> int:
    env = os.environ.get(SEED_ENV)
    if env is None or env == "":
        return seed
    try:
        return int(env)
    except ValueError:
        raise ValueError(f"{SEED_ENV} must be an integer, got {env!r}") from None


def read_config(path) -> dict[str, dict[str, str]]:
    """``[section]`` headers followed by ``key = value`` lines; ``#`` starts a comment."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"config file not found: {path}")
    parser = configparser.ConfigParser(inline_comment_prefixes=("#",))
    parser.read(path, encoding="utf-8")
    return {s: dict(parser[s]) for s in parser.sections()}


def _parse_value(raw: str):
    raw = raw.strip()
    low = raw.lower()
    if low in ("true", "yes", "on"):
        return True
    if low in ("false", "no", "off"):
        return False
    if low in ("none", ""):
        return None
    if "," in raw:
        return [_parse_value(v) for v in raw.split(",")]
    for cast in (int, float):
        try:
            return cast(raw)
        except ValueError:
            pass
    return raw


def load_corpus(data: str | None, n: int, size: int, seed: int, kind: str = "basic"):
    """PNG directory written by ``synth`` (with ``labels.csv``), or a fresh procedural corpus."""
    if data is None:
        return synth_dataset(n, kind, seed, size)
    root = Path(data)
    labels = root / "labels.csv"
    if not labels.is_file():
        raise FileNotFoundError(f"no labels.csv in data directory {root}")
    with labels.open(newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise ValueError(f"data directory {root} lists no images")
    return [(read_png(root / r["file"]), int(r["class_id"])) for r in rows]


def _require_dir(path, what: str) -> Path:
    p = Path(path)
    if not (p / "manifest.json").is_file():
        raise FileNotFoundError(f"{what} checkpoint not found: {p}")
    return p


def _add_corpus_args(p: argparse.ArgumentParser, n: int = 256, size: int = 128) -> None:
    p.add_argument("--data", help="directory written by `synth` (default: synthesize in memory)")
    p.add_argument("--corpus-size", type=int, default=n, help="images to synthesize when --data is absent")
    p.add_argument("--image-size", type=int, default=size, help="side of synthesized images")
    p.add_argument("--corpus-seed", type=int, default=0)


# ---------------------------------------------------------------- commands
def cmd_synth(args) -> None:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    data = synth_dataset(args.n, args.kind, resolve_seed(args.seed), args.size)
    with (out / "labels.csv").open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["file", "class_id"])
        for i, (img, c) in enumerate(data):
            name = f"img_{i:05d}.png"
            write_png(img, out / name)
            w.writerow([name, c])
    print(f"wrote {len(data)} images to {out}")


def cmd_train_ae(args) -> None:
    seed = resolve_seed(args.seed)
    corpus = load_corpus(args.data, args.corpus_size, args.image_size, args.corpus_seed)
    spec = AutoencoderSpec()
    t0 = time.time()
    p = pretrain_autoencoder(corpus, args.steps, seed, spec, lr=args.lr)
    scale = estimate_latent_scale(corpus, p, spec)
    save_checkpoint(p, {"kind": "autoencoder", "autoencoder": asdict(spec), "latent_scale": scale,
                        "steps": args.steps, "seed": seed}, args.out)
    print(f"autoencoder trained in {time.time() - t0:.0f}s, latent scale {scale:.4f} -> {args.out}")


def cmd_train_upsampler(args) -> None:
    seed = resolve_seed(args.seed)
    corpus = load_corpus(args.data, args.corpus_size, args.image_size, args.corpus_seed)
    t0 = time.time()
    p = pretrain_upsampler(corpus, args.steps, seed, UpsamplerSpec(), lr=args.lr)
    save_checkpoint(p, {"kind": "upsampler", "steps": args.steps, "seed": seed}, args.out)
    print(f"upsampler trained in {time.time() - t0:.0f}s ({p.num_params()} params) -> {args.out}")


def build_train_config(args) -> TrainConfig:
    values: dict = {}
    if args.config:
        sections = read_config(args.config)
        for key, raw in sections.get("train", {}).items():
            values[key] = _parse_value(raw)
    flags = {
        "alpha_lqa": args.alpha_lqa,
        "steps": args.steps,
        "learning_rate": args.lr,
        "batch_size": args.batch_size,
    }
    values.update({k: v for k, v in flags.items() if v is not None})
    for flag, key in (("no_global_scale", "global_scale"), ("no_local_mod", "local_mod"),
                      ("no_sepr", "sepr"), ("no_mup", "use_mup")):
        if getattr(args, flag):
            values[key] = False
    values["seed"] = resolve_seed(args.seed if args.seed is not None else int(values.get("seed", 0)))
    return TrainConfig.from_dict(values)


def build_schedule(args, T: int):
    """Diffusion schedule from the optional ``[schedule]`` config section."""
    values = read_config(args.config).get("schedule", {}) if args.config else {}
    unknown = set(values) - {"beta_start", "beta_end", "sigma"}
    if unknown:
        raise ValueError(f"unknown schedule options {sorted(unknown)}")
    kw = {k: (v if k == "sigma" else float(v)) for k, v in values.items()}
    return make_schedule(T, **kw)


def cmd_train(args) -> None:
    cfg = build_train_config(args)
    corpus = load_corpus(args.data, args.corpus_size, args.image_size, args.corpus_seed)
    ae_params, ae_meta = load_checkpoint(_require_dir(args.ae, "autoencoder"))
    params = ParamStore()
    spec = cfg.unet_spec(UNetSpec())
    init_denoiser(spec, cfg.seed, params)
    params.merge(ae_params)
    if cfg.use_mup:
        if args.upsampler is None:
            raise ValueError("--upsampler is required unless --no-mup is given")
        up_params, _ = load_checkpoint(_require_dir(args.upsampler, "upsampler"))
        params.merge(up_params)
    ae = AutoencoderSpec(**ae_meta["autoencoder"])
    model = SRModel(params, spec, ae, float(ae_meta["latent_scale"]), cfg.use_mup)
    state = init_state(model, cfg, build_schedule(args, spec.T))
    t0 = time.time()
    reports = train(corpus, cfg, state)
    first = reports[0].l_total if reports else float("nan")
    last = float(np.mean([r.l_total for r in reports[-100:]])) if reports else float("nan")
    save_model(model, state.sched, args.out, cfg, losses=[[r.l_diff, r.l_lqa] for r in reports])
    print(f"trained {len(reports)} steps in {time.time() - t0:.0f}s: l_total {first:.4f} -> {last:.4f}; saved {args.out}")


def cmd_sample(args) -> None:
    model, sched, _ = load_model(_require_dir(args.checkpoint, "model"))
    if args.no_mup:
        model.use_mup = False
    img = read_png(args.input)
    if img.channels == 1:
        img = Image(np.repeat(img.data, 3, axis=2))
    size = None
    if args.size is not None:
        size = (args.size[0], args.size[-1])
    cls = "auto" if args.class_id == "auto" else int(args.class_id)
    req = SampleRequest(img, scale=args.scale, size=size, steps=args.steps, seed=resolve_seed(args.seed),
                        class_id=cls)
    out = super_resolve(req, model, sched)
    write_png(out, args.out)
    print(f"wrote {out.height}x{out.width} image to {args.out}")


def parse_pairs(text: str) -> tuple[tuple[int, int], ...]:
    """``default`` for the standard grid, or ``lr:hr`` pairs separated by commas."""
    if text == "default":
        return DEFAULT_PAIRS
    pairs = []
    for item in text.split(","):
        try:
            lr, hr = item.split(":")
            pairs.append((int(lr), int(hr)))
        except ValueError:
            raise ValueError(f"bad scale pair {item!r}; expected lr:hr") from None
    return tuple(pairs)


def cmd_eval(args) -> None:
    model, sched, _ = load_model(_require_dir(args.checkpoint, "model"))
    if args.no_mup:
        model.use_mup = False
    pairs = parse_pairs(args.protocol)
    size = max(args.image_size, max(hr for _, hr in pairs))
    corpus = load_corpus(args.data, args.corpus_size, size, args.corpus_seed)
    protocol = EvalProtocol(pairs, crop=args.crop, n_images=args.n, steps=args.steps, class_mode=args.class_mode)
    rows = run_eval(protocol, model, sched, corpus, resolve_seed(args.seed), args.out)
    for r in rows:
        flag = " (flagged)" if r.flagged else ""
        print(f"{r.scale_label:>6} {r.method:<8} PSNR {r.psnr_mean:7.3f}  SSIM {r.ssim_mean:.4f}  n={r.n_images}{flag}")
    print(f"wrote {Path(args.out) / 'metrics.csv'}")


# ------------------------------------------------------------------ parser
def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="omniscale", description="Scale-conditioned latent-diffusion super-resolution (toy scale).")
    ap.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = ap.add_subparsers(dest="command", metavar="command", parser_class=_Parser)
    sub.required = True

    p = sub.add_parser("synth", help="write a procedural PNG corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, default=256)
    p.add_argument("--size", type=int, default=128)
    p.add_argument("--kind", choices=sorted(TEXTURE_KINDS), default="basic")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train-ae", help="pre-train the latent autoencoder")
    p.add_argument("--out", required=True)
    p.add_argument("--steps", type=int, default=2000)
    p.add_argument("--lr", type=float, default=2e-3)
    p.add_argument("--seed", type=int, default=0)
    _add_corpus_args(p)
    p.set_defaults(func=cmd_train_ae)

    p = sub.add_parser("train-upsampler", help="pre-train the x4 pixel-domain upsampler")
    p.add_argument("--out", required=True)
    p.add_argument("--steps", type=int, default=600)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--seed", type=int, default=0)
    _add_corpus_args(p)
    p.set_defaults(func=cmd_train_upsampler)

    p = sub.add_parser("train", help="train the dual-branch denoiser")
    p.add_argument("--ae", required=True, help="autoencoder checkpoint directory")
    p.add_argument("--upsampler", help="upsampler checkpoint directory")
    p.add_argument("--out", required=True)
    p.add_argument("--config", help="config file with a [train] section")
    p.add_argument("--steps", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--alpha-lqa", type=float)
    p.add_argument("--no-global-scale", action="store_true")
    p.add_argument("--no-local-mod", action="store_true")
    p.add_argument("--no-sepr", action="store_true")
    p.add_argument("--no-mup", action="store_true")
    _add_corpus_args(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sample", help="super-resolve one PNG")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--out", required=True)
    g = p.add_mutually_exclusive_group(required=True)
    g.add_argument("--scale", type=float)
    g.add_argument("--size", type=int, nargs="+", metavar="PX", help="output side, or height width")
    p.add_argument("--steps", type=int, default=50)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--class", dest="class_id", default="auto", help="class id or 'auto' (null class)")
    p.add_argument("--no-mup", action="store_true", help="bicubic-only condition image")
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("eval", help="run the scale-grid evaluation")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--protocol", default="default", help="'default' grid or comma-separated lr:hr pairs")
    p.add_argument("--n", type=int, default=16, help="patches per scale pair")
    p.add_argument("--steps", type=int, default=50)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--crop", choices=("random_n", "center"), default="random_n")
    p.add_argument("--class-mode", choices=("label", "auto"), default="label")
    p.add_argument("--no-mup", action="store_true")
    _add_corpus_args(p, n=32, size=128)
    p.set_defaults(func=cmd_eval, corpus_seed=1000)
    return ap


USER_ERRORS = (UsageError, ValueError, FileNotFoundError, CorruptCheckpointError, InvalidStateError)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        args.func(args)
    except USER_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - anything else is a bug
        log.exception("internal error")
        print(f"internal error: {exc!r}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
