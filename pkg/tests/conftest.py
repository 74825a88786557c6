"""Shared fixtures: the toy corpus and cached pretrained/trained artifacts.

Expensive artifacts (autoencoder, upsampler, trained denoiser) are written
under ``.cache/<recipe hash>`` at the repository root and reused across
sessions. Delete that directory to rebuild from scratch.
"""

from __future__ import annotations

import hashlib
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from omniscale.autoencoder import AutoencoderSpec, pretrain_autoencoder  # noqa: E402
from omniscale.denoiser import UNetSpec, init_denoiser  # noqa: E402
from omniscale.imaging import synth_dataset  # noqa: E402
from omniscale.nn import ParamStore  # noqa: E402
from omniscale.pipeline import SRModel, pretrain_upsampler  # noqa: E402
from omniscale.schedule import make_schedule  # noqa: E402
from omniscale.training import (  # noqa: E402
    TrainConfig,
    estimate_latent_scale,
    init_state,
    load_checkpoint,
    load_model,
    save_checkpoint,
    save_model,
    train,
)

ROOT = Path(__file__).resolve().parent.parent

# Everything that determines the cached artifacts. Changing a value changes the cache key.
RECIPE = {
    "corpus": {"n": 256, "kind": "basic", "seed": 0, "size": 128},
    "ae": {"steps": 2000, "seed": 0},
    "upsampler": {"steps": 600, "seed": 0},
    "train": {
        "steps": 9000,
        "learning_rate": 2e-3,
        "batch_size": 8,
        "hr_bounds": [32, 64],
        "warmup": 200,
        "decay": "cosine",
        "clip_norm": 1.0,
        "seed": 0,
        "log_every": 500,
    },
    "schedule": {"beta_start": 0.00085, "beta_end": 0.012},
    "version": 5,
}
CACHE = ROOT / ".cache" / hashlib.sha256(json.dumps(RECIPE, sort_keys=True).encode()).hexdigest()[:12]


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: builds or uses the trained toy artifacts")


def pytest_terminal_summary(terminalreporter):
    import acceptance_log

    if acceptance_log.LINES:
        terminalreporter.section("acceptance criteria")
        for line in acceptance_log.LINES:
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def corpus():
    c = RECIPE["corpus"]
    return synth_dataset(c["n"], c["kind"], c["seed"], size=c["size"])


@pytest.fixture(scope="session")
def eval_corpus():
    """Held-out images: a seed range disjoint from the training corpus."""
    return synth_dataset(32, "basic", 1000, size=128)


def _cached_params(name: str, build) -> tuple[ParamStore, dict]:
    path = CACHE / name
    if (path / "manifest.json").exists():
        return load_checkpoint(path)
    CACHE.mkdir(parents=True, exist_ok=True)
    t0 = time.time()
    params, meta = build()
    meta = dict(meta, build_seconds=time.time() - t0)
    save_checkpoint(params, meta, path)
    return load_checkpoint(path)


@pytest.fixture(scope="session")
def pretrained_ae(corpus):
    """Frozen autoencoder plus its training curve."""

    def build():
        hist = []
        p = pretrain_autoencoder(corpus, RECIPE["ae"]["steps"], RECIPE["ae"]["seed"], history=hist)
        return p, {"history": hist}

    return _cached_params("ae", build)


@pytest.fixture(scope="session")
def pretrained_up(corpus):
    def build():
        hist = []
        p = pretrain_upsampler(corpus, RECIPE["upsampler"]["steps"], RECIPE["upsampler"]["seed"], history=hist)
        return p, {"history": hist}

    return _cached_params("upsampler", build)


@pytest.fixture(scope="session")
def trained(corpus, pretrained_ae, pretrained_up):
    """``(model, sched, meta)`` for the acceptance training run.

    ``meta["history"]`` holds the per-step losses and ``meta["train_seconds"]``
    the wall time of the training loop alone.
    """
    path = CACHE / "model"
    if not (path / "manifest.json").exists():
        logging.getLogger("omniscale").setLevel(logging.INFO)
        ae, _ = pretrained_ae
        up, _ = pretrained_up
        cfg = TrainConfig(**{k: tuple(v) if isinstance(v, list) else v for k, v in RECIPE["train"].items()})
        spec = cfg.unet_spec(UNetSpec())
        p = ParamStore()
        init_denoiser(spec, cfg.seed, p)
        p.merge(ae)
        p.merge(up)
        model = SRModel(p, spec, AutoencoderSpec(), estimate_latent_scale(corpus, ae))
        state = init_state(model, cfg, make_schedule(spec.T, **RECIPE["schedule"]))
        t0 = time.time()
        train(corpus, cfg, state)
        seconds = time.time() - t0
        history = [
            {"step": r.step, "l_diff": r.l_diff, "l_lqa": r.l_lqa, "l_total": r.l_total}
            for r in state.history
        ]
        save_model(model, state.sched, path, cfg, history=history, train_seconds=seconds)
    return load_model(path)
