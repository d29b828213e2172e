"""Training loop: alternating positive/random patch batches, logging and checkpoints."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .config import RunConfig
from .groundtruth import encode_patch
from .model import Model, build_model, image_to_input, train_step
from .sampling import format_log_line
from .synth import PatchStream, SceneAnnotation

log = logging.getLogger(__name__)

CHECKPOINT_NAME = "model.ckpt"
LOG_NAME = "train.log"


class NumericFailure(RuntimeError):
    """Training produced a non-finite loss; the last good checkpoint is kept."""


@dataclass
class TrainResult:
    model: Model
    records: list[dict]
    checkpoint: Path | None


def run_seeds(seed: int) -> tuple[int, np.random.SeedSequence, np.random.SeedSequence]:
    """Independent streams for model init, patch sampling and negative mining."""
    init, patches, mining = np.random.SeedSequence(seed).spawn(3)
    return int(init.generate_state(1)[0]), patches, mining


def encode_batch(samples, cfg: RunConfig, dtype=np.float64):
    return [(image_to_input(s.patch, dtype), encode_patch(s.annotation, cfg.geometry)) for s in samples]


def train(
    cfg: RunConfig,
    scenes: Sequence[SceneAnnotation],
    out_dir: str | Path | None = None,
    on_record: Callable[[dict], None] | None = None,
) -> TrainResult:
    """Train a fresh model on patches cut from ``scenes``.

    With ``out_dir`` the resolved config, a per-iteration log and a checkpoint
    (refreshed every ``max(1, iterations // 10)`` steps) are written there.
    """
    init_seed, patch_seed, mining_seed = run_seeds(cfg.seed)
    dtype = np.dtype(cfg.optimizer.precision)
    model = build_model(cfg.model, init_seed).cast_(dtype)
    stream = PatchStream(scenes, cfg.patch, np.random.default_rng(patch_seed))
    mining_rng = np.random.default_rng([cfg.mining.rng_seed, *mining_seed.generate_state(2)])
    opt = cfg.optimizer
    every = max(1, opt.iterations // 10)

    ckpt = None
    log_fh = None
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.json").write_text(cfg.dumps())
        ckpt = out / CHECKPOINT_NAME
        model.save(ckpt)
        log_fh = open(out / LOG_NAME, "w")
        log_fh.write(f"# seed={cfg.seed} init_seed={init_seed} mining_rng_seed={cfg.mining.rng_seed}\n")

    records: list[dict] = []
    try:
        for it in range(opt.iterations):
            batch = encode_batch(stream.batch(opt.batch_size), cfg, dtype)
            try:
                # divergence is caught by the explicit finiteness checks
                with np.errstate(over="ignore", invalid="ignore"):
                    rec = train_step(model, batch, cfg.loss, cfg.mining, opt, mining_rng, it)
            except FloatingPointError as exc:
                raise NumericFailure(f"iteration {it}: {exc}") from exc
            records.append(rec)
            line = format_log_line(rec)
            if log_fh is not None:
                log_fh.write(line + "\n")
                log_fh.flush()
            if on_record is not None:
                on_record(rec)
            if it % 50 == 0:
                log.info(line)
            if ckpt is not None and ((it + 1) % every == 0 or it + 1 == opt.iterations):
                model.save(ckpt)
    finally:
        if log_fh is not None:
            log_fh.close()
    return TrainResult(model, records, ckpt)
