"""Training loop, run checkpoints and the overfit smoke experiment."""

from __future__ import annotations

import json
import os
import time
from pathlib import Path
from typing import Callable

import numpy as np
import torch

from . import dataio
from .config import RunConfig
from .model import (Example, GeoDiffusion, build_model, collate, ddim_sample, eval_noise_mse, load_example,
                    make_optimizer, training_step)
from .rng import substream

CKPT_PATTERN = "ckpt_{step:07d}.pt"


def save_run(path: str | os.PathLike, model: GeoDiffusion, optimizer, step: int) -> Path:
    state = {
        "config": model.cfg.to_dict(),
        "model": model.state_dict(),
        "optimizer": optimizer.state_dict() if optimizer is not None else None,
        "step": step,
        # training randomness is re-derived from (seed, step); the global torch state is kept for completeness
        "rng": {"torch": torch.get_rng_state(), "seed": model.cfg.seed},
    }
    return dataio.save_checkpoint(state, path)


def load_run(path: str | os.PathLike, with_optimizer: bool = False):
    """(model, optimizer or None, step, config) from a run checkpoint."""
    state = dataio.load_checkpoint(path)
    try:
        cfg = RunConfig.from_dict(state["config"])
        model = build_model(cfg)
        model.load_state_dict(state["model"])
    except (KeyError, RuntimeError, ValueError, TypeError) as exc:
        raise dataio.CheckpointError(f"checkpoint {path} does not match this model: {exc}") from exc
    opt = None
    if with_optimizer:
        opt = make_optimizer(model, cfg)
        if state.get("optimizer") is not None:
            opt.load_state_dict(state["optimizer"])
    return model, opt, int(state["step"]), cfg


def latest_checkpoint(run_dir: str | os.PathLike) -> Path | None:
    ckpts = sorted(Path(run_dir).glob("ckpt_*.pt"))
    return ckpts[-1] if ckpts else None


def select_batch(examples: list[Example], batch_size: int, seed: int, step: int) -> list[Example]:
    if len(examples) <= batch_size:
        return examples
    idx = substream(seed, "batch", step).choice(len(examples), batch_size, replace=False)
    return [examples[i] for i in sorted(idx)]


def train(cfg: RunConfig, examples: list[Example], run_dir: str | os.PathLike, steps: int | None = None,
          resume: bool = False, on_step: Callable[[int, float], None] | None = None,
          model: GeoDiffusion | None = None) -> tuple[GeoDiffusion, Path]:
    """Run ``steps`` optimizer steps (total, counting resumed ones), logging to ``loss.jsonl``.

    The learning-rate schedule always spans ``cfg.train.steps``.
    Checkpoints every ``cfg.train.ckpt_every`` steps and at the end.
    """
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    steps = cfg.train.steps if steps is None else steps
    start = 0
    opt = None
    if resume:
        ckpt = latest_checkpoint(run_dir)
        if ckpt is None:
            raise FileNotFoundError(f"--resume given but {run_dir} has no checkpoint")
        model, opt, start, _ = load_run(ckpt, with_optimizer=True)
    if model is None:
        model = build_model(cfg)
    if opt is None:
        opt = make_optimizer(model, cfg)

    log_path = run_dir / "loss.jsonl"
    last = latest_checkpoint(run_dir) if resume else None
    t0 = time.time()
    with open(log_path, "a") as log:
        for step in range(start, steps):
            batch = select_batch(examples, cfg.train.batch_size, cfg.seed, step)
            loss = training_step(model, batch, opt, step)
            done = step + 1
            if done % cfg.train.log_every == 0 or done == steps:
                log.write(json.dumps({"step": done, "loss": loss, "lr": opt.param_groups[0]["lr"],
                                      "wall_time": round(time.time() - t0, 4)}) + "\n")
                log.flush()
            if done % cfg.train.ckpt_every == 0 or done == steps:
                last = save_run(run_dir / CKPT_PATTERN.format(step=done), model, opt, done)
            if on_step is not None:
                on_step(done, loss)
    if last is None:
        last = save_run(run_dir / CKPT_PATTERN.format(step=start), model, opt, start)
    return model, last


def load_examples(records: list[dataio.SampleRecord], cfg: RunConfig, with_target: bool = True) -> list[Example]:
    return [load_example(r, cfg, with_target) for r in records]


def overfit_smoke(cfg: RunConfig, data_dir: str | os.PathLike, n_samples: int = 4, steps: int = 2000,
                  sample_steps: int = 50, cfg_scale: float | None = None, seed: int = 0,
                  log: Callable[[str], None] = print) -> dict:
    """Train on ``n_samples`` synthetic records, then measure noise MSE and DDIM sample PSNR."""
    from .metrics import psnr
    from .synthworld import make_dataset

    data_dir = Path(data_dir)
    manifest = data_dir / "manifest.jsonl"
    if not manifest.exists():
        make_dataset(n_samples, 8, seed, data_dir)
    records = dataio.load_manifest(manifest)[:n_samples]
    examples = load_examples(records, cfg)
    cfg.train.batch_size = n_samples
    cfg.train.steps = steps  # the lr schedule horizon

    model = build_model(cfg)
    mse0 = eval_noise_mse(model, examples)
    log(f"step 0: eval noise mse {mse0:.4f}")
    t0 = time.time()

    def report(step, loss):
        if step % max(1, steps // 20) == 0:
            log(f"step {step}: loss {loss:.4f} ({time.time() - t0:.0f}s)")

    model, _ = train(cfg, examples, data_dir / "run", steps, on_step=report, model=model)
    train_time = time.time() - t0
    mse1 = eval_noise_mse(model, examples)
    batch = collate(examples, cfg)
    scale = cfg.sample.cfg_scale if cfg_scale is None else cfg_scale
    images = ddim_sample(model, batch, sample_steps, scale, seed=seed, clip_x0=cfg.sample.clip_x0)
    truth = [e.target for e in examples]
    psnrs = [psnr(a, b) for a, b in zip(images, truth)]
    return {
        "initial_mse": mse0, "final_mse": mse1, "ratio": mse1 / mse0, "psnr": psnrs,
        "min_psnr": float(np.min(psnrs)), "train_seconds": train_time,
        "total_seconds": time.time() - t0, "images": images, "truth": truth,
    }

