"""Training loop, evaluation and single-shot reconstruction."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np
import torch

from ..decoder import N_ROTATIONS, GaussianSet, gumbel_noise, temperature_at
from ..diffcore import (AdamWState, NonFiniteGradient, adamw_step, clip_grad_norm, load_checkpoint, lr_at,
                        optimizer_tensors, restore_optimizer, rng_for, save_checkpoint)
from ..geometry import CameraView, sample_orbit_cameras
from ..loss import composite_loss
from ..model import MVGamba, fuse_inputs, model_from_tensors, model_tensors
from ..splat import render
from .config import TrainConfig
from .data import SceneSample, camera_jitter, generate_scene, grid_distortion, render_targets
from .metrics import psnr, ssim

log = logging.getLogger(__name__)

METRIC_COLUMNS = ["step", "epoch", "lr", "tau", "loss", "rgb_mse", "mask_mse", "perceptual", "opacity_reg",
                  "grad_norm", "psnr", "train_psnr"]


class TrainingAborted(RuntimeError):
    def __init__(self, message: str, last_checkpoint: Path | None):
        super().__init__(message)
        self.last_checkpoint = last_checkpoint


@dataclass
class TrainResult:
    checkpoint: Path
    metrics_path: Path
    rows: list[dict] = field(default_factory=list)


# ----------------------------------------------------------------------------- data plumbing


def scene_seed(cfg: TrainConfig, index: int) -> int:
    return int(rng_for(cfg.seed, "scene-seed", index).integers(2 ** 31 - 1))


@lru_cache(maxsize=256)
def _cached_scene(seed: int, k: int, mode: str) -> GaussianSet:
    return generate_scene(seed, k, mode)


def training_sample(cfg: TrainConfig, step: int, slot: int) -> SceneSample:
    if cfg.n_train_scenes > 0:
        index = int(rng_for(cfg.seed, "scene-pick", step, slot).integers(cfg.n_train_scenes))
    else:
        index = step * cfg.batch_size + slot
    seed = scene_seed(cfg, index)
    gs = _cached_scene(seed, cfg.k_gaussians, cfg.mode)
    size = cfg.image_size
    if cfg.resample_inputs:
        views = sample_orbit_cameras(rng_for(cfg.seed, "cams", step, slot), 4, cfg.n_novel, size, size)
    else:
        views = (sample_orbit_cameras(rng_for(cfg.seed, "scene-cams", index), 4, 0, size, size)
                 + sample_orbit_cameras(rng_for(cfg.seed, "novel", step, slot), 0, cfg.n_novel, size, size))
    images, alphas = render_targets(gs, views)
    return SceneSample(gs, views[:4], images[:4], alphas[:4], views[4:], images[4:], alphas[4:], seed)


def fixed_sample(scene: int, cfg: TrainConfig, camera_key: str = "eval-cams") -> SceneSample:
    """A scene with fixed input and novel cameras, for evaluation."""
    gs = _cached_scene(scene, cfg.k_gaussians, cfg.mode)
    size = cfg.image_size
    views = sample_orbit_cameras(rng_for(scene, camera_key), 4, cfg.n_novel, size, size)
    images, alphas = render_targets(gs, views)
    return SceneSample(gs, views[:4], images[:4], alphas[:4], views[4:], images[4:], alphas[4:], scene)


def augment_inputs(cfg: TrainConfig, sample: SceneSample, step: int, slot: int):
    """Apply grid distortion / camera jitter, each with probability ``aug_prob``, to the input views only."""
    rng = rng_for(cfg.seed, "augment", step, slot)
    images, views = list(sample.input_images), list(sample.input_views)
    if rng.random() < cfg.aug_prob:
        images = [grid_distortion(img, cfg.grid_strength, rng) for img in images]
    if rng.random() < cfg.aug_prob:
        views = [camera_jitter(v, cfg.jitter_magnitude, rng) for v in views]
    return images, views


# ----------------------------------------------------------------------------- model plumbing


def build_model(cfg: TrainConfig) -> MVGamba:
    torch.manual_seed(cfg.seed)
    model = MVGamba(cfg.model_config())
    model.decoder.straight_through = cfg.straight_through
    return model


def named_params(model: MVGamba) -> dict[str, torch.Tensor]:
    return dict(model.named_parameters())


def reconstruct(model: MVGamba, images, views: list[CameraView]) -> GaussianSet:
    """Feed-forward inference: argmax rotations, no noise."""
    if len(images) != 4 or len(views) != 4:
        raise ValueError(f"reconstruction needs exactly 4 posed views, got {len(images)}")
    with torch.no_grad():
        return model(fuse_inputs(images, views), mode="infer")


def render_psnr(gs: GaussianSet, views, images, tile_size: int = 8) -> float:
    with torch.no_grad():
        vals = [psnr(render(gs, v, tile_size=tile_size).rgb, img) for v, img in zip(views, images)]
    return float(np.mean(vals))


def _checkpoint(path: Path, model: MVGamba, opt: AdamWState, step: int) -> Path:
    tensors = model_tensors(model)
    tensors.update(optimizer_tensors(opt))
    tensors["meta/step"] = np.float32(step)
    save_checkpoint(path, tensors)
    return path


def _fmt(x) -> str:
    return "" if x is None else repr(float(x))


# ----------------------------------------------------------------------------- loop


def train(cfg: TrainConfig, resume: str | Path | None = None, stop_after: int | None = None) -> TrainResult:
    """Run the training loop; returns the final checkpoint and the metrics rows written this call.

    ``stop_after`` ends the run early after that global step (used to test resumption).
    """
    torch.set_num_threads(cfg.threads)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(cfg.to_text())
    model = build_model(cfg)
    params = named_params(model)
    opt = AdamWState(cfg.lr, (cfg.beta1, cfg.beta2), 1e-8, cfg.weight_decay)
    start = 0
    metrics_path = out / "metrics.csv"
    if resume is not None:
        tensors = load_checkpoint(resume)
        model.load_state_dict(model_from_tensors(tensors).state_dict())
        restore_optimizer(opt, tensors)
        start = int(tensors["meta/step"])
    else:
        with metrics_path.open("w", newline="") as fh:
            csv.writer(fh).writerow(METRIC_COLUMNS)

    held_out = fixed_sample(cfg.held_out_seed, cfg)
    train_scene = fixed_sample(scene_seed(cfg, 0), cfg, "train-eval-cams") if cfg.n_train_scenes == 1 else None
    if train_scene is not None and not cfg.resample_inputs:
        views = sample_orbit_cameras(rng_for(cfg.seed, "scene-cams", 0), 4, 0, cfg.image_size, cfg.image_size)
        images, alphas = render_targets(train_scene.gaussians, views)
        train_scene = SceneSample(train_scene.gaussians, views, images, alphas, [], [], [], train_scene.seed)

    weights = cfg.loss_weights()
    last_good = None
    rows = []
    end = cfg.total_steps if stop_after is None else min(cfg.total_steps, stop_after)
    K = model.cfg.seq_len
    for step in range(start, end):
        epoch = step / cfg.steps_per_epoch
        opt.lr = lr_at(epoch, cfg.epochs, cfg.warmup_epochs, cfg.lr, cfg.lr_min)
        tau = temperature_at(step, cfg.total_steps, cfg.tau_start, cfg.tau_end)
        model.zero_grad(set_to_none=True)
        totals = {"loss": 0.0, "rgb_mse": 0.0, "mask_mse": 0.0, "perceptual": 0.0, "opacity_reg": 0.0}
        for slot in range(cfg.batch_size):
            sample = training_sample(cfg, step, slot)
            images, views = augment_inputs(cfg, sample, step, slot)
            noise = gumbel_noise(rng_for(cfg.seed, "gumbel", step, slot), (K, N_ROTATIONS))
            gs = model(fuse_inputs(images, views), tau, "train", gumbel=noise)
            sup_views, sup_images, sup_alphas = sample.supervision
            renders = [render(gs, v, tile_size=cfg.tile_size, normals=False) for v in sup_views]
            dtype = gs.means.dtype
            gts = [(torch.as_tensor(i, dtype=dtype), torch.as_tensor(a, dtype=dtype))
                   for i, a in zip(sup_images, sup_alphas)]
            report = composite_loss(renders, gts, gs, weights, cfg.perceptual_impl)
            if not math.isfinite(float(report.total.detach())):
                raise TrainingAborted(f"non-finite loss at step {step}", last_good)
            (report.total / cfg.batch_size).backward()
            totals["loss"] += float(report.total.detach()) / cfg.batch_size
            for key in ("rgb_mse", "mask_mse", "perceptual", "opacity_reg"):
                totals[key] += getattr(report, key) / cfg.batch_size
        grad_norm = clip_grad_norm(params.values(), cfg.grad_clip)
        try:
            adamw_step(params, opt)
        except NonFiniteGradient as exc:
            raise TrainingAborted(str(exc), last_good) from exc

        done = step + 1
        held_psnr = train_psnr = None
        if done % cfg.eval_every == 0 or done == cfg.total_steps:
            held_out_gs = reconstruct(model, held_out.input_images, held_out.input_views)
            held_psnr = render_psnr(held_out_gs, held_out.novel_views, held_out.novel_images, cfg.tile_size)
            if train_scene is not None:
                gs_train = reconstruct(model, train_scene.input_images, train_scene.input_views)
                train_psnr = render_psnr(gs_train, train_scene.input_views, train_scene.input_images, cfg.tile_size)
        row = {"step": done, "epoch": done / cfg.steps_per_epoch, "lr": opt.lr, "tau": tau, **totals,
               "grad_norm": grad_norm, "psnr": held_psnr, "train_psnr": train_psnr}
        rows.append(row)
        with metrics_path.open("a", newline="") as fh:
            csv.writer(fh).writerow([row["step"]] + [_fmt(row[c]) for c in METRIC_COLUMNS[1:]])
        if held_psnr is not None:
            log.info("step %d loss %.5f psnr %.2f train_psnr %s", done, totals["loss"], held_psnr,
                     "-" if train_psnr is None else f"{train_psnr:.2f}")
        if done % cfg.checkpoint_every == 0:
            last_good = _checkpoint(out / "last.mvgb", model, opt, done)

    final = _checkpoint(out / ("final.mvgb" if end == cfg.total_steps else "last.mvgb"), model, opt, end)
    return TrainResult(final, metrics_path, rows)


def load_model(path) -> MVGamba:
    return model_from_tensors(load_checkpoint(path))


def evaluate(checkpoint, scenes, cfg: TrainConfig | None = None) -> dict:
    """Novel-view PSNR / SSIM of feed-forward reconstructions of held-out scenes (seeds)."""
    model = checkpoint if isinstance(checkpoint, MVGamba) else load_model(checkpoint)
    cfg = cfg or TrainConfig(image_size=model.cfg.image_size, patch=model.cfg.patch, mode=model.cfg.mode)
    per_scene = []
    for seed in scenes:
        sample = fixed_sample(int(seed), cfg)
        gs = reconstruct(model, sample.input_images, sample.input_views)
        with torch.no_grad():
            preds = [render(gs, v, tile_size=cfg.tile_size).rgb for v in sample.novel_views]
        per_scene.append({
            "scene": int(seed),
            "psnr": float(np.mean([psnr(p, g) for p, g in zip(preds, sample.novel_images)])),
            "ssim": float(np.mean([ssim(p, g) for p, g in zip(preds, sample.novel_images)])),
        })
    return {
        "psnr": float(np.mean([s["psnr"] for s in per_scene])),
        "ssim": float(np.mean([s["ssim"] for s in per_scene])),
        "scenes": per_scene,
    }
