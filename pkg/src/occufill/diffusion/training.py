"""Joint training of the coarse generator: codec pretraining, then the
eps-prediction objective over denoiser + control branch + context embedder.

Fine-tune freezing: in ``cross-attn`` mode only the denoiser's cross-attention
tensors stay trainable (the control branch always trains fully); ``none``
trains everything. Frozen tensors are never touched by the optimizer, so they
remain bit-identical to their initial values.
"""
from __future__ import annotations

import json
import time
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Optional

import numpy as np
import torch
from torch import nn

from .. import forge
from ..checkpoints import manifest_hash, save_checkpoint
from ..prompts import PromptImage, compose_prompt_image, default_skeleton, dropout_prompt, augment_bbox
from ..promptsynth import synthesize_prompt
from ..torchutil import batch_to_tensor, seed_from, to_tensor
from .condition import prompt_to_control_input
from .nets import ContextEmbedder, ControlBranch, Denoiser, DenoiserConfig, LatentCodec
from .schedule import NoiseSchedule, forward_noise, make_schedule

FREEZE_MODES = ("none", "cross-attn")
PROMPT_KINDS_TRAIN = ("pose", "interest_bbox", "entire_bbox",
                      "pose_and_interest_bbox", "pose_and_entire_bbox")


class TrainingDiverged(RuntimeError):
    def __init__(self, step: int, loss_value: float):
        self.step = step
        self.loss_value = loss_value
        super().__init__(f"non-finite loss {loss_value} at step {step}")


class CoarseModel(nn.Module):
    """Denoiser, control branch, and context embedder as one unit."""

    def __init__(self, cfg: DenoiserConfig):
        super().__init__()
        self.cfg = cfg
        self.denoiser = Denoiser(cfg)
        self.control = ControlBranch(cfg)
        self.context = ContextEmbedder(cfg.ctx_dim, cfg.ctx_tokens)
        self.control.copy_encoder_from(self.denoiser)

    def zero_control(self, batch: int, height: int, width: int) -> dict:
        c0, c1, c2 = self.cfg.base
        h, w = height, width
        mk = lambda c, hh, ww: torch.zeros((batch, c, hh, ww))
        return {
            "skip0": mk(c0, h, w),
            "skip1": mk(c1, h // 2, w // 2),
            "skip2": mk(c2, h // 4, w // 4),
            "mid": mk(c2, h // 4, w // 4),
        }


def build_freeze_mask(model: CoarseModel, mode: str) -> dict:
    """Per-tensor trainability; control tensors are always trainable."""
    if mode not in FREEZE_MODES:
        raise ValueError(f"unknown freeze mode {mode!r}")
    mask = {}
    for name, _ in model.named_parameters():
        if name.startswith("control."):
            mask[name] = True
        elif mode == "none":
            mask[name] = True
        else:
            mask[name] = ".xattn" in name
    return mask


def apply_freeze_mask(model: CoarseModel, mask: dict) -> None:
    for name, param in model.named_parameters():
        param.requires_grad_(bool(mask[name]))


@dataclass
class DiffusionTrainConfig:
    steps: int = 3000
    batch_size: int = 14
    lr_denoiser: float = 1e-4
    lr_control: float = 5e-4
    warmup_steps: int = 100
    codec_steps: int = 1200
    codec_lr: float = 2e-3
    codec_batch: int = 32
    codec_recon_threshold: float = 0.01
    image_dropout: float = 0.05
    prompt_dropout: float = 0.05
    freeze: str = "none"
    seed: int = 0
    T: int = 1000
    beta_min: float = 1e-4
    beta_max: float = 2e-2
    schedule_shape: str = "linear"
    checkpoint_every: int = 1000
    log_every: int = 50


def make_training_batch(
    samples,
    kinds,
    rng: np.random.Generator,
    skeleton=None,
    prompt_dropout: float = 0.05,
    bbox_augment: bool = True,
):
    """Tensors for one step: images, visible masks, prompt rasters.

    Each sample gets the GT prompt of its assigned kind; bbox corners are
    jittered (training robustness) and whole prompts drop to zero rasters with
    the configured probability. kind=none contributes a zero raster directly.
    """
    skeleton = skeleton or default_skeleton()
    size = samples[0].complete.shape[:2]
    completes, occludeds, vmasks, hints = [], [], [], []
    for sample, kind in zip(samples, kinds):
        completes.append(sample.complete)
        occludeds.append(sample.occluded)
        vmasks.append(sample.visible_mask.astype(np.float32))
        spec = synthesize_prompt(sample, kind)
        if spec.kind == "none":
            hints.append(np.zeros((size[0], size[1], 6), dtype=np.float32))
            continue
        if spec.bbox is not None and bbox_augment:
            spec = replace(spec, bbox=augment_bbox(spec.bbox, rng, size))
        raster = compose_prompt_image(spec, skeleton, size)
        raster = dropout_prompt(raster, rng, prompt_dropout)
        hints.append(raster.as_control_input())
    return (
        batch_to_tensor(completes),
        batch_to_tensor(occludeds),
        batch_to_tensor(vmasks),
        batch_to_tensor(hints),
    )


def training_step(
    batch_tensors,
    model: CoarseModel,
    codec: LatentCodec,
    optimizer,
    schedule: NoiseSchedule,
    rng: np.random.Generator,
    image_dropout: float = 0.05,
    conditioning_scale: float = 1.0,
    step: int = 0,
) -> float:
    """One optimization step of the eps-prediction objective; returns the loss."""
    complete, occluded, vmask, hint = batch_tensors
    b = complete.shape[0]
    gen = torch.Generator().manual_seed(seed_from(rng))
    with torch.no_grad():
        z0 = codec.encode(complete)
        z_img = codec.encode(occluded)
        z_mask = codec.encode(vmask)
    drop = torch.from_numpy((rng.random(b) < image_dropout).astype(np.float32))
    z_img = z_img * (1.0 - drop)[:, None, None, None]
    z_cond = torch.cat([z_img, z_mask], dim=1)

    t = torch.from_numpy(rng.integers(0, schedule.T, size=b))
    eps = torch.randn(z0.shape, generator=gen)
    z_t = forward_noise(z0, t, eps, schedule)

    ctx = model.context(occluded)
    control = model.control(hint)
    pred = model.denoiser(torch.cat([z_t, z_cond], dim=1), t, ctx, control, conditioning_scale)
    loss = nn.functional.mse_loss(pred, eps)
    if not torch.isfinite(loss):
        raise TrainingDiverged(step, float(loss.item()))
    optimizer.zero_grad(set_to_none=True)
    loss.backward()
    optimizer.step()
    return float(loss.item())


def _codec_latent_scale(codec: LatentCodec, images: torch.Tensor) -> float:
    with torch.no_grad():
        codec.latent_scale.fill_(1.0)
        z = codec.encode(images)
        std = float(z.std())
    return 1.0 / max(std, 1e-6)


def train_codec(
    codec: LatentCodec, images: list, cfg: DiffusionTrainConfig, rng: np.random.Generator, log=None
) -> dict:
    """Reconstruction pretraining (stage 0) plus latent-scale calibration."""
    opt = torch.optim.Adam(codec.parameters(), lr=cfg.codec_lr)
    n = len(images)
    for step in range(cfg.codec_steps):
        idx = rng.integers(0, n, size=min(cfg.codec_batch, n))
        batch = batch_to_tensor([images[i] for i in idx])
        recon = codec.reconstruct(batch)
        loss = nn.functional.mse_loss(recon, batch)
        if not torch.isfinite(loss):
            raise TrainingDiverged(step, float(loss.item()))
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        if log and step % cfg.log_every == 0:
            log(f"codec step {step}: recon mse {loss.item():.5f}")
    calib = batch_to_tensor([images[i] for i in rng.integers(0, n, size=min(64, n))])
    scale = _codec_latent_scale(codec, calib)
    with torch.no_grad():
        codec.latent_scale.fill_(scale)
    return {"latent_scale": scale}


def _warmup_lambda(warmup: int):
    return lambda step: min(1.0, (step + 1) / max(1, warmup))


def build_optimizer(model: CoarseModel, cfg: DiffusionTrainConfig):
    groups = []
    denoiser_params = [p for n, p in model.named_parameters()
                       if not n.startswith("control.") and p.requires_grad]
    control_params = [p for n, p in model.named_parameters()
                      if n.startswith("control.") and p.requires_grad]
    if denoiser_params:
        groups.append({"params": denoiser_params, "lr": cfg.lr_denoiser})
    if control_params:
        groups.append({"params": control_params, "lr": cfg.lr_control})
    opt = torch.optim.AdamW(groups, weight_decay=1e-4)
    sched = torch.optim.lr_scheduler.LambdaLR(opt, _warmup_lambda(cfg.warmup_steps))
    return opt, sched


def epoch_plan(manifest: dict, split: str, rng: np.random.Generator) -> list:
    """One entry per subject per epoch: a randomly chosen view."""
    by_subject = {}
    for entry in manifest["samples"]:
        if entry["split"] == split:
            by_subject.setdefault(entry["subject"], []).append(entry)
    plan = []
    for subject in sorted(by_subject):
        views = by_subject[subject]
        plan.append(views[rng.integers(0, len(views))])
    order = rng.permutation(len(plan))
    return [plan[i] for i in order]


def train_diffusion(data_dir, out_path, cfg: DiffusionTrainConfig, log=None) -> Path:
    """Full pipeline: stage 0 codec, stage 1 joint training, checkpointing."""
    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    manifest = forge.load_manifest(data_dir)
    train_entries = [e for e in manifest["samples"] if e["split"] == "train"]
    test_entries = [e for e in manifest["samples"] if e["split"] == "test"]
    cache = {e["path"]: forge.load_sample(data_dir, e) for e in manifest["samples"]}

    codec = LatentCodec()
    stage0_imgs = [cache[e["path"]].complete for e in train_entries]
    stage0_imgs += [cache[e["path"]].occluded for e in train_entries]
    codec_info = train_codec(codec, stage0_imgs, cfg, rng, log)
    heldout = batch_to_tensor([cache[e["path"]].complete for e in test_entries[:16]])
    with torch.no_grad():
        codec_recon_mse = float(nn.functional.mse_loss(codec.reconstruct(heldout), heldout))
    if log:
        log(f"codec held-out recon mse {codec_recon_mse:.5f} "
            f"(threshold {cfg.codec_recon_threshold})")

    schedule = make_schedule(cfg.T, cfg.beta_min, cfg.beta_max, cfg.schedule_shape)
    model = CoarseModel(DenoiserConfig())
    freeze = build_freeze_mask(model, cfg.freeze)
    apply_freeze_mask(model, freeze)
    optimizer, lr_sched = build_optimizer(model, cfg)

    out_base = Path(out_path)
    metrics_path = out_base.with_suffix(".metrics.jsonl")
    metrics_path.parent.mkdir(parents=True, exist_ok=True)
    metrics_log = open(metrics_path, "w")

    def checkpoint(step: int) -> Path:
        return save_checkpoint(
            out_base,
            {
                "codec": codec.state_dict(),
                "model": model.state_dict(),
            },
            {
                "kind": "diffusion",
                "arch": model.cfg.to_dict(),
                "schedule": {"T": cfg.T, "beta_min": cfg.beta_min,
                             "beta_max": cfg.beta_max, "shape": cfg.schedule_shape},
                "freeze": cfg.freeze,
                "step": step,
                "dataset_manifest_sha256": manifest_hash(data_dir),
                "codec_recon_mse": codec_recon_mse,
                "codec_latent_scale": codec_info["latent_scale"],
                "image_size": manifest["size"],
            },
        )

    step = 0
    last_good = checkpoint(step)
    t_start = time.time()
    try:
        while step < cfg.steps:
            plan = epoch_plan(manifest, "train", rng)
            for i in range(0, len(plan), cfg.batch_size):
                if step >= cfg.steps:
                    break
                entries = plan[i : i + cfg.batch_size]
                samples = [cache[e["path"]] for e in entries]
                kinds = [PROMPT_KINDS_TRAIN[rng.integers(0, len(PROMPT_KINDS_TRAIN))]
                         for _ in samples]
                tensors = make_training_batch(
                    samples, kinds, rng, prompt_dropout=cfg.prompt_dropout)
                loss = training_step(
                    tensors, model, codec, optimizer, schedule, rng,
                    image_dropout=cfg.image_dropout, step=step)
                lr_sched.step()
                step += 1
                if step % cfg.log_every == 0 or step == cfg.steps:
                    rec = {"step": step, "loss": round(loss, 6),
                           "elapsed_s": round(time.time() - t_start, 1)}
                    metrics_log.write(json.dumps(rec) + "\n")
                    metrics_log.flush()
                    if log:
                        log(f"diffusion step {step}/{cfg.steps}: loss {loss:.4f}")
                if step % cfg.checkpoint_every == 0:
                    last_good = checkpoint(step)
    except TrainingDiverged:
        metrics_log.close()
        if log:
            log(f"diverged; last good checkpoint kept at {last_good}")
        raise
    metrics_log.close()
    return checkpoint(step)


def load_coarse_model(path):
    """Rebuild (model, codec, schedule, sidecar) from a diffusion checkpoint."""
    from ..checkpoints import load_checkpoint

    blobs, sidecar = load_checkpoint(path)
    cfg = DenoiserConfig.from_dict(sidecar["arch"])
    model = CoarseModel(cfg)
    model.load_state_dict(blobs["model"])
    model.eval()
    codec = LatentCodec()
    codec.load_state_dict(blobs["codec"])
    codec.eval()
    sch = sidecar["schedule"]
    schedule = make_schedule(sch["T"], sch["beta_min"], sch["beta_max"], sch["shape"])
    return model, codec, schedule, sidecar
