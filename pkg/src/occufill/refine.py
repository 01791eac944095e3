"""Composite-then-refine inpainting.

The base composite keeps input pixels in visible regions and coarse pixels
elsewhere; noise of a strength-controlled level is injected only inside the
dilated invisible mask and a short masked denoising pass blends the boundary.
Pixels outside the mask are re-imposed at every step at the step's noise level
and hard-composited at the end, so unmasked output is bit-identical to the
base composite.
"""
from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import torch
from torch import nn

from . import forge, imaging
from .checkpoints import load_checkpoint, manifest_hash, save_checkpoint
from .diffusion.nets import Denoiser, DenoiserConfig, LatentCodec
from .diffusion.sampling import cfg_combine
from .diffusion.schedule import NoiseSchedule, forward_noise, make_schedule
from .diffusion.training import TrainingDiverged, train_codec, DiffusionTrainConfig
from .torchutil import batch_to_tensor, from_tensor, to_tensor

DEFAULT_KAPPA = 0.76  # calibrated so s=0.5 on T=1000 starts at timestep 380


@dataclass
class RefineConfig:
    s: float = 0.5
    n_steps: int = 20
    guidance: float = 1.5
    dilation_radius: int = 2
    seed: int = 0
    kappa: float = DEFAULT_KAPPA
    allow_untrained: bool = False

    def __post_init__(self):
        if not 0.0 <= self.s <= 1.0:
            raise ValueError("strength s must lie in [0, 1]")
        if self.n_steps < 1:
            raise ValueError("n_steps must be >= 1")


def strength_to_schedule(
    s: float, schedule: NoiseSchedule, n_steps: int, kappa: float = DEFAULT_KAPPA
):
    """Map strength to (start timestep t0, descending active step list).

    t0 = round(s * T * kappa); the active steps are the ceil(s * n_steps) tail
    of a uniform n_steps grid over [0, t0]. s=0 yields an empty list (identity
    refinement); s=1 with kappa=1 starts from pure noise at T-1.
    """
    if not 0.0 <= s <= 1.0:
        raise ValueError("strength s must lie in [0, 1]")
    if s == 0.0:
        return None, []
    t0 = int(round(s * schedule.T * kappa))
    t0 = max(1, min(t0, schedule.T - 1))
    k = math.ceil(s * n_steps)
    grid = np.round(np.linspace(0.0, t0, n_steps)).astype(int)
    active = np.unique(grid[-k:])[::-1]
    return t0, [int(t) for t in active]


class InpaintUNet(Denoiser):
    """Attention-free U-Net over (noisy latent, latent mask, masked-image latent)."""

    def __init__(self, latent_channels: int = 16, base: tuple = (64, 96, 128)):
        cfg = DenoiserConfig(
            in_channels=2 * latent_channels + 1,
            out_channels=latent_channels,
            base=base,
            ctx_dim=None,
        )
        super().__init__(cfg)


@dataclass
class InpaintState:
    unet: InpaintUNet
    codec: LatentCodec
    schedule: NoiseSchedule
    trained_steps: int = 0

    @property
    def is_trained(self) -> bool:
        return self.trained_steps > 0


def latent_mask(mask: np.ndarray, factor: int) -> torch.Tensor:
    """Conservative downsampling: a latent cell is masked if any pixel in it is."""
    t = to_tensor(mask.astype(np.float32))
    return nn.functional.max_pool2d(t, factor)


def _cond_channels(z_masked: torch.Tensor, mlat: torch.Tensor, drop: bool):
    if drop:
        return torch.zeros_like(mlat), torch.zeros_like(z_masked)
    return mlat, z_masked


def refine(
    base_image: np.ndarray,
    mask_dilated: np.ndarray,
    config: RefineConfig,
    state: InpaintState,
) -> np.ndarray:
    """Partially noise the masked region of the base composite and denoise it.

    Output equals the base composite bit-exactly outside the mask for any
    strength and seed.
    """
    if not state.is_trained and not config.allow_untrained:
        raise RuntimeError("inpaint denoiser is untrained; pass allow_untrained to override")
    mask_dilated = imaging.as_mask(mask_dilated)
    base_image = imaging.as_image(base_image)
    t0, steps = strength_to_schedule(config.s, state.schedule, config.n_steps, config.kappa)
    if not steps or not mask_dilated.any():
        return base_image.copy()

    codec, unet, schedule = state.codec, state.unet, state.schedule
    generator = torch.Generator().manual_seed(int(config.seed))
    mlat = latent_mask(mask_dilated, codec.downsampling)
    with torch.no_grad():
        z_base = codec.encode(to_tensor(base_image))
        masked_pixels = to_tensor(base_image * (1 - mask_dilated)[:, :, None])
        z_masked = codec.encode(masked_pixels)

        eps0 = torch.randn(z_base.shape, generator=generator)
        z = torch.where(mlat > 0, forward_noise(z_base, t0, eps0, schedule), z_base)

        alpha_bar = schedule.alpha_bar
        for i, t in enumerate(steps):
            t_tensor = torch.full((1,), int(t), dtype=torch.long)
            x_c = torch.cat([z, mlat, z_masked], dim=1)
            eps_c = unet(x_c, t_tensor)
            zero_m, zero_zm = _cond_channels(z_masked, mlat, drop=True)
            x_u = torch.cat([z, zero_m, zero_zm], dim=1)
            eps_u = unet(x_u, t_tensor)
            eps_hat = cfg_combine(eps_c, eps_u, config.guidance)
            ab_t = float(alpha_bar[t])
            x0 = ((z - math.sqrt(1.0 - ab_t) * eps_hat) / math.sqrt(ab_t)).clamp(-6.0, 6.0)
            if i == len(steps) - 1:
                z = torch.where(mlat > 0, x0, z_base)
                break
            s_t = steps[i + 1]
            ab_s = float(alpha_bar[s_t])
            var = max((1.0 - ab_s) / (1.0 - ab_t) * (1.0 - ab_t / ab_s), 0.0)
            mean = math.sqrt(ab_s) * x0 + math.sqrt(max(1.0 - ab_s - var, 0.0)) * eps_hat
            noise = torch.randn(z.shape, generator=generator)
            z = mean + math.sqrt(var) * noise
            # re-impose known content at this step's noise level
            eps_known = torch.randn(z.shape, generator=generator)
            z = torch.where(mlat > 0, z, forward_noise(z_base, s_t, eps_known, schedule))
        decoded = from_tensor(codec.decode(z)).clip(0.0, 1.0)
    return imaging.composite(decoded, base_image, mask_dilated)


def refine_plug(
    candidate: np.ndarray,
    occluded: np.ndarray,
    visible_mask: np.ndarray,
    config: RefineConfig,
    state: InpaintState,
    mask_model,
) -> dict:
    """Apply the refinement stage to any external completion candidate.

    Predicts the invisible region from (occluded, candidate, visible mask),
    dilates it, composites the candidate with the input, and refines. Returns
    all intermediates.
    """
    from .masknet import predict_invisible, threshold_mask

    soft = predict_invisible(occluded, candidate, visible_mask, mask_model)
    binary = threshold_mask(soft)
    dilated = imaging.dilate(binary, config.dilation_radius)
    base = imaging.composite(occluded, candidate, visible_mask)
    refined = refine(base, dilated, config, state)
    return {
        "soft_mask": soft,
        "invisible_mask": binary,
        "dilated_mask": dilated,
        "base": base,
        "refined": refined,
    }


@dataclass
class InpaintTrainConfig:
    steps: int = 2200
    batch_size: int = 16
    lr: float = 2e-4
    weight_decay: float = 1e-4
    cond_dropout: float = 0.1
    seed: int = 0
    T: int = 1000
    beta_min: float = 1e-4
    beta_max: float = 2e-2
    schedule_shape: str = "linear"
    codec_steps: int = 1200
    log_every: int = 100


def random_inpaint_mask(
    rng: np.random.Generator, size: int, footprints: Optional[list] = None
) -> np.ndarray:
    """Synthetic training mask: rectangle, blob, or a dataset occluder footprint.

    Target area fractions are drawn from [0.05, 0.6].
    """
    target = rng.uniform(0.05, 0.6)
    kind = rng.choice(["rect", "blob", "footprint"] if footprints else ["rect", "blob"])
    mask = np.zeros((size, size), dtype=np.uint8)
    if kind == "footprint":
        mask = footprints[rng.integers(0, len(footprints))].copy()
        if not mask.any():
            kind = "rect"
    if kind == "rect":
        area = target * size * size
        aspect = rng.uniform(0.5, 2.0)
        bw = int(np.clip(math.sqrt(area * aspect), 2, size - 1))
        bh = int(np.clip(math.sqrt(area / aspect), 2, size - 1))
        x0 = int(rng.integers(0, size - bw + 1))
        y0 = int(rng.integers(0, size - bh + 1))
        mask[y0 : y0 + bh, x0 : x0 + bw] = 1
    elif kind == "blob":
        n = int(rng.integers(2, 6))
        r = math.sqrt(target * size * size / (n * math.pi)) * 1.2
        ys, xs = np.mgrid[0:size, 0:size]
        for _ in range(n):
            cx, cy = rng.uniform(size * 0.1, size * 0.9, size=2)
            mask |= (((xs - cx) ** 2 + (ys - cy) ** 2) <= r * r).astype(np.uint8)
    return mask


def train_inpaint_denoiser(
    data_dir,
    out_path,
    cfg: InpaintTrainConfig,
    codec_from=None,
    log=None,
) -> Path:
    """Masked-denoising training over GT complete images and synthetic masks."""
    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    manifest = forge.load_manifest(data_dir)
    train_entries = [e for e in manifest["samples"] if e["split"] == "train"]
    samples = [forge.load_sample(data_dir, e) for e in train_entries]
    images = [s.complete for s in samples]
    footprints = [s.invisible_mask for s in samples if s.invisible_mask.any()]
    size = manifest["size"]

    codec = LatentCodec()
    if codec_from is not None:
        blobs, _ = load_checkpoint(codec_from)
        codec.load_state_dict(blobs["codec"])
    else:
        codec_cfg = DiffusionTrainConfig(codec_steps=cfg.codec_steps)
        train_codec(codec, images, codec_cfg, rng, log)
    codec.eval()

    schedule = make_schedule(cfg.T, cfg.beta_min, cfg.beta_max, cfg.schedule_shape)
    unet = InpaintUNet(codec.latent_channels)
    opt = torch.optim.AdamW(unet.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    factor = codec.downsampling
    t_start = time.time()
    for step in range(cfg.steps):
        idx = rng.integers(0, len(images), size=cfg.batch_size)
        imgs = [images[i] for i in idx]
        masks = [random_inpaint_mask(rng, size, footprints) for _ in idx]
        img_t = batch_to_tensor(imgs)
        with torch.no_grad():
            z0 = codec.encode(img_t)
            masked = batch_to_tensor(
                [im * (1 - m)[:, :, None] for im, m in zip(imgs, masks)])
            z_masked = codec.encode(masked)
        mlat = torch.cat([latent_mask(m, factor) for m in masks])
        drop = torch.from_numpy(
            (rng.random(cfg.batch_size) < cfg.cond_dropout).astype(np.float32)
        )[:, None, None, None]
        mlat_in = mlat * (1.0 - drop)
        z_masked_in = z_masked * (1.0 - drop)

        gen = torch.Generator().manual_seed(int(rng.integers(0, 2**63 - 1)))
        t = torch.from_numpy(rng.integers(0, schedule.T, size=cfg.batch_size))
        eps = torch.randn(z0.shape, generator=gen)
        z_t = forward_noise(z0, t, eps, schedule)
        pred = unet(torch.cat([z_t, mlat_in, z_masked_in], dim=1), t)
        loss = nn.functional.mse_loss(pred, eps)
        if not torch.isfinite(loss):
            raise TrainingDiverged(step, float(loss.item()))
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        if log and (step % cfg.log_every == 0 or step == cfg.steps - 1):
            log(f"inpaint step {step}: loss {loss.item():.4f} ({time.time() - t_start:.0f}s)")

    return save_checkpoint(
        out_path,
        {"unet": unet.state_dict(), "codec": codec.state_dict()},
        {
            "kind": "inpaint",
            "arch": {"latent_channels": codec.latent_channels, "base": list(unet.cfg.base)},
            "schedule": {"T": cfg.T, "beta_min": cfg.beta_min,
                         "beta_max": cfg.beta_max, "shape": cfg.schedule_shape},
            "step": cfg.steps,
            "dataset_manifest_sha256": manifest_hash(data_dir),
        },
    )


def load_inpaint_state(path) -> InpaintState:
    blobs, sidecar = load_checkpoint(path)
    arch = sidecar["arch"]
    codec = LatentCodec(arch["latent_channels"])
    codec.load_state_dict(blobs["codec"])
    codec.eval()
    unet = InpaintUNet(arch["latent_channels"], tuple(arch["base"]))
    unet.load_state_dict(blobs["unet"])
    unet.eval()
    sch = sidecar["schedule"]
    schedule = make_schedule(sch["T"], sch["beta_min"], sch["beta_max"], sch["shape"])
    return InpaintState(unet, codec, schedule, trained_steps=int(sidecar["step"]))


def untrained_inpaint_state(T: int = 1000) -> InpaintState:
    """Fresh random weights, usable only with allow_untrained."""
    return InpaintState(InpaintUNet(), LatentCodec(), make_schedule(T), trained_steps=0)
