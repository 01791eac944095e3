"""Classifier-free-guided ancestral sampling for the coarse generator."""
from __future__ import annotations

import json
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from .. import forge, imaging
from ..prompts import PromptSpec, compose_prompt_image, default_skeleton
from ..torchutil import from_tensor, to_tensor
from .condition import ConditionBundle, assemble_condition
from .schedule import NoiseSchedule

X0_CLAMP = 6.0  # keeps untrained nets finite; trained latents sit well inside


def step_list(T: int, n_steps: int) -> np.ndarray:
    """Descending subsampled timesteps covering [0, T-1]."""
    if n_steps < 1:
        raise ValueError("n_steps must be >= 1")
    steps = np.unique(np.round(np.linspace(0, T - 1, min(n_steps, T))).astype(int))
    return steps[::-1].copy()


def cfg_combine(eps_c: torch.Tensor, eps_u: torch.Tensor, guidance: float) -> torch.Tensor:
    """eps_u + g * (eps_c - eps_u); exact at the g=0 and g=1 endpoints."""
    if guidance == 1.0:
        return eps_c
    if guidance == 0.0:
        return eps_u
    return eps_u + guidance * (eps_c - eps_u)


def guided_eps(model, z, z_cond, t_tensor, bundle: ConditionBundle, zero_control: dict):
    """One CFG evaluation: (eps_hat, eps_c, eps_u)."""
    x = torch.cat([z, z_cond], dim=1)
    eps_c = model.denoiser(x, t_tensor, bundle.context, bundle.control,
                           bundle.conditioning_scale)
    eps_u = model.denoiser(x, t_tensor, model.context.null(z.shape[0]), zero_control, 1.0)
    return cfg_combine(eps_c, eps_u, bundle.guidance_scale), eps_c, eps_u


def ancestral_denoise(
    z: torch.Tensor,
    steps: np.ndarray,
    schedule: NoiseSchedule,
    eps_fn,
    generator: torch.Generator,
    known_replace=None,
    step_hook=None,
) -> torch.Tensor:
    """Run the descending step list; the final step jumps to the x0 prediction.

    ``known_replace(z, t_or_none)``, when given, re-imposes known content at
    the step's noise level (used by inpainting-style refinement).
    """
    alpha_bar = schedule.alpha_bar
    for i, t in enumerate(steps):
        t_tensor = torch.full((z.shape[0],), int(t), dtype=torch.long)
        eps_hat = eps_fn(z, t_tensor, t)
        if step_hook is not None:
            step_hook(int(t), eps_hat)
        ab_t = float(alpha_bar[t])
        x0 = (z - np.sqrt(1.0 - ab_t) * eps_hat) / np.sqrt(ab_t)
        x0 = x0.clamp(-X0_CLAMP, X0_CLAMP)
        if i == len(steps) - 1:
            z = x0
            if known_replace is not None:
                z = known_replace(z, None)
            break
        s = int(steps[i + 1])
        ab_s = float(alpha_bar[s])
        var = (1.0 - ab_s) / (1.0 - ab_t) * (1.0 - ab_t / ab_s)
        var = max(var, 0.0)
        mean = np.sqrt(ab_s) * x0 + np.sqrt(max(1.0 - ab_s - var, 0.0)) * eps_hat
        noise = torch.randn(z.shape, generator=generator)
        z = mean + np.sqrt(var) * noise
        if known_replace is not None:
            z = known_replace(z, s)
    return z


def sample_coarse(
    occluded: np.ndarray,
    visible_mask: np.ndarray,
    spec: PromptSpec,
    seed: int,
    model,
    codec,
    schedule: NoiseSchedule,
    n_steps: int = 24,
    guidance: float = 2.0,
    conditioning_scale: float = 1.0,
    skeleton=None,
    return_info: bool = False,
    step_hook=None,
):
    """Generate one coarse completion; deterministic for fixed inputs and seed."""
    if n_steps > schedule.T:
        raise ValueError("n_steps cannot exceed the schedule length")
    skeleton = skeleton or default_skeleton()
    size = occluded.shape[:2]
    prompt_image = None if spec.kind == "none" else compose_prompt_image(spec, skeleton, size)
    bundle = assemble_condition(
        occluded, visible_mask, prompt_image, codec, model.control, model.context,
        guidance_scale=guidance, conditioning_scale=conditioning_scale,
    )
    h, w = size[0] // codec.downsampling, size[1] // codec.downsampling
    zero_ctrl = model.zero_control(1, h, w)
    generator = torch.Generator().manual_seed(int(seed))
    z = torch.randn((1, codec.latent_channels, h, w), generator=generator)

    def eps_fn(zz, t_tensor, t):
        eps_hat, eps_c, eps_u = guided_eps(model, zz, bundle.z_cond, t_tensor, bundle, zero_ctrl)
        if step_hook is not None:
            step_hook(int(t), eps_c, eps_u, eps_hat)
        return eps_hat

    with torch.no_grad():
        z = ancestral_denoise(z, step_list(schedule.T, n_steps), schedule, eps_fn, generator)
        decoded = codec.decode(z)
    img = from_tensor(decoded)
    clamp_fraction = float(((img < 0.0) | (img > 1.0)).mean())
    out = img.clip(0.0, 1.0)
    if return_info:
        return out, {"clamp_fraction": clamp_fraction, "seed": int(seed)}
    return out


def sample_coarse_batch(
    occluded: np.ndarray,
    visible_mask: np.ndarray,
    spec: PromptSpec,
    seeds,
    model,
    codec,
    schedule: NoiseSchedule,
    n_steps: int = 24,
    guidance: float = 2.0,
    conditioning_scale: float = 1.0,
    skeleton=None,
) -> list:
    """Batched variant sampling: one output per seed, each seed-deterministic."""
    skeleton = skeleton or default_skeleton()
    size = occluded.shape[:2]
    prompt_image = None if spec.kind == "none" else compose_prompt_image(spec, skeleton, size)
    bundle = assemble_condition(
        occluded, visible_mask, prompt_image, codec, model.control, model.context,
        guidance_scale=guidance, conditioning_scale=conditioning_scale,
    )
    n = len(seeds)
    h, w = size[0] // codec.downsampling, size[1] // codec.downsampling
    gens = [torch.Generator().manual_seed(int(s)) for s in seeds]
    z = torch.cat([torch.randn((1, codec.latent_channels, h, w), generator=g) for g in gens])
    z_cond = bundle.z_cond.expand(n, -1, -1, -1)
    ctx = bundle.context.expand(n, -1, -1)
    control = {k: v.expand(n, -1, -1, -1) for k, v in bundle.control.items()}
    zero_ctrl = model.zero_control(n, h, w)
    alpha_bar = schedule.alpha_bar
    steps = step_list(schedule.T, n_steps)
    with torch.no_grad():
        for i, t in enumerate(steps):
            t_tensor = torch.full((n,), int(t), dtype=torch.long)
            x = torch.cat([z, z_cond], dim=1)
            eps_c = model.denoiser(x, t_tensor, ctx, control, conditioning_scale)
            eps_u = model.denoiser(x, t_tensor, model.context.null(n), zero_ctrl, 1.0)
            eps_hat = cfg_combine(eps_c, eps_u, guidance)
            ab_t = float(alpha_bar[t])
            x0 = ((z - np.sqrt(1.0 - ab_t) * eps_hat) / np.sqrt(ab_t)).clamp(-X0_CLAMP, X0_CLAMP)
            if i == len(steps) - 1:
                z = x0
                break
            s = int(steps[i + 1])
            ab_s = float(alpha_bar[s])
            var = max((1.0 - ab_s) / (1.0 - ab_t) * (1.0 - ab_t / ab_s), 0.0)
            mean = np.sqrt(ab_s) * x0 + np.sqrt(max(1.0 - ab_s - var, 0.0)) * eps_hat
            noise = torch.cat([torch.randn((1,) + z.shape[1:], generator=g) for g in gens])
            z = mean + np.sqrt(var) * noise
        decoded = codec.decode(z)
    return [from_tensor(decoded[i : i + 1]).clip(0.0, 1.0) for i in range(n)]


def generate_coarse_pool(
    data_dir,
    checkpoint_path,
    out_dir,
    n_train: int = 16,
    n_test: int = 2,
    prompt_kind: str = "pose",
    n_steps: int = 24,
    guidance: float = 2.0,
    seed_base: int = 1000,
    log=None,
) -> dict:
    """Pre-generate per-sample coarse pools used to train the invisible-mask net."""
    from ..promptsynth import synthesize_prompt
    from .training import load_coarse_model

    model, codec, schedule, sidecar = load_coarse_model(checkpoint_path)
    manifest = forge.load_manifest(data_dir)
    out = Path(out_dir)
    entries = []
    for entry in manifest["samples"]:
        n = n_train if entry["split"] == "train" else n_test
        sample = forge.load_sample(data_dir, entry)
        spec = synthesize_prompt(sample, prompt_kind)
        seeds = [seed_base + 16 * (entry["subject"] * 64 + entry["view"]) + k for k in range(n)]
        images = sample_coarse_batch(
            sample.occluded, sample.visible_mask, spec, seeds, model, codec, schedule,
            n_steps=n_steps, guidance=guidance,
        )
        sdir = out / entry["path"]
        sdir.mkdir(parents=True, exist_ok=True)
        for k, img in enumerate(images):
            imaging.save_image(sdir / f"cc_{k:02d}.png", img)
        entries.append({"path": entry["path"], "n": n, "split": entry["split"]})
        if log:
            log(f"pool {entry['path']}: {n} variants")
    doc = {
        "n_train": n_train,
        "n_test": n_test,
        "prompt_kind": prompt_kind,
        "checkpoint": str(checkpoint_path),
        "entries": entries,
    }
    (out / "pool.json").write_text(json.dumps(doc, sort_keys=True, indent=1))
    return doc
