"""Conditioning assembly for the coarse generator.

The conditioning bundle concatenates the encoded occluded image with the
encoded visible mask (z_cond), carries global context tokens from the context
embedder, and holds the per-resolution control residuals computed from the
prompt raster. A missing prompt is identical to an all-zero prompt raster.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
import torch

from ..prompts import PromptImage
from ..torchutil import to_tensor


@dataclass
class ConditionBundle:
    z_cond: torch.Tensor  # (B, 2 * latent_channels, h, w)
    context: torch.Tensor  # (B, tokens, ctx_dim)
    control: dict  # per-resolution residual tensors
    guidance_scale: float = 2.0
    conditioning_scale: float = 1.0


def prompt_to_control_input(prompt_image: Optional[PromptImage], size) -> torch.Tensor:
    """Canonical 6-channel control input; ``None`` maps to all zeros."""
    h, w = size
    if prompt_image is None:
        return torch.zeros((1, 6, h, w))
    if isinstance(prompt_image, PromptImage):
        arr = prompt_image.as_control_input()
    else:
        arr = np.asarray(prompt_image, dtype=np.float32)
        if arr.ndim != 3 or arr.shape[2] != 6:
            raise ValueError(
                f"raw control input must be (H, W, 6), got {arr.shape}; "
                "wrap 3-channel prompts in PromptImage"
            )
    if arr.shape[:2] != (h, w):
        raise ValueError(f"prompt raster {arr.shape[:2]} does not match image {size}")
    return to_tensor(arr)


def assemble_condition(
    occluded: np.ndarray,
    visible_mask: np.ndarray,
    prompt_image: Optional[PromptImage],
    codec,
    control_state,
    context_embedder,
    guidance_scale: float = 2.0,
    conditioning_scale: float = 1.0,
) -> ConditionBundle:
    """Build the full conditioning bundle for one request."""
    if occluded.shape[:2] != visible_mask.shape:
        raise ValueError("occluded image and visible mask disagree in shape")
    img = to_tensor(occluded)
    mask = to_tensor(visible_mask.astype(np.float32))
    with torch.no_grad():
        z_img = codec.encode(img)
        z_mask = codec.encode(mask)
        z_cond = torch.cat([z_img, z_mask], dim=1)
        context = context_embedder(img)
        hint = prompt_to_control_input(prompt_image, occluded.shape[:2])
        control = control_state(hint)
    return ConditionBundle(
        z_cond=z_cond,
        context=context,
        control=control,
        guidance_scale=guidance_scale,
        conditioning_scale=conditioning_scale,
    )
