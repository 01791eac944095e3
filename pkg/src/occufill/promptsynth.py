"""Prompt synthesis from dataset ground truth.

Experiments and training need prompts without a human in the loop: the pose
prompt carries the GT joints (origin tagged by visibility), the interest bbox
is the bounding box of the GT invisible mask, and the entire bbox is the
bounding box of the amodal mask.
"""
from __future__ import annotations

from typing import Optional

import numpy as np

from .forge import Sample
from .prompts import BboxPrompt, PromptSpec


def mask_bbox(mask: np.ndarray, kind: str) -> BboxPrompt:
    ys, xs = np.nonzero(mask)
    if len(xs) == 0:
        raise ValueError("cannot take the bbox of an empty mask")
    return BboxPrompt(float(xs.min()), float(ys.min()), float(xs.max()), float(ys.max()), kind).canonical()


def synthesize_prompt(sample: Sample, kind: str) -> PromptSpec:
    """Build the GT prompt of the requested kind for one sample."""
    if kind == "none":
        return PromptSpec(kind="none")
    pose = tuple(sample.joints) if kind in ("pose", "pose_and_interest_bbox", "pose_and_entire_bbox") else None
    bbox: Optional[BboxPrompt] = None
    if kind in ("interest_bbox", "pose_and_interest_bbox"):
        source = sample.invisible_mask if sample.invisible_mask.any() else sample.amodal_mask
        bbox = mask_bbox(source, "interest_region")
    elif kind in ("entire_bbox", "pose_and_entire_bbox"):
        bbox = mask_bbox(sample.amodal_mask, "entire_region")
    return PromptSpec(kind=kind, pose=pose, bbox=bbox)
