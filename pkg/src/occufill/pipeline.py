"""End-to-end completion pipeline.

Stages, in order: visible-mask segmentation (unless a mask is supplied),
coarse generation, invisible-mask prediction, dilation, base compositing, and
masked refinement. Every intermediate is retained in the result, and the
refined output is bit-identical to the base composite outside the dilated
invisible mask.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np

from . import imaging
from .checkpoints import checkpoint_hash
from .detector import DEFAULT_CONFIDENCE, KeypointNet, detect_joints, load_detector
from .diffusion.sampling import sample_coarse
from .diffusion.training import load_coarse_model
from .masknet import MaskNet, load_mask_net, predict_invisible, threshold_mask
from .prompts import Joint, PromptSpec, default_skeleton
from .refine import InpaintState, RefineConfig, load_inpaint_state, refine
from .segmenter import load_segmenter


class PipelineStageError(RuntimeError):
    def __init__(self, stage: str, cause: Exception):
        self.stage = stage
        self.cause = cause
        super().__init__(f"stage {stage!r} failed: {cause}")


@dataclass
class PipelineConfig:
    diffusion_ckpt: str = "ckpts/diffusion"
    masknet_ckpt: str = "ckpts/masknet"
    inpaint_ckpt: str = "ckpts/inpaint"
    detector_ckpt: Optional[str] = None
    segmenter_ckpt: Optional[str] = None
    sampler_steps: int = 24
    guidance: float = 2.0
    conditioning_scale: float = 1.0
    refine: RefineConfig = field(default_factory=RefineConfig)
    dilation_radius: int = 2
    confidence: float = DEFAULT_CONFIDENCE

    def require_paths(self) -> list:
        paths = [self.diffusion_ckpt, self.masknet_ckpt, self.inpaint_ckpt]
        if self.detector_ckpt:
            paths.append(self.detector_ckpt)
        if self.segmenter_ckpt:
            paths.append(self.segmenter_ckpt)
        return paths


class PipelineState:
    """Loaded, immutable model states shared across requests."""

    def __init__(self, config: PipelineConfig):
        missing = [p for p in config.require_paths()
                   if not Path(p).with_suffix(".pt").exists()]
        if missing:
            raise FileNotFoundError(f"missing checkpoints: {missing}")
        self.config = config
        self.model, self.codec, self.schedule, self.diffusion_sidecar = load_coarse_model(
            config.diffusion_ckpt)
        self.mask_model: MaskNet = load_mask_net(config.masknet_ckpt)
        self.inpaint: InpaintState = load_inpaint_state(config.inpaint_ckpt)
        self.detector: Optional[KeypointNet] = (
            load_detector(config.detector_ckpt) if config.detector_ckpt else None)
        self.segmenter = (
            load_segmenter(config.segmenter_ckpt) if config.segmenter_ckpt else None)
        self.skeleton = default_skeleton()

    def checkpoint_hashes(self) -> dict:
        cfg = self.config
        out = {
            "diffusion": checkpoint_hash(cfg.diffusion_ckpt),
            "masknet": checkpoint_hash(cfg.masknet_ckpt),
            "inpaint": checkpoint_hash(cfg.inpaint_ckpt),
        }
        if cfg.detector_ckpt:
            out["detector"] = checkpoint_hash(cfg.detector_ckpt)
        if cfg.segmenter_ckpt:
            out["segmenter"] = checkpoint_hash(cfg.segmenter_ckpt)
        return out


@dataclass
class PipelineResult:
    coarse: np.ndarray
    soft_mask: np.ndarray
    invisible_mask: np.ndarray
    dilated_mask: np.ndarray
    base: np.ndarray
    refined: np.ndarray
    visible_mask: np.ndarray
    timings: dict
    seed: int
    prompt: dict


def run_pipeline(
    occluded: np.ndarray,
    spec: PromptSpec,
    state: PipelineState,
    seed: int,
    visible_mask: Optional[np.ndarray] = None,
    refine_overrides: Optional[dict] = None,
) -> PipelineResult:
    """Execute all stages; deterministic for fixed inputs and seed."""
    cfg = state.config
    timings: dict = {}

    def timed(stage, fn):
        t0 = time.perf_counter()
        try:
            out = fn()
        except Exception as exc:  # propagate with the stage name attached
            raise PipelineStageError(stage, exc) from exc
        timings[stage] = round(time.perf_counter() - t0, 4)
        return out

    occluded = imaging.as_image(occluded)
    if visible_mask is None:
        if state.segmenter is None:
            raise PipelineStageError(
                "segment", RuntimeError("no visible mask given and no segmenter configured"))
        visible_mask = timed("segment", lambda: state.segmenter.segment(occluded))
    visible_mask = imaging.as_mask(visible_mask)

    coarse = timed("coarse", lambda: sample_coarse(
        occluded, visible_mask, spec, seed, state.model, state.codec, state.schedule,
        n_steps=cfg.sampler_steps, guidance=cfg.guidance,
        conditioning_scale=cfg.conditioning_scale, skeleton=state.skeleton,
    ))
    soft = timed("invisible_mask", lambda: predict_invisible(
        occluded, coarse, visible_mask, state.mask_model))
    binary = threshold_mask(soft)
    dilated = timed("dilate", lambda: imaging.dilate(binary, cfg.dilation_radius))
    base = timed("base_composite", lambda: imaging.composite(occluded, coarse, visible_mask))

    refine_cfg = replace(cfg.refine, seed=seed + 1, **(refine_overrides or {}))
    refined = timed("refine", lambda: refine(base, dilated, refine_cfg, state.inpaint))

    outside = dilated == 0
    if not np.array_equal(refined[outside], base[outside]):
        raise PipelineStageError(
            "refine", AssertionError("refined output differs from base outside the mask"))

    return PipelineResult(
        coarse=coarse, soft_mask=soft, invisible_mask=binary, dilated_mask=dilated,
        base=base, refined=refined, visible_mask=visible_mask,
        timings=timings, seed=seed, prompt=spec.to_json(),
    )


def detect_visible_pose(occluded: np.ndarray, state: PipelineState):
    """Detected joints (visible origin) plus the segmenter's visible mask.

    No detected joints is not an error: the UI shows the raw image and a flag.
    """
    if state.detector is None or state.segmenter is None:
        raise RuntimeError("detector and segmenter checkpoints are required")
    visible_mask = state.segmenter.segment(occluded)
    detections = detect_joints(occluded, state.detector, state.config.confidence)
    h, w = visible_mask.shape
    joints = []
    for joint_id, det in enumerate(detections):
        if det is None:
            continue
        x, y, conf = det
        xi, yi = int(np.clip(round(x), 0, w - 1)), int(np.clip(round(y), 0, h - 1))
        if visible_mask[yi, xi]:
            joints.append(Joint(joint_id, x, y, "detected_visible"))
    return joints, visible_mask
