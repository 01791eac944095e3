"""Keypoint detection via heatmap regression, for the joint-error metric.

A small U-Net regresses one Gaussian heatmap per joint; decoding takes the
per-channel argmax refined by a local weighted centroid, with the peak value
as confidence. Joints below the confidence threshold count as missing.
"""
from __future__ import annotations

import time
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
import torch
from torch import nn

from . import forge
from .checkpoints import load_checkpoint, manifest_hash, save_checkpoint
from .diffusion.nets import SmallUNet
from .prompts import default_skeleton
from .torchutil import batch_to_tensor, to_tensor

HEATMAP_SIGMA = 1.5
DEFAULT_CONFIDENCE = 0.15


class KeypointNet(nn.Module):
    def __init__(self, joints: int = 7, base: tuple = (16, 32, 64)):
        super().__init__()
        self.joints = joints
        self.net = SmallUNet(3, joints, base)

    def forward(self, image: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(self.net(image))


def joint_heatmaps(joints_xy: np.ndarray, size: int, sigma: float = HEATMAP_SIGMA) -> np.ndarray:
    """(K, H, W) Gaussian peaks centered at each joint."""
    k = len(joints_xy)
    ys, xs = np.mgrid[0:size, 0:size]
    maps = np.zeros((k, size, size), dtype=np.float32)
    for i, (x, y) in enumerate(joints_xy):
        maps[i] = np.exp(-((xs - x) ** 2 + (ys - y) ** 2) / (2.0 * sigma**2))
    return maps


def decode_heatmaps(heatmaps: np.ndarray, confidence: float = DEFAULT_CONFIDENCE) -> list:
    """Per joint: (x, y, confidence) or None when the peak is below threshold."""
    out = []
    size = heatmaps.shape[-1]
    for hm in heatmaps:
        peak = float(hm.max())
        if peak < confidence:
            out.append(None)
            continue
        idx = int(hm.argmax())
        py, px = divmod(idx, hm.shape[1])
        y0, y1 = max(0, py - 2), min(hm.shape[0], py + 3)
        x0, x1 = max(0, px - 2), min(hm.shape[1], px + 3)
        win = hm[y0:y1, x0:x1].astype(np.float64)
        ys, xs = np.mgrid[y0:y1, x0:x1]
        wsum = win.sum()
        out.append((float((xs * win).sum() / wsum), float((ys * win).sum() / wsum), peak))
    return out


def detect_joints(
    image: np.ndarray, model: KeypointNet, confidence: float = DEFAULT_CONFIDENCE
) -> list:
    with torch.no_grad():
        maps = model(to_tensor(image))[0].numpy()
    return decode_heatmaps(maps, confidence)


def joint_error(
    generated: np.ndarray,
    gt_joints_xy: np.ndarray,
    model: KeypointNet,
    confidence: float = DEFAULT_CONFIDENCE,
) -> dict:
    """Mean pixel distance between detected joints and reference coordinates.

    Joints under the confidence threshold are excluded and counted; a sample
    with no detected joints is flagged undefined.
    """
    detections = detect_joints(generated, model, confidence)
    dists = []
    missing = 0
    for det, (gx, gy) in zip(detections, gt_joints_xy):
        if det is None:
            missing += 1
            continue
        dists.append(float(np.hypot(det[0] - gx, det[1] - gy)))
    if not dists:
        return {"error": None, "missing": missing, "defined": False}
    return {"error": float(np.mean(dists)), "missing": missing, "defined": True}


@dataclass
class DetectorTrainConfig:
    steps: int = 1400
    batch_size: int = 16
    lr: float = 2e-3
    peak_weight: float = 10.0
    seed: int = 0
    log_every: int = 100


def train_keypoint_detector(data_dir, out_path, cfg: DetectorTrainConfig, log=None) -> Path:
    """Heatmap regression on GT complete images; validation floor recorded."""
    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    manifest = forge.load_manifest(data_dir)
    size = manifest["size"]
    skeleton = default_skeleton()

    def load_split(split):
        items = []
        for entry in forge.iter_split(data_dir, split):
            sample = forge.load_sample(data_dir, entry)
            xy = np.array([[j.x, j.y] for j in sample.joints])
            items.append((sample.complete, xy))
        return items

    train_items = load_split("train")
    test_items = load_split("test")
    model = KeypointNet(skeleton.joint_count)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr)
    t0 = time.time()
    for step in range(cfg.steps):
        idx = rng.integers(0, len(train_items), size=cfg.batch_size)
        imgs = batch_to_tensor([train_items[i][0] for i in idx])
        targets = torch.from_numpy(
            np.stack([joint_heatmaps(train_items[i][1], size) for i in idx]))
        pred = model(imgs)
        weight = 1.0 + cfg.peak_weight * targets
        loss = (weight * (pred - targets) ** 2).mean()
        if not torch.isfinite(loss):
            raise RuntimeError(f"detector loss diverged at step {step}")
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        if log and (step % cfg.log_every == 0 or step == cfg.steps - 1):
            log(f"detector step {step}: loss {loss.item():.5f} ({time.time() - t0:.0f}s)")

    floor = detector_floor(model, test_items)
    if log:
        log(f"detector floor on held-out GT: {floor:.3f} px")
    return save_checkpoint(
        out_path,
        {"model": model.state_dict()},
        {
            "kind": "detector",
            "arch": {"joints": model.joints, "base": list(model.net.base)},
            "step": cfg.steps,
            "floor_px": floor,
            "dataset_manifest_sha256": manifest_hash(data_dir),
        },
    )


def detector_floor(model: KeypointNet, items) -> float:
    """Mean joint error on GT images (the resolution floor for all joint claims)."""
    errs = []
    for image, xy in items:
        res = joint_error(image, xy, model)
        if res["defined"]:
            errs.append(res["error"])
    return float(np.mean(errs)) if errs else float("inf")


def load_detector(path) -> KeypointNet:
    blobs, sidecar = load_checkpoint(path)
    model = KeypointNet(sidecar["arch"]["joints"], tuple(sidecar["arch"]["base"]))
    model.load_state_dict(blobs["model"])
    model.eval()
    return model
