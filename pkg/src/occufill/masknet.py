"""Invisible-region mask prediction.

A lightweight U-Net maps (occluded image, coarse completion, visible mask) --
7 input channels -- to a soft mask in [0,1], trained with BCE plus
Dice-weighted overlap loss against the GT invisible mask over a pool of
stochastic coarse completions. Thresholding at 0.5 yields the binary mask.
"""
from __future__ import annotations

import json
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from torch import nn

from . import forge, imaging
from .checkpoints import load_checkpoint, manifest_hash, save_checkpoint
from .diffusion.nets import SmallUNet
from .torchutil import batch_to_tensor, from_tensor, to_tensor

BINARY_THRESHOLD = 0.5
CLAMP_EPS = 1e-7
DICE_DELTA = 1e-6


def mask_loss(
    pred: torch.Tensor,
    gt: torch.Tensor,
    lambda_dice: float = 0.5,
    clamp_eps: float = CLAMP_EPS,
    delta: float = DICE_DELTA,
) -> torch.Tensor:
    """BCE (pixel mean, probabilities clamped before the logs) + lambda * Dice.

    Dice uses global sums over all pixels with the stability constant delta.
    """
    if pred.shape != gt.shape:
        raise ValueError(f"pred/gt shapes differ: {pred.shape} vs {gt.shape}")
    p = pred.clamp(clamp_eps, 1.0 - clamp_eps)
    g = gt.to(pred.dtype)
    bce = -(g * torch.log(p) + (1.0 - g) * torch.log(1.0 - p)).mean()
    inter = (pred * g).sum()
    dice = 1.0 - (2.0 * inter + delta) / (pred.sum() + g.sum() + delta)
    return bce + lambda_dice * dice


class MaskNet(nn.Module):
    """7-channel-input U-Net with a sigmoid head."""

    def __init__(self, base: tuple = (16, 32, 64)):
        super().__init__()
        self.net = SmallUNet(7, 1, base)

    def forward(self, occluded, coarse, visible) -> torch.Tensor:
        x = torch.cat([occluded, coarse, visible], dim=1)
        return torch.sigmoid(self.net(x))


def predict_invisible(
    occluded: np.ndarray, coarse: np.ndarray, visible_mask: np.ndarray, model: MaskNet
) -> np.ndarray:
    """Soft invisible mask in [0,1]; threshold at 0.5 for the binary mask."""
    if occluded.shape != coarse.shape or occluded.shape[:2] != visible_mask.shape:
        raise ValueError("input shapes disagree")
    with torch.no_grad():
        soft = model(
            to_tensor(occluded), to_tensor(coarse),
            to_tensor(visible_mask.astype(np.float32)),
        )
    return from_tensor(soft)[:, :, 0]


def threshold_mask(soft: np.ndarray, threshold: float = BINARY_THRESHOLD) -> np.ndarray:
    return (soft >= threshold).astype(np.uint8)


@dataclass
class MaskTrainConfig:
    steps: int = 900
    batch_size: int = 16
    lr: float = 1e-4
    weight_decay: float = 1e-4
    lambda_dice: float = 0.5
    seed: int = 0
    log_every: int = 50


class PoolDataset:
    """Training samples plus their pre-generated coarse pools, cached as uint8."""

    def __init__(self, data_dir, pool_dir, split: str = "train"):
        self.pool_doc = json.loads((Path(pool_dir) / "pool.json").read_text())
        self.items = []
        for entry in forge.iter_split(data_dir, split):
            sample = forge.load_sample(data_dir, entry)
            pool_paths = sorted((Path(pool_dir) / entry["path"]).glob("cc_*.png"))
            if not pool_paths:
                raise FileNotFoundError(f"no coarse pool for {entry['path']} in {pool_dir}")
            pool = [imaging.quantize8(imaging.load_image(p)) for p in pool_paths]
            self.items.append({
                "occluded": imaging.quantize8(sample.occluded),
                "visible": sample.visible_mask,
                "gt_invisible": sample.invisible_mask,
                "pool": pool,
                "path": entry["path"],
            })

    def __len__(self):
        return len(self.items)

    def batch(self, rng: np.random.Generator, batch_size: int, pool_index=None):
        idx = rng.integers(0, len(self.items), size=batch_size)
        occ, coarse, vis, gt = [], [], [], []
        for i in idx:
            item = self.items[i]
            k = pool_index if pool_index is not None else int(rng.integers(0, len(item["pool"])))
            occ.append(item["occluded"].astype(np.float32) / 255.0)
            coarse.append(item["pool"][k].astype(np.float32) / 255.0)
            vis.append(item["visible"].astype(np.float32))
            gt.append(item["gt_invisible"].astype(np.float32))
        return (
            batch_to_tensor(occ), batch_to_tensor(coarse),
            batch_to_tensor(vis), batch_to_tensor(gt),
        )


def train_mask_net(data_dir, pool_dir, out_path, cfg: MaskTrainConfig, log=None) -> Path:
    """Train against GT invisible masks, sampling one pooled coarse image per step."""
    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    dataset = PoolDataset(data_dir, pool_dir, "train")
    model = MaskNet()
    opt = torch.optim.AdamW(model.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    t0 = time.time()
    for step in range(cfg.steps):
        occ, coarse, vis, gt = dataset.batch(rng, cfg.batch_size)
        pred = model(occ, coarse, vis)
        loss = mask_loss(pred, gt, cfg.lambda_dice)
        if not torch.isfinite(loss):
            raise RuntimeError(f"mask-net loss diverged at step {step}")
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        if log and (step % cfg.log_every == 0 or step == cfg.steps - 1):
            log(f"mask step {step}: loss {loss.item():.4f} ({time.time() - t0:.0f}s)")
    return save_checkpoint(
        out_path,
        {"model": model.state_dict()},
        {
            "kind": "masknet",
            "arch": {"base": list(model.net.base)},
            "step": cfg.steps,
            "lambda_dice": cfg.lambda_dice,
            "dataset_manifest_sha256": manifest_hash(data_dir),
        },
    )


def load_mask_net(path) -> MaskNet:
    blobs, sidecar = load_checkpoint(path)
    model = MaskNet(tuple(sidecar["arch"]["base"]))
    model.load_state_dict(blobs["model"])
    model.eval()
    return model


def evaluate_mask_net(model: MaskNet, data_dir, pool_dir, split: str = "test") -> dict:
    """Mean mIoU / L1 of thresholded predictions against GT on a split."""
    from .metrics import mask_scores

    dataset = PoolDataset(data_dir, pool_dir, split)
    ious, l1s = [], []
    for item in dataset.items:
        occ = item["occluded"].astype(np.float32) / 255.0
        coarse = item["pool"][0].astype(np.float32) / 255.0
        soft = predict_invisible(occ, coarse, item["visible"], model)
        iou, l1 = mask_scores(threshold_mask(soft), item["gt_invisible"])
        ious.append(iou)
        l1s.append(l1)
    return {"miou": float(np.mean(ious)), "l1": float(np.mean(l1s)), "count": len(ious)}
