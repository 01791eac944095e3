"""Visible-mask segmenter adapters.

Inference needs a visible mask for arbitrary occluded inputs. The learned
adapter is a small binary-segmentation U-Net (same family as the invisible
mask net) trained on forge pairs; the oracle adapter serves dataset GT masks
and exists for experiments and tests.
"""
from __future__ import annotations

import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from torch import nn

from . import forge
from .checkpoints import load_checkpoint, manifest_hash, save_checkpoint
from .diffusion.nets import SmallUNet
from .masknet import mask_loss
from .torchutil import batch_to_tensor, from_tensor, to_tensor


class SegmenterNet(nn.Module):
    def __init__(self, base: tuple = (16, 32, 64)):
        super().__init__()
        self.net = SmallUNet(3, 1, base)

    def forward(self, image: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(self.net(image))


class LearnedSegmenter:
    def __init__(self, model: SegmenterNet):
        self.model = model

    def segment(self, occluded: np.ndarray) -> np.ndarray:
        with torch.no_grad():
            soft = self.model(to_tensor(occluded))
        return (from_tensor(soft)[:, :, 0] >= 0.5).astype(np.uint8)


class OracleSegmenter:
    """Serves GT visible masks keyed by occluded-image bytes (dataset samples only)."""

    def __init__(self, data_dir):
        self.table = {}
        manifest = forge.load_manifest(data_dir)
        for entry in manifest["samples"]:
            sample = forge.load_sample(data_dir, entry)
            self.table[sample.occluded.tobytes()] = sample.visible_mask
    def segment(self, occluded: np.ndarray) -> np.ndarray:
        key = np.asarray(occluded, dtype=np.float32).tobytes()
        if key not in self.table:
            raise KeyError("oracle segmenter only serves dataset samples")
        return self.table[key].copy()


@dataclass
class SegmenterTrainConfig:
    steps: int = 700
    batch_size: int = 16
    lr: float = 1e-3
    seed: int = 0
    log_every: int = 100


def train_segmenter(data_dir, out_path, cfg: SegmenterTrainConfig, log=None) -> Path:
    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    items = [forge.load_sample(data_dir, e) for e in forge.iter_split(data_dir, "train")]
    model = SegmenterNet()
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr)
    t0 = time.time()
    for step in range(cfg.steps):
        idx = rng.integers(0, len(items), size=cfg.batch_size)
        imgs = batch_to_tensor([items[i].occluded for i in idx])
        gts = batch_to_tensor([items[i].visible_mask.astype(np.float32) for i in idx])
        pred = model(imgs)
        loss = mask_loss(pred, gts, lambda_dice=0.5)
        if not torch.isfinite(loss):
            raise RuntimeError(f"segmenter loss diverged at step {step}")
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        if log and (step % cfg.log_every == 0 or step == cfg.steps - 1):
            log(f"segmenter step {step}: loss {loss.item():.4f} ({time.time() - t0:.0f}s)")
    return save_checkpoint(
        out_path,
        {"model": model.state_dict()},
        {
            "kind": "segmenter",
            "arch": {"base": list(model.net.base)},
            "step": cfg.steps,
            "dataset_manifest_sha256": manifest_hash(data_dir),
        },
    )


def load_segmenter(path) -> LearnedSegmenter:
    blobs, sidecar = load_checkpoint(path)
    model = SegmenterNet(tuple(sidecar["arch"]["base"]))
    model.load_state_dict(blobs["model"])
    model.eval()
    return LearnedSegmenter(model)
