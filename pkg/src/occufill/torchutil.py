"""numpy <-> torch conversion helpers (CPU, channel-first)."""
from __future__ import annotations

import numpy as np
import torch


def to_tensor(image: np.ndarray, dtype=torch.float32) -> torch.Tensor:
    """(H, W, C) or (H, W) array -> (1, C, H, W) tensor."""
    a = np.asarray(image)
    if a.ndim == 2:
        a = a[:, :, None]
    return torch.from_numpy(np.ascontiguousarray(a.transpose(2, 0, 1))[None]).to(dtype)


def batch_to_tensor(images, dtype=torch.float32) -> torch.Tensor:
    return torch.cat([to_tensor(im, dtype) for im in images], dim=0)


def from_tensor(t: torch.Tensor) -> np.ndarray:
    """(1, C, H, W) or (C, H, W) tensor -> (H, W, C) float32 array."""
    if t.dim() == 4:
        t = t[0]
    return t.detach().cpu().numpy().transpose(1, 2, 0).astype(np.float32)


def seed_from(rng: np.random.Generator) -> int:
    """Draw a 63-bit torch seed from a numpy stream."""
    return int(rng.integers(0, 2**63 - 1))
