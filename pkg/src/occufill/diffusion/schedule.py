"""Noise schedule and the closed-form forward noising step."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch


@dataclass(frozen=True)
class NoiseSchedule:
    """Per-timestep coefficients; index t runs over [0, T)."""

    T: int
    beta: np.ndarray
    alpha: np.ndarray = field(init=False)
    alpha_bar: np.ndarray = field(init=False)

    def __post_init__(self):
        beta = np.asarray(self.beta, dtype=np.float64)
        if beta.shape != (self.T,):
            raise ValueError(f"beta must have shape ({self.T},)")
        if np.any(beta <= 0.0) or np.any(beta >= 1.0):
            raise ValueError("beta values must lie strictly in (0, 1)")
        if np.any(np.diff(beta) < -1e-12):
            raise ValueError("beta must be nondecreasing")
        alpha = 1.0 - beta
        alpha_bar = np.cumprod(alpha)
        if np.any(np.diff(alpha_bar) >= 0.0):
            raise ValueError("alpha_bar must be strictly decreasing")
        object.__setattr__(self, "beta", beta)
        object.__setattr__(self, "alpha", alpha)
        object.__setattr__(self, "alpha_bar", alpha_bar)

    def to_config(self) -> dict:
        return {"T": self.T, "beta": self.beta.tolist()}

    @staticmethod
    def from_config(cfg: dict) -> "NoiseSchedule":
        return NoiseSchedule(T=int(cfg["T"]), beta=np.asarray(cfg["beta"], dtype=np.float64))


def make_schedule(
    T: int = 1000,
    beta_min: float = 1e-4,
    beta_max: float = 2e-2,
    shape: str = "linear",
) -> NoiseSchedule:
    """Build a linear or cosine schedule with validated bounds."""
    if T < 1:
        raise ValueError("T must be >= 1")
    if not (0.0 < beta_min < beta_max < 1.0):
        raise ValueError("need 0 < beta_min < beta_max < 1")
    if shape == "linear":
        beta = np.linspace(beta_min, beta_max, T, dtype=np.float64)
    elif shape == "cosine":
        s = 0.008
        t = np.arange(T + 1, dtype=np.float64)
        f = np.cos(((t / T) + s) / (1 + s) * math.pi / 2.0) ** 2
        beta = 1.0 - f[1:] / f[:-1]
        beta = np.clip(beta, beta_min, min(beta_max, 0.999))
        beta = np.maximum.accumulate(beta)  # keep nondecreasing after clipping
    else:
        raise ValueError(f"unknown schedule shape {shape!r}")
    return NoiseSchedule(T=T, beta=beta)


def forward_noise(z0: torch.Tensor, t, eps: torch.Tensor, schedule: NoiseSchedule) -> torch.Tensor:
    """z_t = sqrt(alpha_bar_t) * z0 + sqrt(1 - alpha_bar_t) * eps, element-wise.

    ``t`` is an int or a per-item 1-D tensor; out-of-range timesteps are rejected.
    """
    if isinstance(t, torch.Tensor):
        ts = t.long()
        if ts.numel() and (int(ts.min()) < 0 or int(ts.max()) >= schedule.T):
            raise ValueError(f"timesteps must lie in [0, {schedule.T})")
        ab = torch.as_tensor(schedule.alpha_bar, dtype=z0.dtype, device=z0.device)[ts]
        shape = (-1,) + (1,) * (z0.dim() - 1)
        ab = ab.reshape(shape)
    else:
        if not 0 <= int(t) < schedule.T:
            raise ValueError(f"timestep {t} outside [0, {schedule.T})")
        ab = torch.tensor(schedule.alpha_bar[int(t)], dtype=z0.dtype, device=z0.device)
    return torch.sqrt(ab) * z0 + torch.sqrt(1.0 - ab) * eps
