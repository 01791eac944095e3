"""Reconstruction and mask metrics, whole-image or restricted to a region.

All functions operate on [0,1] float images; PSNR uses the unit dynamic range
and is capped at 99 dB. SSIM uses an 11x11 Gaussian window (sigma 1.5) with
stabilizers C1=0.01^2, C2=0.03^2 and averages over valid window centers and
channels; region-restricted SSIM counts a window iff its center pixel is in
the region.
"""
from __future__ import annotations

from typing import Optional, Tuple

import numpy as np

from .imaging import ShapeError, as_image, as_mask

PSNR_CEILING_DB = 99.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2


def _check_pair(a: np.ndarray, b: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    a = as_image(a)
    b = as_image(b)
    if a.shape != b.shape:
        raise ShapeError(f"image shapes differ: {a.shape} vs {b.shape}")
    return a, b


def mse(a: np.ndarray, b: np.ndarray, region: Optional[np.ndarray] = None) -> float:
    """Mean squared difference, over the whole image or a nonempty region."""
    a, b = _check_pair(a, b)
    diff2 = (a.astype(np.float64) - b.astype(np.float64)) ** 2
    if region is None:
        return float(diff2.mean())
    region = as_mask(region)
    if region.shape != a.shape[:2]:
        raise ShapeError("region shape differs from images")
    count = int(region.sum())
    if count == 0:
        raise ValueError("region is empty")
    return float(diff2[region.astype(bool)].mean())


def psnr(a: np.ndarray, b: np.ndarray, region: Optional[np.ndarray] = None) -> float:
    """10*log10(1/MSE) on the unit range, capped at 99 dB."""
    err = mse(a, b, region)
    if err == 0.0:
        return PSNR_CEILING_DB
    return float(min(10.0 * np.log10(1.0 / err), PSNR_CEILING_DB))


def _gaussian_kernel(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    half = (size - 1) / 2.0
    x = np.arange(size) - half
    k = np.exp(-(x**2) / (2.0 * sigma**2))
    return k / k.sum()


def _filter_valid(img: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """Separable 2-D correlation, valid mode (no padding)."""
    k = len(kernel)
    h, w = img.shape
    # rows
    out = np.zeros((h, w - k + 1), dtype=np.float64)
    for i in range(k):
        out += kernel[i] * img[:, i : i + w - k + 1]
    # cols
    out2 = np.zeros((h - k + 1, w - k + 1), dtype=np.float64)
    for i in range(k):
        out2 += kernel[i] * out[i : i + h - k + 1, :]
    return out2


def ssim_map(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Per-center SSIM over valid window positions, shape (H-10, W-10, C)."""
    a, b = _check_pair(a, b)
    h, w = a.shape[:2]
    if h < SSIM_WINDOW or w < SSIM_WINDOW:
        raise ShapeError(f"images must be at least {SSIM_WINDOW}x{SSIM_WINDOW} for SSIM")
    kernel = _gaussian_kernel()
    maps = []
    for c in range(a.shape[2]):
        x = a[:, :, c].astype(np.float64)
        y = b[:, :, c].astype(np.float64)
        mu_x = _filter_valid(x, kernel)
        mu_y = _filter_valid(y, kernel)
        var_x = _filter_valid(x * x, kernel) - mu_x**2
        var_y = _filter_valid(y * y, kernel) - mu_y**2
        cov = _filter_valid(x * y, kernel) - mu_x * mu_y
        num = (2 * mu_x * mu_y + SSIM_C1) * (2 * cov + SSIM_C2)
        den = (mu_x**2 + mu_y**2 + SSIM_C1) * (var_x + var_y + SSIM_C2)
        maps.append(num / den)
    return np.stack(maps, axis=2)


def ssim(a: np.ndarray, b: np.ndarray, region: Optional[np.ndarray] = None) -> float:
    """Mean SSIM over valid windows and channels.

    With a region, a window contributes iff its center pixel is in the region.
    """
    smap = ssim_map(a, b)
    if region is None:
        return float(smap.mean())
    region = as_mask(region)
    half = (SSIM_WINDOW - 1) // 2
    centers = region[half : region.shape[0] - half, half : region.shape[1] - half]
    sel = centers.astype(bool)
    if not sel.any():
        raise ValueError("region contains no valid window centers")
    return float(smap[sel].mean())


def mask_scores(pred: np.ndarray, gt: np.ndarray) -> Tuple[float, float]:
    """(IoU, mean absolute difference); IoU of two empty masks is 1."""
    pred = as_mask(pred)
    gt = as_mask(gt)
    if pred.shape != gt.shape:
        raise ShapeError("mask shapes differ")
    inter = int((pred & gt).sum())
    union = int((pred | gt).sum())
    iou = 1.0 if union == 0 else inter / union
    l1 = float(np.abs(pred.astype(np.float64) - gt.astype(np.float64)).mean())
    return iou, l1


def region_report(
    generated: np.ndarray,
    gt_complete: np.ndarray,
    visible_mask: np.ndarray,
    invisible_mask: np.ndarray,
) -> dict:
    """MSE/PSNR/SSIM rows for {whole, visible, invisible}.

    The two masks must be disjoint (they partition the amodal support). An
    empty invisible region omits its row and sets ``invisible_empty``.
    """
    visible_mask = as_mask(visible_mask)
    invisible_mask = as_mask(invisible_mask)
    if np.any(visible_mask & invisible_mask):
        raise ValueError("visible and invisible masks overlap")
    rows = {
        "whole": {
            "mse": mse(generated, gt_complete),
            "psnr": psnr(generated, gt_complete),
            "ssim": ssim(generated, gt_complete),
        },
        "visible": {
            "mse": mse(generated, gt_complete, visible_mask),
            "psnr": psnr(generated, gt_complete, visible_mask),
            "ssim": ssim(generated, gt_complete, visible_mask),
        },
    }
    flags = {"invisible_empty": False}
    if int(invisible_mask.sum()) == 0:
        flags["invisible_empty"] = True
    else:
        rows["invisible"] = {
            "mse": mse(generated, gt_complete, invisible_mask),
            "psnr": psnr(generated, gt_complete, invisible_mask),
            "ssim": ssim(generated, gt_complete, invisible_mask),
        }
    return {"rows": rows, "flags": flags}


def prompt_efficiency(
    report_prompted: dict, report_unprompted: dict, points_per_prompt: float
) -> Tuple[float, float]:
    """Joint-error gain from prompting and the gain per user-supplied point.

    Both reports must cover the same (sample, seed) set and expose a mean
    joint error under key ``joint_error``.
    """
    key_p = report_prompted.get("pairs")
    key_u = report_unprompted.get("pairs")
    if key_p is not None and key_u is not None and key_p != key_u:
        raise ValueError("reports cover different (sample, seed) sets")
    if points_per_prompt <= 0:
        raise ValueError("points_per_prompt must be positive")
    delta = float(report_unprompted["joint_error"]) - float(report_prompted["joint_error"])
    return delta, delta / float(points_per_prompt)
