"""Raster primitives shared by every stage.

Images are float arrays of shape (H, W, C) with C in {1, 3, 6} and values in
[0, 1]; binary masks are uint8 arrays of shape (H, W) with values in {0, 1}.
On disk both are 8-bit PNG: images round-trip losslessly at 8-bit
quantization, masks are single-channel PNGs with values {0, 255}.
"""
from __future__ import annotations

import numpy as np
from PIL import Image

MIN_SIDE = 8
MAX_SIDE = 1024


class ShapeError(ValueError):
    """Inputs disagree in height/width/channels."""


def as_image(arr: np.ndarray) -> np.ndarray:
    """Validate and return an image array (H, W, C), float, values in [0, 1]."""
    a = np.asarray(arr)
    if a.ndim == 2:
        a = a[:, :, None]
    if a.ndim != 3 or a.shape[2] not in (1, 3, 6):
        raise ShapeError(f"expected (H, W, C) with C in {{1,3,6}}, got {a.shape}")
    h, w = a.shape[:2]
    if not (MIN_SIDE <= h <= MAX_SIDE and MIN_SIDE <= w <= MAX_SIDE):
        raise ShapeError(f"image sides must be in [{MIN_SIDE}, {MAX_SIDE}], got {h}x{w}")
    a = a.astype(np.float32, copy=False)
    if a.size and (a.min() < 0.0 or a.max() > 1.0):
        raise ValueError("image values must lie in [0, 1]")
    return a


def as_mask(arr: np.ndarray) -> np.ndarray:
    """Validate and return a binary mask (H, W) of dtype uint8 with values {0, 1}."""
    m = np.asarray(arr)
    if m.ndim != 2:
        raise ShapeError(f"expected (H, W) mask, got shape {m.shape}")
    m = m.astype(np.uint8, copy=False)
    vals = np.unique(m)
    if not np.isin(vals, (0, 1)).all():
        raise ValueError("mask must be strictly binary")
    return m


def _check_same_hw(*arrays: np.ndarray) -> None:
    shapes = {a.shape[:2] for a in arrays}
    if len(shapes) != 1:
        raise ShapeError(f"height/width mismatch: {sorted(shapes)}")


def composite(base: np.ndarray, overlay: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Hard per-pixel select: base where mask=1, overlay where mask=0.

    Bit-exact selection, never blending.
    """
    base = as_image(base)
    overlay = as_image(overlay)
    mask = as_mask(mask)
    _check_same_hw(base, overlay, mask)
    if base.shape[2] != overlay.shape[2]:
        raise ShapeError(
            f"channel mismatch: base {base.shape[2]} vs overlay {overlay.shape[2]}"
        )
    sel = mask.astype(bool)[:, :, None]
    return np.where(sel, base, overlay)


def dilate(mask: np.ndarray, radius: int) -> np.ndarray:
    """Morphological dilation with a square (Chebyshev) element of side 2*radius+1.

    Output pixel is 1 iff any input 1-pixel lies within Chebyshev distance
    <= radius, so the output always contains the input.
    """
    mask = as_mask(mask)
    if radius < 0:
        raise ValueError("radius must be >= 0")
    if radius == 0:
        return mask.copy()
    h, w = mask.shape
    padded = np.zeros((h + 2 * radius, w + 2 * radius), dtype=np.uint8)
    padded[radius : radius + h, radius : radius + w] = mask
    out = np.zeros((h, w), dtype=np.uint8)
    for dy in range(2 * radius + 1):
        for dx in range(2 * radius + 1):
            np.maximum(out, padded[dy : dy + h, dx : dx + w], out=out)
    return out


def erode(mask: np.ndarray, radius: int) -> np.ndarray:
    """Morphological erosion with the same square element as :func:`dilate`."""
    mask = as_mask(mask)
    if radius < 0:
        raise ValueError("radius must be >= 0")
    inv = (1 - mask).astype(np.uint8)
    return (1 - dilate(inv, radius)).astype(np.uint8)


def occlusion_ratio(visible: np.ndarray, amodal: np.ndarray) -> float:
    """Fraction of the amodal support that is hidden: 1 - |visible| / |amodal|."""
    visible = as_mask(visible)
    amodal = as_mask(amodal)
    _check_same_hw(visible, amodal)
    amodal_count = int(amodal.sum())
    if amodal_count == 0:
        raise ValueError("amodal mask is empty")
    if np.any(visible > amodal):
        raise ValueError("visible mask must be a subset of the amodal mask")
    return 1.0 - int(visible.sum()) / amodal_count


def default_dilation_radius(height: int, width: int) -> int:
    """Dilation margin used before refinement: 2 px at 64x64, scaled with size."""
    return max(1, round(2 * min(height, width) / 64))


def quantize8(image: np.ndarray) -> np.ndarray:
    """Quantize a [0,1] image to uint8 exactly as PNG persistence does."""
    image = as_image(image)
    return np.round(image * 255.0).astype(np.uint8)


def save_image(path, image: np.ndarray) -> None:
    """Persist an image as 8-bit PNG (1 or 3 channels)."""
    q = quantize8(image)
    if q.shape[2] == 1:
        Image.fromarray(q[:, :, 0], mode="L").save(path)
    elif q.shape[2] == 3:
        Image.fromarray(q, mode="RGB").save(path)
    else:
        raise ShapeError("PNG persistence supports 1- or 3-channel images")


def load_image(path) -> np.ndarray:
    """Load an 8-bit PNG back into the [0,1] float domain."""
    with Image.open(path) as im:
        arr = np.asarray(im)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    return (arr.astype(np.float32) / 255.0).clip(0.0, 1.0)


def save_mask(path, mask: np.ndarray) -> None:
    """Persist a binary mask as a single-channel PNG with values {0, 255}."""
    m = as_mask(mask)
    Image.fromarray(m * np.uint8(255), mode="L").save(path)


def load_mask(path) -> np.ndarray:
    """Load a {0, 255} PNG back into a {0, 1} binary mask."""
    with Image.open(path) as im:
        arr = np.asarray(im.convert("L"))
    return (arr >= 128).astype(np.uint8)
