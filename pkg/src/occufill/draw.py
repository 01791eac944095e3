"""Deterministic painting primitives shared by prompt rendering and the forge."""
from __future__ import annotations

import numpy as np


def paint_disc(canvas: np.ndarray, x: float, y: float, radius: float, color, coverage=None):
    """Fill pixels with Euclidean distance <= radius from (x, y)."""
    h, w = canvas.shape[:2]
    ys, xs = np.mgrid[0:h, 0:w]
    inside = (xs - x) ** 2 + (ys - y) ** 2 <= radius**2
    canvas[inside] = color
    if coverage is not None:
        coverage |= inside
    return inside


def paint_segment(canvas: np.ndarray, p0, p1, width: float, color, coverage=None):
    """Fill pixels within width/2 of the segment p0-p1 (capsule stroke)."""
    h, w = canvas.shape[:2]
    ys, xs = np.mgrid[0:h, 0:w]
    px, py = xs.astype(np.float64), ys.astype(np.float64)
    (x0, y0), (x1, y1) = p0, p1
    dx, dy = x1 - x0, y1 - y0
    seg2 = dx * dx + dy * dy
    if seg2 == 0:
        dist2 = (px - x0) ** 2 + (py - y0) ** 2
    else:
        t = np.clip(((px - x0) * dx + (py - y0) * dy) / seg2, 0.0, 1.0)
        dist2 = (px - (x0 + t * dx)) ** 2 + (py - (y0 + t * dy)) ** 2
    inside = dist2 <= (width / 2.0) ** 2
    canvas[inside] = color
    if coverage is not None:
        coverage |= inside
    return inside


def affine_warp(image: np.ndarray, matrix: np.ndarray, out_shape, order: int = 1) -> np.ndarray:
    """Inverse-mapping affine warp with zero fill.

    ``matrix`` is the 2x3 forward map (x_out, y_out) = A @ (x_in, y_in) + t;
    order 1 = bilinear, order 0 = nearest.
    """
    h_out, w_out = out_shape
    a = np.vstack([matrix, [0.0, 0.0, 1.0]])
    inv = np.linalg.inv(a)
    ys, xs = np.mgrid[0:h_out, 0:w_out]
    src_x = inv[0, 0] * xs + inv[0, 1] * ys + inv[0, 2]
    src_y = inv[1, 0] * xs + inv[1, 1] * ys + inv[1, 2]
    h_in, w_in = image.shape[:2]
    squeeze = image.ndim == 2
    img = image[:, :, None] if squeeze else image

    if order == 0:
        xi = np.round(src_x).astype(np.int64)
        yi = np.round(src_y).astype(np.int64)
        valid = (xi >= 0) & (xi < w_in) & (yi >= 0) & (yi < h_in)
        out = np.zeros((h_out, w_out, img.shape[2]), dtype=img.dtype)
        out[valid] = img[yi[valid], xi[valid]]
    else:
        x0 = np.floor(src_x).astype(np.int64)
        y0 = np.floor(src_y).astype(np.int64)
        fx = (src_x - x0)[:, :, None]
        fy = (src_y - y0)[:, :, None]
        out = np.zeros((h_out, w_out, img.shape[2]), dtype=np.float64)
        for oy, ox, wgt in (
            (0, 0, (1 - fx) * (1 - fy)),
            (0, 1, fx * (1 - fy)),
            (1, 0, (1 - fx) * fy),
            (1, 1, fx * fy),
        ):
            xi = x0 + ox
            yi = y0 + oy
            valid = (xi >= 0) & (xi < w_in) & (yi >= 0) & (yi < h_in)
            vals = np.zeros((h_out, w_out, img.shape[2]), dtype=np.float64)
            vals[valid] = img[yi[valid], xi[valid]]
            out += wgt * vals
        out = out.astype(img.dtype if img.dtype == np.float64 else np.float32)
    return out[:, :, 0] if squeeze else out


def transform_points(points: np.ndarray, matrix: np.ndarray) -> np.ndarray:
    """Apply the forward 2x3 affine to an (N, 2) array of (x, y) points."""
    pts = np.asarray(points, dtype=np.float64)
    return pts @ matrix[:, :2].T + matrix[:, 2]
