"""Point-prompt types and their rasterization into conditioning images.

A prompt is one of five kinds: a pose (joint points), an interest-region or
entire-region bbox (two corner points), or a pose combined with either bbox
kind. Prompts rasterize to a 3-channel map (single kind) or a 6-channel map
(pose channels 0-2, bbox channels 3-5). Kind ``none`` carries nothing and is
the dropout / unprompted-inference path.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from .draw import paint_disc, paint_segment
from .imaging import ShapeError

POSE_KINDS = ("pose", "pose_and_interest_bbox", "pose_and_entire_bbox")
BBOX_KINDS = ("interest_bbox", "entire_bbox", "pose_and_interest_bbox", "pose_and_entire_bbox")
COMPOSITE_KINDS = ("pose_and_interest_bbox", "pose_and_entire_bbox")
ALL_KINDS = ("pose", "interest_bbox", "entire_bbox") + COMPOSITE_KINDS + ("none",)

JOINT_ORIGINS = ("detected_visible", "user_added")


@dataclass(frozen=True)
class Joint:
    joint_id: int
    x: float
    y: float
    origin: str = "user_added"

    def __post_init__(self):
        if self.origin not in JOINT_ORIGINS:
            raise ValueError(f"unknown joint origin {self.origin!r}")


@dataclass(frozen=True)
class Skeleton:
    """Tree-structured skeleton with fixed, pairwise-distinct joint/edge colors."""

    joint_names: tuple
    edges: tuple  # (parent_id, child_id) pairs forming a tree
    joint_colors: tuple  # one RGB triple in [0,1] per joint
    edge_colors: tuple  # one RGB triple in [0,1] per edge
    root: int = 1
    # ids swapped under mirror flips, e.g. left_hand <-> right_hand
    mirror_pairs: tuple = ()

    @property
    def joint_count(self) -> int:
        return len(self.joint_names)

    def __post_init__(self):
        colors = list(self.joint_colors) + list(self.edge_colors)
        if len({tuple(c) for c in colors}) != len(colors):
            raise ValueError("skeleton colors must be pairwise distinct")
        if len(self.edges) != self.joint_count - 1:
            raise ValueError("edges must form a spanning tree")

    def mirror_id(self, joint_id: int) -> int:
        for a, b in self.mirror_pairs:
            if joint_id == a:
                return b
            if joint_id == b:
                return a
        return joint_id


HEAD, NECK, LEFT_HAND, RIGHT_HAND, PELVIS, LEFT_FOOT, RIGHT_FOOT = range(7)


def default_skeleton() -> Skeleton:
    """7-joint skeleton: the smallest tree with occludable left/right limbs."""
    return Skeleton(
        joint_names=(
            "head", "neck", "left_hand", "right_hand", "pelvis", "left_foot", "right_foot",
        ),
        edges=(
            (NECK, HEAD),
            (NECK, LEFT_HAND),
            (NECK, RIGHT_HAND),
            (NECK, PELVIS),
            (PELVIS, LEFT_FOOT),
            (PELVIS, RIGHT_FOOT),
        ),
        joint_colors=(
            (1.0, 0.2, 0.2),   # head
            (1.0, 0.8, 0.0),   # neck
            (0.2, 1.0, 0.2),   # left_hand
            (0.2, 1.0, 1.0),   # right_hand
            (0.4, 0.4, 1.0),   # pelvis
            (1.0, 0.2, 1.0),   # left_foot
            (1.0, 1.0, 1.0),   # right_foot
        ),
        edge_colors=(
            (0.6, 0.1, 0.1),
            (0.1, 0.6, 0.1),
            (0.1, 0.6, 0.6),
            (0.6, 0.6, 0.1),
            (0.6, 0.1, 0.6),
            (0.3, 0.3, 0.8),
        ),
        root=NECK,
        mirror_pairs=((LEFT_HAND, RIGHT_HAND), (LEFT_FOOT, RIGHT_FOOT)),
    )


@dataclass(frozen=True)
class BboxPrompt:
    """Axis-aligned box from two corner points, canonicalized to x1<=x2, y1<=y2."""

    x1: float
    y1: float
    x2: float
    y2: float
    kind: str = "interest_region"

    def __post_init__(self):
        if self.kind not in ("interest_region", "entire_region"):
            raise ValueError(f"unknown bbox kind {self.kind!r}")

    def canonical(self) -> "BboxPrompt":
        x1, x2 = sorted((self.x1, self.x2))
        y1, y2 = sorted((self.y1, self.y2))
        if x2 - x1 < 1.0:
            x2 = x1 + 1.0
        if y2 - y1 < 1.0:
            y2 = y1 + 1.0
        return BboxPrompt(x1, y1, x2, y2, self.kind)


@dataclass(frozen=True)
class PromptSpec:
    kind: str
    pose: Optional[tuple] = None  # tuple of Joint
    bbox: Optional[BboxPrompt] = None

    def __post_init__(self):
        if self.kind not in ALL_KINDS:
            raise ValueError(f"unknown prompt kind {self.kind!r}")
        needs_pose = self.kind in POSE_KINDS
        needs_bbox = self.kind in BBOX_KINDS
        if needs_pose != (self.pose is not None):
            raise ValueError(f"kind {self.kind!r} requires pose={'set' if needs_pose else 'absent'}")
        if needs_bbox != (self.bbox is not None):
            raise ValueError(f"kind {self.kind!r} requires bbox={'set' if needs_bbox else 'absent'}")
        if self.pose is not None:
            object.__setattr__(self, "pose", tuple(self.pose))

    def point_count(self) -> int:
        """Number of user-supplied points: added joints plus two per bbox."""
        n = 0
        if self.pose is not None:
            n += sum(1 for j in self.pose if j.origin == "user_added")
        if self.bbox is not None:
            n += 2
        return n

    def to_json(self) -> dict:
        doc: dict = {"kind": self.kind}
        if self.pose is not None:
            doc["joints"] = [
                {"id": j.joint_id, "x": j.x, "y": j.y, "origin": j.origin} for j in self.pose
            ]
        if self.bbox is not None:
            b = self.bbox.canonical()
            doc["bbox"] = {"x1": b.x1, "y1": b.y1, "x2": b.x2, "y2": b.y2, "kind": b.kind}
        return doc

    @staticmethod
    def from_json(doc: dict) -> "PromptSpec":
        kind = doc.get("kind")
        pose = None
        if "joints" in doc and doc["joints"] is not None:
            pose = tuple(
                Joint(int(j["id"]), float(j["x"]), float(j["y"]), j.get("origin", "user_added"))
                for j in doc["joints"]
            )
        bbox = None
        if "bbox" in doc and doc["bbox"] is not None:
            b = doc["bbox"]
            bbox = BboxPrompt(float(b["x1"]), float(b["y1"]), float(b["x2"]), float(b["y2"]), b["kind"])
        if (kind in POSE_KINDS) != (pose is not None):
            raise ValueError(f"kind {kind!r} disagrees with joints presence")
        if (kind in BBOX_KINDS) != (bbox is not None):
            raise ValueError(f"kind {kind!r} disagrees with bbox presence")
        return PromptSpec(kind=kind, pose=pose, bbox=bbox)

    def dumps(self) -> str:
        return json.dumps(self.to_json(), sort_keys=True)

    @staticmethod
    def loads(text: str) -> "PromptSpec":
        return PromptSpec.from_json(json.loads(text))


def none_prompt() -> PromptSpec:
    return PromptSpec(kind="none")


@dataclass(frozen=True)
class PromptImage:
    """Rasterized prompt: (H, W, 3) or (H, W, 6) float map in [0,1]."""

    data: np.ndarray
    channel_layout: str  # pose3 | bbox3 | pose_bbox6

    def __post_init__(self):
        c = self.data.shape[2]
        expected = 6 if self.channel_layout == "pose_bbox6" else 3
        if self.channel_layout not in ("pose3", "bbox3", "pose_bbox6") or c != expected:
            raise ShapeError(f"layout {self.channel_layout!r} incompatible with {self.data.shape}")

    @property
    def channels(self) -> int:
        return int(self.data.shape[2])

    def as_control_input(self) -> np.ndarray:
        """Canonical 6-channel layout fed to the control branch: pose 0-2, bbox 3-5."""
        h, w = self.data.shape[:2]
        out = np.zeros((h, w, 6), dtype=np.float32)
        if self.channel_layout == "pose3":
            out[:, :, 0:3] = self.data
        elif self.channel_layout == "bbox3":
            out[:, :, 3:6] = self.data
        else:
            out[:] = self.data
        return out


def zero_prompt_image(size, layout: str = "pose3") -> PromptImage:
    h, w = size
    c = 6 if layout == "pose_bbox6" else 3
    return PromptImage(np.zeros((h, w, c), dtype=np.float32), layout)


def pose_draw_params(size) -> tuple:
    """(disc radius, line width) scaled from 2 px / 2 px at 64x64."""
    scale = min(size) / 64.0
    return max(1, round(2 * scale)), max(1, round(2 * scale))


def render_pose_map(joints: Sequence[Joint], skeleton: Skeleton, size) -> PromptImage:
    """Rasterize joints onto a black canvas: edges first, then joint discs on top."""
    h, w = size
    seen = set()
    for j in joints:
        if not (0 <= j.joint_id < skeleton.joint_count):
            raise ValueError(f"joint_id {j.joint_id} invalid for this skeleton")
        if j.joint_id in seen:
            raise ValueError(f"duplicate joint_id {j.joint_id}")
        seen.add(j.joint_id)
        if not (0 <= j.x <= w - 1 and 0 <= j.y <= h - 1):
            raise ValueError(f"joint {j.joint_id} at ({j.x}, {j.y}) outside {h}x{w} canvas")
    canvas = np.zeros((h, w, 3), dtype=np.float32)
    radius, width = pose_draw_params(size)
    present = {j.joint_id: j for j in joints}
    for edge_idx, (a, b) in enumerate(skeleton.edges):
        if a in present and b in present:
            ja, jb = present[a], present[b]
            paint_segment(canvas, (ja.x, ja.y), (jb.x, jb.y), width, skeleton.edge_colors[edge_idx])
    for j in joints:
        paint_disc(canvas, j.x, j.y, radius, skeleton.joint_colors[j.joint_id])
    return PromptImage(canvas, "pose3")


def decode_pose_map(image: PromptImage, skeleton: Skeleton) -> list:
    """Recover (joint_id, x, y) from a rendered pose map via disc-color centroids."""
    out = []
    data = image.data if isinstance(image, PromptImage) else image
    for joint_id, color in enumerate(skeleton.joint_colors):
        hit = np.all(np.isclose(data, np.asarray(color, dtype=np.float32), atol=1e-6), axis=2)
        if hit.any():
            ys, xs = np.nonzero(hit)
            out.append((joint_id, float(xs.mean()), float(ys.mean())))
    return out


def render_bbox_map(bbox: BboxPrompt, size, thickness: int = 4) -> PromptImage:
    """White rectangle frame of the given thickness, growing inward from the boundary."""
    h, w = size
    b = bbox.canonical()
    x1, y1 = int(round(b.x1)), int(round(b.y1))
    x2, y2 = int(round(b.x2)), int(round(b.y2))
    if not (0 <= x1 < x2 <= w - 1 and 0 <= y1 < y2 <= h - 1):
        raise ValueError(f"bbox ({x1},{y1})-({x2},{y2}) outside or degenerate on {h}x{w}")
    canvas = np.zeros((h, w, 3), dtype=np.float32)
    canvas[y1 : y2 + 1, x1 : x2 + 1] = 1.0
    ix1, iy1 = x1 + thickness, y1 + thickness
    ix2, iy2 = x2 - thickness, y2 - thickness
    if ix1 <= ix2 and iy1 <= iy2:
        canvas[iy1 : iy2 + 1, ix1 : ix2 + 1] = 0.0
    return PromptImage(canvas, "bbox3")


def compose_prompt_image(
    spec: PromptSpec, skeleton: Skeleton, size, thickness: int = 4
) -> PromptImage:
    """Rasterize a prompt spec: pose3, bbox3, or concatenated pose_bbox6."""
    if spec.kind == "none":
        raise ValueError("kind=none has no raster; dropout is handled separately")
    pose_map = render_pose_map(spec.pose, skeleton, size) if spec.pose is not None else None
    bbox_map = render_bbox_map(spec.bbox, size, thickness) if spec.bbox is not None else None
    if pose_map is not None and bbox_map is not None:
        data = np.concatenate([pose_map.data, bbox_map.data], axis=2)
        return PromptImage(data, "pose_bbox6")
    return pose_map if pose_map is not None else bbox_map


def augment_bbox(
    bbox: BboxPrompt,
    rng: np.random.Generator,
    bounds,
    p: float = 0.5,
    scale_range=(0.9, 1.1),
    jitter: float = 2.0,
) -> BboxPrompt:
    """Training-time robustness jitter: with probability p, scale and perturb corners.

    Jitter magnitude is expressed at 64x64 and scaled with resolution; the
    result is clamped into bounds and re-canonicalized (min size 1x1).
    """
    h, w = bounds
    if rng.random() >= p:
        return bbox.canonical()
    b = bbox.canonical()
    res_scale = min(h, w) / 64.0
    s = rng.uniform(*scale_range)
    cx, cy = (b.x1 + b.x2) / 2.0, (b.y1 + b.y2) / 2.0
    half_w, half_h = (b.x2 - b.x1) / 2.0 * s, (b.y2 - b.y1) / 2.0 * s
    pts = np.array([cx - half_w, cy - half_h, cx + half_w, cy + half_h])
    pts += rng.uniform(-jitter, jitter, size=4) * res_scale
    x1 = float(np.clip(pts[0], 0, w - 2))
    y1 = float(np.clip(pts[1], 0, h - 2))
    x2 = float(np.clip(pts[2], x1 + 1, w - 1))
    y2 = float(np.clip(pts[3], y1 + 1, h - 1))
    return BboxPrompt(x1, y1, x2, y2, b.kind).canonical()


def dropout_prompt(
    prompt_image: PromptImage, rng: np.random.Generator, p: float = 0.05
) -> PromptImage:
    """With probability p, replace the whole prompt raster with zeros."""
    if rng.random() < p:
        return PromptImage(np.zeros_like(prompt_image.data), prompt_image.channel_layout)
    return prompt_image
