"""Synthetic occlusion dataset construction.

Procedural stick-figure subjects are rendered from analytic forward
kinematics, augmented (flip / rotate / scale, each fired independently at
30%), composited onto procedural backgrounds, and occluded by procedural
shapes placed to hit a Gaussian-sampled target occlusion ratio. Every sample
carries exact ground truth: complete image, occluded image, visible / amodal /
invisible masks, joint coordinates, and the realized occlusion ratio.

Directory layout:
    <out>/<split>/<subject>_<view>/{complete.png, occluded.png,
        visible_mask.png, amodal_mask.png, invisible_mask.png, pose.json}
    <out>/manifest.json
"""
from __future__ import annotations

import json
import math
import shutil
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import imaging
from .draw import affine_warp, paint_disc, paint_segment, transform_points
from .imaging import composite, occlusion_ratio
from .prompts import (
    HEAD, LEFT_FOOT, LEFT_HAND, NECK, PELVIS, RIGHT_FOOT, RIGHT_HAND,
    Joint, Skeleton, default_skeleton,
)

AUGMENT_PROB = 0.30
ROTATION_RANGE = (0.0, 360.0)  # degrees, U[0, 360)
SCALE_RANGE = (0.5, 1.5)
MAX_OFFCANVAS_FRACTION = 0.20
PLACEMENT_ATTEMPTS = 64
RATIO_TOLERANCE = 0.05


@dataclass(frozen=True)
class SubjectSpec:
    """Procedural stick-person: limb geometry in 64-unit model space plus colors."""

    seed: int
    torso_len: float
    arm_len: float
    leg_len: float
    head_radius: float
    lean_deg: float
    arm_angles: tuple  # (left, right) degrees; 90 = straight down
    leg_angles: tuple
    colors: dict  # torso / arm / leg / head RGB triples

    @staticmethod
    def random(seed: int) -> "SubjectSpec":
        rng = np.random.default_rng(np.random.SeedSequence([0x5AB1, seed]))
        hues = rng.permutation(8)[:4] / 8.0 + rng.uniform(0, 1 / 8)
        colors = {
            name: _hsv_to_rgb(h % 1.0, rng.uniform(0.6, 0.95), rng.uniform(0.7, 1.0))
            for name, h in zip(("torso", "arm", "leg", "head"), hues)
        }
        return SubjectSpec(
            seed=seed,
            torso_len=float(rng.uniform(14, 19)),
            arm_len=float(rng.uniform(8, 11)),
            leg_len=float(rng.uniform(9, 13)),
            head_radius=float(rng.uniform(3.0, 4.2)),
            lean_deg=float(rng.uniform(-8, 8)),
            arm_angles=(float(rng.uniform(115, 155)), float(rng.uniform(25, 65))),
            leg_angles=(float(rng.uniform(100, 135)), float(rng.uniform(45, 80))),
            colors=colors,
        )


def _hsv_to_rgb(h: float, s: float, v: float) -> tuple:
    i = int(h * 6.0) % 6
    f = h * 6.0 - int(h * 6.0)
    p, q, t = v * (1 - s), v * (1 - s * f), v * (1 - s * (1 - f))
    rgb = [(v, t, p), (q, v, p), (p, v, t), (p, q, v), (t, p, v), (v, p, q)][i]
    return tuple(round(c, 4) for c in rgb)


def joint_positions(spec: SubjectSpec, view: int, size: int = 64) -> np.ndarray:
    """Analytic forward kinematics: (7, 2) array of (x, y) pixel coordinates.

    Views are deterministic angle perturbations of the same subject.
    """
    vrng = np.random.default_rng(np.random.SeedSequence([0x71E3, spec.seed, view]))
    d_arm = vrng.uniform(-22, 22, size=2)
    d_leg = vrng.uniform(-18, 18, size=2)
    d_lean = vrng.uniform(-6, 6)
    scale = size / 64.0
    cx, cy = (size - 1) / 2.0, (size - 1) / 2.0

    lean = math.radians(spec.lean_deg + d_lean)
    up = np.array([math.sin(lean), -math.cos(lean)])
    neck = np.array([cx, cy]) + up * (spec.torso_len / 2.0) * scale
    pelvis = np.array([cx, cy]) - up * (spec.torso_len / 2.0) * scale
    head = neck + up * (spec.head_radius + 2.5) * scale

    def limb(origin, angle_deg, length):
        a = math.radians(angle_deg)
        return origin + np.array([math.cos(a), math.sin(a)]) * length * scale

    lhand = limb(neck, spec.arm_angles[0] + d_arm[0], spec.arm_len)
    rhand = limb(neck, spec.arm_angles[1] + d_arm[1], spec.arm_len)
    lfoot = limb(pelvis, spec.leg_angles[0] + d_leg[0], spec.leg_len)
    rfoot = limb(pelvis, spec.leg_angles[1] + d_leg[1], spec.leg_len)

    pts = np.zeros((7, 2))
    pts[HEAD], pts[NECK], pts[PELVIS] = head, neck, pelvis
    pts[LEFT_HAND], pts[RIGHT_HAND] = lhand, rhand
    pts[LEFT_FOOT], pts[RIGHT_FOOT] = lfoot, rfoot
    return pts


def render_body(
    joints: np.ndarray, spec: SubjectSpec, size: int, width_scale: float = 1.0
) -> tuple:
    """Rasterize the body from joint coordinates; returns (image, mask)."""
    s = size / 64.0 * width_scale
    canvas = np.zeros((size, size, 3), dtype=np.float32)
    cover = np.zeros((size, size), dtype=bool)
    c = spec.colors
    paint_segment(canvas, joints[NECK], joints[PELVIS], 5.0 * s, c["torso"], cover)
    paint_segment(canvas, joints[NECK], joints[HEAD], 2.5 * s, c["head"], cover)
    paint_segment(canvas, joints[NECK], joints[LEFT_HAND], 2.5 * s, c["arm"], cover)
    paint_segment(canvas, joints[NECK], joints[RIGHT_HAND], 2.5 * s, c["arm"], cover)
    paint_segment(canvas, joints[PELVIS], joints[LEFT_FOOT], 3.0 * s, c["leg"], cover)
    paint_segment(canvas, joints[PELVIS], joints[RIGHT_FOOT], 3.0 * s, c["leg"], cover)
    paint_disc(canvas, joints[HEAD][0], joints[HEAD][1], spec.head_radius * s, c["head"], cover)
    return canvas, cover.astype(np.uint8)


def render_subject(spec: SubjectSpec, view: int, size: int = 64) -> tuple:
    """Deterministic subject raster: (image, mask, joints as (7, 2) array)."""
    joints = joint_positions(spec, view, size)
    if (joints < 1).any() or (joints > size - 2).any():
        raise ValueError(f"subject {spec.seed} view {view}: joints off canvas")
    image, mask = render_body(joints, spec, size)
    return image, mask, joints


def _joints_to_records(joints: np.ndarray, visible_mask: np.ndarray) -> list:
    """Tag each GT joint by whether it falls on a visible pixel."""
    recs = []
    h, w = visible_mask.shape
    for joint_id, (x, y) in enumerate(joints):
        xi = int(np.clip(round(x), 0, w - 1))
        yi = int(np.clip(round(y), 0, h - 1))
        origin = "detected_visible" if visible_mask[yi, xi] else "user_added"
        recs.append(Joint(joint_id, float(x), float(y), origin))
    return recs


def augmentation_matrix(
    size: int, flip_h: bool, flip_v: bool, angle_deg: float, scale: float
) -> np.ndarray:
    """Forward 2x3 affine about the canvas center: flips, then rotation, then scale."""
    c = (size - 1) / 2.0
    m = np.eye(3)

    def about_center(a2):
        t = np.eye(3)
        t[:2, :2] = a2
        t[:2, 2] = np.array([c, c]) - a2 @ np.array([c, c])
        return t

    if flip_h:
        m = about_center(np.array([[-1.0, 0.0], [0.0, 1.0]])) @ m
    if flip_v:
        m = about_center(np.array([[1.0, 0.0], [0.0, -1.0]])) @ m
    if angle_deg:
        a = math.radians(angle_deg)
        m = about_center(np.array([[math.cos(a), -math.sin(a)], [math.sin(a), math.cos(a)]])) @ m
    if scale != 1.0:
        m = about_center(np.array([[scale, 0.0], [0.0, scale]])) @ m
    return m[:2, :]


def augment(
    image: np.ndarray,
    mask: np.ndarray,
    joints: np.ndarray,
    rng: np.random.Generator,
    spec: Optional[SubjectSpec] = None,
    skeleton: Optional[Skeleton] = None,
    max_retries: int = 8,
    return_params: bool = False,
):
    """Apply flip/flip/rotate/scale, each independently with probability 0.30.

    Joint coordinates transform analytically. For procedural subjects (spec
    given) the raster is regenerated from the transformed joints, which is the
    exact geometric transform for this renderer; otherwise the same affine
    warps the image (bilinear) and mask (nearest). Mirror flips swap
    left/right joint ids so the pose colors stay anatomically consistent.
    Transforms pushing more than 20% of the mask off canvas (or any joint out
    of bounds) are resampled.
    """
    skeleton = skeleton or default_skeleton()
    size = mask.shape[0]
    total = int(mask.sum())
    for _ in range(max_retries + 1):
        flip_h = rng.random() < AUGMENT_PROB
        flip_v = rng.random() < AUGMENT_PROB
        rotate = rng.random() < AUGMENT_PROB
        rescale = rng.random() < AUGMENT_PROB
        angle = float(rng.uniform(*ROTATION_RANGE)) if rotate else 0.0
        scale = float(rng.uniform(*SCALE_RANGE)) if rescale else 1.0

        m = augmentation_matrix(size, flip_h, flip_v, angle, scale)
        new_joints = transform_points(joints, m)
        joints_ok = (new_joints >= 0).all() and (new_joints <= size - 1).all()
        if not joints_ok:
            continue
        if spec is not None:
            new_image, new_mask = render_body(new_joints, spec, size, width_scale=scale)
        else:
            new_mask = affine_warp(mask, m, (size, size), order=0)
            new_image = affine_warp(image, m, (size, size), order=1).clip(0.0, 1.0)
        kept = int(new_mask.sum())
        expected = total * scale * scale
        if kept >= (1.0 - MAX_OFFCANVAS_FRACTION) * expected and kept > 0:
            # mirror flips swap chirality once each
            swaps = int(flip_h) + int(flip_v)
            if swaps % 2 == 1:
                order = [skeleton.mirror_id(i) for i in range(skeleton.joint_count)]
                new_joints = new_joints[order]
            if return_params:
                return new_image, new_mask, new_joints, {
                    "flip_h": flip_h, "flip_v": flip_v, "angle": angle, "scale": scale,
                }
            return new_image, new_mask, new_joints
    raise RuntimeError("augmentation retries exhausted: transform keeps leaving the canvas")


def sample_occlusion_ratio(
    rng: np.random.Generator, mu: float, sigma: float, lo: float, hi: float
) -> float:
    """Gaussian draw restricted to [lo, hi] by rejection."""
    if not (0.0 <= lo < hi <= 1.0):
        raise ValueError("need 0 <= lo < hi <= 1")
    if sigma == 0.0:
        return float(np.clip(mu, lo, hi))
    while True:
        draw = rng.normal(mu, sigma)
        if lo <= draw <= hi:
            return float(draw)


def render_background(rng: np.random.Generator, size: int) -> np.ndarray:
    """Muted procedural background: two-color gradient plus a couple of soft blobs."""
    c0 = rng.uniform(0.15, 0.5, size=3)
    c1 = rng.uniform(0.15, 0.5, size=3)
    axis = rng.integers(0, 2)
    ramp = np.linspace(0.0, 1.0, size)
    field2d = ramp[:, None] if axis == 0 else ramp[None, :]
    field2d = np.broadcast_to(field2d, (size, size))[:, :, None]
    bg = c0[None, None, :] * (1 - field2d) + c1[None, None, :] * field2d
    ys, xs = np.mgrid[0:size, 0:size]
    for _ in range(int(rng.integers(1, 4))):
        cx, cy = rng.uniform(0, size, size=2)
        r = rng.uniform(size / 6, size / 2.5)
        tint = rng.uniform(-0.08, 0.08, size=3)
        blob = np.exp(-((xs - cx) ** 2 + (ys - cy) ** 2) / (2 * r * r))
        bg = bg + blob[:, :, None] * tint[None, None, :]
    return bg.clip(0.05, 0.9).astype(np.float32)


def render_occluder(rng: np.random.Generator, size: int, area: float) -> tuple:
    """Procedural occluder with an exact mask; area is the target pixel count."""
    canvas = np.zeros((size, size, 3), dtype=np.float32)
    cover = np.zeros((size, size), dtype=bool)
    color = _hsv_to_rgb(float(rng.uniform(0, 1)), float(rng.uniform(0.5, 0.9)), float(rng.uniform(0.55, 0.95)))
    shape = rng.choice(["rectangle", "ellipse", "blob"])
    cx, cy = rng.uniform(size * 0.2, size * 0.8, size=2)
    if shape == "rectangle":
        aspect = rng.uniform(0.5, 2.0)
        half_w = max(1.0, math.sqrt(area * aspect) / 2.0)
        half_h = max(1.0, math.sqrt(area / aspect) / 2.0)
        ys, xs = np.mgrid[0:size, 0:size]
        inside = (np.abs(xs - cx) <= half_w) & (np.abs(ys - cy) <= half_h)
        canvas[inside] = color
        cover |= inside
    elif shape == "ellipse":
        aspect = rng.uniform(0.5, 2.0)
        rx = max(1.0, math.sqrt(area * aspect / math.pi))
        ry = max(1.0, math.sqrt(area / (aspect * math.pi)))
        ys, xs = np.mgrid[0:size, 0:size]
        inside = ((xs - cx) / rx) ** 2 + ((ys - cy) / ry) ** 2 <= 1.0
        canvas[inside] = color
        cover |= inside
    else:
        n = int(rng.integers(3, 6))
        r = max(1.5, math.sqrt(area / (n * math.pi)) * 1.4)
        for _ in range(n):
            ox, oy = rng.uniform(-r * 1.2, r * 1.2, size=2)
            paint_disc(canvas, cx + ox, cy + oy, r, color, cover)
    # stripe texture so occluders are visually distinct from subjects
    if rng.random() < 0.5:
        period = int(rng.integers(3, 6))
        ys, xs = np.mgrid[0:size, 0:size]
        stripes = ((xs + ys) // period) % 2 == 0
        darker = tuple(c * 0.6 for c in color)
        canvas[cover & stripes] = darker
    return canvas, cover.astype(np.uint8)


@dataclass
class Sample:
    """One dataset record with exact ground truth."""

    complete: np.ndarray
    occluded: np.ndarray
    visible_mask: np.ndarray
    amodal_mask: np.ndarray
    invisible_mask: np.ndarray
    joints: list  # list[Joint]
    ratio: float
    seeds: dict

    def validate(self) -> None:
        if np.any(self.visible_mask > self.amodal_mask):
            raise ValueError("visible mask not a subset of amodal mask")
        expect_inv = (self.amodal_mask & (1 - self.visible_mask)).astype(np.uint8)
        if not np.array_equal(expect_inv, self.invisible_mask):
            raise ValueError("invisible mask != amodal AND NOT visible")


def composite_scene(
    subject: tuple,
    background: np.ndarray,
    occluder_fn,
    target_ratio: float,
    rng: np.random.Generator,
    seeds: Optional[dict] = None,
) -> Sample:
    """Assemble one sample, searching occluder placement to hit the target ratio.

    ``occluder_fn(rng, area)`` must return an (image, mask) pair; placement is
    retried up to 64 times and accepted within +/-0.05 of the target.
    """
    image, amodal, joints = subject
    if not (0.0 <= target_ratio < 1.0):
        raise ValueError("target_ratio must be in [0, 1)")
    size = amodal.shape[0]
    complete = composite(image, background, amodal)
    amodal_count = int(amodal.sum())

    if target_ratio == 0.0:
        visible = amodal.copy()
        invisible = np.zeros_like(amodal)
        occluded = complete.copy()
        sample = Sample(complete, occluded, visible, amodal, invisible,
                        _joints_to_records(joints, visible), 0.0, seeds or {})
        sample.validate()
        return sample

    area = max(4.0, target_ratio * amodal_count * 1.3)
    ys, xs = np.nonzero(amodal)
    best = None
    for _ in range(PLACEMENT_ATTEMPTS):
        occ_img, occ_mask = occluder_fn(rng, area)
        # anchor the occluder near a random subject pixel so it overlaps
        idx = rng.integers(0, len(xs))
        occ_ys, occ_xs = np.nonzero(occ_mask)
        if len(occ_xs) == 0:
            continue
        shift_x = int(xs[idx] - occ_xs.mean() + rng.integers(-4, 5))
        shift_y = int(ys[idx] - occ_ys.mean() + rng.integers(-4, 5))
        occ_mask_s = np.zeros_like(occ_mask)
        occ_img_s = np.zeros_like(occ_img)
        src_y = slice(max(0, -shift_y), min(size, size - shift_y))
        src_x = slice(max(0, -shift_x), min(size, size - shift_x))
        dst_y = slice(max(0, shift_y), max(0, shift_y) + (src_y.stop - src_y.start))
        dst_x = slice(max(0, shift_x), max(0, shift_x) + (src_x.stop - src_x.start))
        occ_mask_s[dst_y, dst_x] = occ_mask[src_y, src_x]
        occ_img_s[dst_y, dst_x] = occ_img[src_y, src_x]

        visible = (amodal & (1 - occ_mask_s)).astype(np.uint8)
        realized = 1.0 - int(visible.sum()) / amodal_count
        err = abs(realized - target_ratio)
        if best is None or err < best[0]:
            best = (err, occ_img_s, occ_mask_s, visible, realized)
        if err <= RATIO_TOLERANCE:
            break
        # feedback on the footprint size for the next attempt
        if realized < target_ratio:
            area *= min(2.0, (target_ratio + 0.02) / max(realized, 0.02))
        else:
            area *= max(0.5, target_ratio / realized)
    if best is None or best[0] > RATIO_TOLERANCE:
        raise RuntimeError(f"occluder placement failed for target {target_ratio:.3f}")
    _, occ_img_s, occ_mask_s, visible, realized = best
    occluded = composite(occ_img_s, complete, occ_mask_s)
    invisible = (amodal & (1 - visible)).astype(np.uint8)
    sample = Sample(complete, occluded, visible, amodal, invisible,
                    _joints_to_records(joints, visible), float(realized), seeds or {})
    sample.validate()
    return sample


@dataclass
class ForgeConfig:
    subjects: int = 64
    views: int = 4
    size: int = 64
    mu: float = 0.3
    sigma: float = 0.15
    lo: float = 0.05
    hi: float = 0.9
    test_subjects: int = 8
    seed: int = 0
    out_dir: str = "dataset"


def sample_rng(global_seed: int, subject: int, view: int) -> np.random.Generator:
    """Per-sample stream derived from (global seed, subject, view)."""
    return np.random.default_rng(np.random.SeedSequence([global_seed, subject, view]))


def make_sample(config: ForgeConfig, subject: int, view: int) -> Sample:
    """Render, augment, and composite one (subject, view) sample deterministically."""
    rng = sample_rng(config.seed, subject, view)
    spec = SubjectSpec.random(subject * 100003 + config.seed)
    image, mask, joints = render_subject(spec, view, config.size)
    image, mask, joints = augment(image, mask, joints, rng, spec=spec)
    background = render_background(rng, config.size)
    target = sample_occlusion_ratio(rng, config.mu, config.sigma, config.lo, config.hi)
    occluder_fn = lambda r, area: render_occluder(r, config.size, area)
    return composite_scene(
        (image, mask, joints), background, occluder_fn, target, rng,
        seeds={"global": config.seed, "subject": subject, "view": view},
    )


def build_dataset(config: ForgeConfig, log=None) -> dict:
    """Generate the full subject x view grid, persist it, and write the manifest.

    Subjects are split disjointly: the last ``test_subjects`` go to test. Fully
    reproducible from the global seed; failed placements are skipped and logged.
    """
    if config.subjects < 1 or config.views < 1 or config.test_subjects < 1:
        raise ValueError("need subjects, views, test_subjects >= 1")
    if config.test_subjects >= config.subjects:
        raise ValueError("test_subjects must leave at least one training subject")
    out = Path(config.out_dir)
    if out.exists():
        shutil.rmtree(out)
    train_cut = config.subjects - config.test_subjects
    entries = []
    skipped = []
    try:
        for subject in range(config.subjects):
            split = "train" if subject < train_cut else "test"
            for view in range(config.views):
                try:
                    sample = make_sample(config, subject, view)
                except RuntimeError as exc:
                    skipped.append({"subject": subject, "view": view, "reason": str(exc)})
                    if log:
                        log(f"skip subject {subject} view {view}: {exc}")
                    continue
                rel = f"{split}/{subject:04d}_{view:02d}"
                sdir = out / rel
                sdir.mkdir(parents=True, exist_ok=True)
                imaging.save_image(sdir / "complete.png", sample.complete)
                imaging.save_image(sdir / "occluded.png", sample.occluded)
                imaging.save_mask(sdir / "visible_mask.png", sample.visible_mask)
                imaging.save_mask(sdir / "amodal_mask.png", sample.amodal_mask)
                imaging.save_mask(sdir / "invisible_mask.png", sample.invisible_mask)
                pose_doc = {
                    "joints": [
                        {"id": j.joint_id, "x": round(j.x, 4), "y": round(j.y, 4), "origin": j.origin}
                        for j in sample.joints
                    ]
                }
                (sdir / "pose.json").write_text(json.dumps(pose_doc, sort_keys=True, indent=1))
                entries.append({
                    "subject": subject,
                    "view": view,
                    "split": split,
                    "path": rel,
                    "ratio": round(sample.ratio, 6),
                })
    except Exception:
        shutil.rmtree(out, ignore_errors=True)
        raise
    manifest = {
        "size": config.size,
        "subjects": config.subjects,
        "views": config.views,
        "test_subjects": config.test_subjects,
        "global_seed": config.seed,
        "ratio_distribution": {"mu": config.mu, "sigma": config.sigma,
                               "lo": config.lo, "hi": config.hi},
        "samples": entries,
        "skipped": skipped,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, sort_keys=True, indent=1))
    return manifest


def load_manifest(data_dir) -> dict:
    return json.loads((Path(data_dir) / "manifest.json").read_text())


def load_sample(data_dir, entry: dict) -> Sample:
    """Load one persisted sample back into arrays and joint records."""
    sdir = Path(data_dir) / entry["path"]
    pose = json.loads((sdir / "pose.json").read_text())
    joints = [Joint(int(j["id"]), float(j["x"]), float(j["y"]), j["origin"])
              for j in pose["joints"]]
    return Sample(
        complete=imaging.load_image(sdir / "complete.png"),
        occluded=imaging.load_image(sdir / "occluded.png"),
        visible_mask=imaging.load_mask(sdir / "visible_mask.png"),
        amodal_mask=imaging.load_mask(sdir / "amodal_mask.png"),
        invisible_mask=imaging.load_mask(sdir / "invisible_mask.png"),
        joints=joints,
        ratio=float(entry.get("ratio", 0.0)),
        seeds={"global": None, "subject": entry["subject"], "view": entry["view"]},
    )


def iter_split(data_dir, split: str):
    manifest = load_manifest(data_dir)
    for entry in manifest["samples"]:
        if entry["split"] == split:
            yield entry
