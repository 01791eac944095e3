import numpy as np
import pytest

from occufill.prompts import (
    BboxPrompt, Joint, PromptSpec, augment_bbox, compose_prompt_image,
    decode_pose_map, default_skeleton, dropout_prompt, pose_draw_params,
    render_bbox_map, render_pose_map, zero_prompt_image,
)

SK = default_skeleton()
SIZE = (64, 64)


def disc_oracle(cx, cy, radius, size):
    ys, xs = np.mgrid[0 : size[0], 0 : size[1]]
    return (xs - cx) ** 2 + (ys - cy) ** 2 <= radius**2


class TestPoseMap:
    def test_empty_joint_list_all_zero(self):
        img = render_pose_map([], SK, SIZE)
        assert img.data.sum() == 0.0
        assert img.channel_layout == "pose3"

    def test_single_joint_disc_oracle(self):
        radius, _ = pose_draw_params(SIZE)
        img = render_pose_map([Joint(0, 10, 12)], SK, SIZE)
        nonzero = img.data.sum(axis=2) > 0
        assert np.array_equal(nonzero, disc_oracle(10, 12, radius, SIZE))
        color = np.asarray(SK.joint_colors[0], np.float32)
        assert np.allclose(img.data[nonzero], color)

    def test_edge_segment_between_joints(self):
        # neck at (8,20), head at (8,4): vertical stroke in the head-edge color plus discs
        joints = [Joint(1, 8, 20), Joint(0, 8, 4)]
        img = render_pose_map(joints, SK, SIZE)
        radius, width = pose_draw_params(SIZE)
        edge_color = np.asarray(SK.edge_colors[0], np.float32)
        # midpoint of the segment is not covered by either disc
        assert np.allclose(img.data[12, 8], edge_color)
        # oracle: stroke pixels = within width/2 of segment, minus the discs
        ys, xs = np.mgrid[0:64, 0:64]
        t = np.clip((ys - 4) / 16.0, 0, 1)
        dist2 = (xs - 8.0) ** 2 + (ys - (4 + 16 * t)) ** 2
        stroke = dist2 <= (width / 2) ** 2
        discs = disc_oracle(8, 20, radius, SIZE) | disc_oracle(8, 4, radius, SIZE)
        edge_pixels = np.all(np.isclose(img.data, edge_color), axis=2)
        assert np.array_equal(edge_pixels, stroke & ~discs)

    def test_joints_drawn_over_edges(self):
        joints = [Joint(1, 8, 20), Joint(0, 8, 4)]
        img = render_pose_map(joints, SK, SIZE)
        assert np.allclose(img.data[20, 8], np.asarray(SK.joint_colors[1]))
        assert np.allclose(img.data[4, 8], np.asarray(SK.joint_colors[0]))

    def test_deterministic(self):
        joints = [Joint(i, 10 + 3 * i, 20 + 2 * i) for i in range(7)]
        a = render_pose_map(joints, SK, SIZE)
        b = render_pose_map(joints, SK, SIZE)
        assert np.array_equal(a.data, b.data)

    def test_duplicate_joint_rejected(self):
        with pytest.raises(ValueError):
            render_pose_map([Joint(0, 1, 1), Joint(0, 2, 2)], SK, SIZE)

    def test_out_of_bounds_rejected(self):
        with pytest.raises(ValueError):
            render_pose_map([Joint(0, 64, 10)], SK, SIZE)

    def test_color_decode_roundtrip(self):
        for joint_id in range(SK.joint_count):
            img = render_pose_map([Joint(joint_id, 31, 17)], SK, SIZE)
            decoded = decode_pose_map(img, SK)
            assert len(decoded) == 1
            jid, x, y = decoded[0]
            assert jid == joint_id
            assert abs(x - 31) <= 0.5 and abs(y - 17) <= 0.5


def frame_area(w, h, t):
    inner_w, inner_h = max(0, w - 2 * t), max(0, h - 2 * t)
    return w * h - inner_w * inner_h


class TestBboxMap:
    def test_one_pixel_boundary(self):
        img = render_bbox_map(BboxPrompt(2, 2, 6, 6), (10, 10), thickness=1)
        white = np.all(img.data == 1.0, axis=2)
        expect = np.zeros((10, 10), bool)
        expect[2:7, 2:7] = True
        expect[3:6, 3:6] = False
        assert np.array_equal(white, expect)

    def test_full_image_box_thickness_4(self):
        img = render_bbox_map(BboxPrompt(0, 0, 63, 63), SIZE, thickness=4)
        white = np.all(img.data == 1.0, axis=2)
        expect = np.ones((64, 64), bool)
        expect[4:60, 4:60] = False
        assert np.array_equal(white, expect)

    def test_corner_order_irrelevant(self):
        a = render_bbox_map(BboxPrompt(6, 6, 2, 2), (10, 10), 1)
        b = render_bbox_map(BboxPrompt(2, 2, 6, 6), (10, 10), 1)
        assert np.array_equal(a.data, b.data)

    def test_degenerate_rejected(self):
        with pytest.raises(ValueError):
            render_bbox_map(BboxPrompt(40, 40, 70, 70), SIZE, 4)

    @pytest.mark.parametrize("thickness", [1, 4])
    def test_exhaustive_frame_area_32(self, thickness):
        # every box on a 32x32 grid: frame pixels == |box| - |erode(box, t)|
        size = (32, 32)
        for x1 in range(0, 31):
            for x2 in range(x1 + 1, 32):
                for y1 in range(0, 31):
                    for y2 in range(y1 + 1, 32):
                        img = render_bbox_map(BboxPrompt(x1, y1, x2, y2), size, thickness)
                        count = int((img.data[:, :, 0] == 1.0).sum())
                        assert count == frame_area(x2 - x1 + 1, y2 - y1 + 1, thickness)


class TestCompose:
    def joints(self):
        return tuple(Joint(i, 10 + 3 * i, 20 + 2 * i) for i in range(7))

    def test_pose_only_delegates(self):
        spec = PromptSpec(kind="pose", pose=self.joints())
        out = compose_prompt_image(spec, SK, SIZE)
        assert out.channels == 3
        assert np.array_equal(out.data, render_pose_map(self.joints(), SK, SIZE).data)

    def test_composite_channel_order(self):
        bbox = BboxPrompt(5, 5, 30, 40)
        spec = PromptSpec(kind="pose_and_interest_bbox", pose=self.joints(), bbox=bbox)
        out = compose_prompt_image(spec, SK, SIZE)
        assert out.channels == 6
        assert np.array_equal(out.data[:, :, :3], render_pose_map(self.joints(), SK, SIZE).data)
        assert np.array_equal(out.data[:, :, 3:], render_bbox_map(bbox, SIZE).data)

    def test_interest_vs_entire_identical_raster(self):
        a = render_bbox_map(BboxPrompt(5, 5, 30, 40, "interest_region"), SIZE)
        b = render_bbox_map(BboxPrompt(5, 5, 30, 40, "entire_region"), SIZE)
        assert np.array_equal(a.data, b.data)

    def test_none_rejected(self):
        with pytest.raises(ValueError):
            compose_prompt_image(PromptSpec(kind="none"), SK, SIZE)

    def test_channel_contract_all_kinds(self):
        bbox = BboxPrompt(5, 5, 30, 40)
        singleton = [
            PromptSpec(kind="pose", pose=self.joints()),
            PromptSpec(kind="interest_bbox", bbox=bbox),
            PromptSpec(kind="entire_bbox", bbox=BboxPrompt(5, 5, 30, 40, "entire_region")),
        ]
        composite_kinds = [
            PromptSpec(kind="pose_and_interest_bbox", pose=self.joints(), bbox=bbox),
            PromptSpec(kind="pose_and_entire_bbox", pose=self.joints(),
                       bbox=BboxPrompt(5, 5, 30, 40, "entire_region")),
        ]
        for spec in singleton:
            assert compose_prompt_image(spec, SK, SIZE).channels == 3
        for spec in composite_kinds:
            assert compose_prompt_image(spec, SK, SIZE).channels == 6


class TestAugmentBbox:
    def test_no_augment_branch_identity(self):
        box = BboxPrompt(5, 5, 30, 40)

        class FixedRng:
            def random(self):
                return 0.99  # above p -> no augmentation

        out = augment_bbox(box, FixedRng(), SIZE)
        assert out == box.canonical()

    def test_monte_carlo_frequency(self):
        rng = np.random.default_rng(0)
        box = BboxPrompt(10, 10, 40, 40)
        changed = 0
        n = 10000
        for _ in range(n):
            out = augment_bbox(box, rng, SIZE)
            changed += out != box.canonical()
        assert abs(changed / n - 0.5) <= 0.02

    def test_always_in_bounds_and_canonical(self):
        rng = np.random.default_rng(1)
        box = BboxPrompt(2, 2, 60, 62)
        for _ in range(500):
            out = augment_bbox(box, rng, SIZE)
            assert 0 <= out.x1 < out.x2 <= 63
            assert 0 <= out.y1 < out.y2 <= 63
            assert out.x2 - out.x1 >= 1 and out.y2 - out.y1 >= 1


class TestDropout:
    def test_p0_identity(self):
        rng = np.random.default_rng(2)
        img = render_pose_map([Joint(0, 10, 10)], SK, SIZE)
        for _ in range(100):
            assert dropout_prompt(img, rng, p=0.0) is img

    def test_p1_always_zero(self):
        rng = np.random.default_rng(3)
        img = render_pose_map([Joint(0, 10, 10)], SK, SIZE)
        for _ in range(100):
            out = dropout_prompt(img, rng, p=1.0)
            assert out.data.sum() == 0.0
            assert out.channel_layout == img.channel_layout

    def test_monte_carlo_5_percent(self):
        rng = np.random.default_rng(4)
        img = render_pose_map([Joint(0, 10, 10)], SK, SIZE)
        zeroed = sum(
            dropout_prompt(img, rng, p=0.05).data.sum() == 0.0 for _ in range(20000))
        assert abs(zeroed / 20000 - 0.05) <= 0.005


class TestWireSchema:
    def test_roundtrip_all_kinds(self):
        joints = tuple(Joint(i, 5.0 + i, 6.0 + i, "user_added") for i in range(3))
        bbox = BboxPrompt(1, 2, 30, 40, "interest_region")
        specs = [
            PromptSpec(kind="none"),
            PromptSpec(kind="pose", pose=joints),
            PromptSpec(kind="interest_bbox", bbox=bbox),
            PromptSpec(kind="entire_bbox", bbox=BboxPrompt(1, 2, 30, 40, "entire_region")),
            PromptSpec(kind="pose_and_interest_bbox", pose=joints, bbox=bbox),
        ]
        for spec in specs:
            assert PromptSpec.loads(spec.dumps()) == spec

    def test_kind_field_consistency_enforced(self):
        with pytest.raises(ValueError):
            PromptSpec(kind="pose")
        with pytest.raises(ValueError):
            PromptSpec(kind="none", bbox=BboxPrompt(1, 1, 2, 2))
        with pytest.raises(ValueError):
            PromptSpec.loads('{"kind": "pose"}')

    def test_point_count(self):
        joints = (Joint(0, 1, 1, "detected_visible"), Joint(2, 3, 3, "user_added"),
                  Joint(3, 4, 4, "user_added"))
        spec = PromptSpec(kind="pose_and_interest_bbox", pose=joints,
                          bbox=BboxPrompt(1, 1, 9, 9))
        assert spec.point_count() == 4  # 2 added joints + 2 bbox corners
        assert PromptSpec(kind="interest_bbox", bbox=BboxPrompt(1, 1, 9, 9)).point_count() == 2


def test_zero_prompt_image_layouts():
    assert zero_prompt_image(SIZE, "pose3").channels == 3
    assert zero_prompt_image(SIZE, "pose_bbox6").channels == 6
