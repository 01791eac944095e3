import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from occufill.imaging import (
    ShapeError, composite, default_dilation_radius, dilate, erode,
    load_image, load_mask, occlusion_ratio, save_image, save_mask,
)


def brute_force_dilate(mask: np.ndarray, radius: int) -> np.ndarray:
    """Independent oracle: neighborhood max over the Chebyshev ball."""
    h, w = mask.shape
    out = np.zeros_like(mask)
    for y in range(h):
        for x in range(w):
            y0, y1 = max(0, y - radius), min(h, y + radius + 1)
            x0, x1 = max(0, x - radius), min(w, x + radius + 1)
            out[y, x] = mask[y0:y1, x0:x1].max()
    return out


def rand_mask(rng, h=8, w=8, p=0.3):
    return (rng.random((h, w)) < p).astype(np.uint8)


def rand_image(rng, h=8, w=8, c=3):
    return rng.random((h, w, c)).astype(np.float32)


class TestComposite:
    def test_all_ones_mask_returns_base(self):
        rng = np.random.default_rng(0)
        base, overlay = rand_image(rng), rand_image(rng)
        out = composite(base, overlay, np.ones((8, 8), np.uint8))
        assert np.array_equal(out, base)

    def test_all_zeros_mask_returns_overlay(self):
        rng = np.random.default_rng(1)
        base, overlay = rand_image(rng), rand_image(rng)
        out = composite(base, overlay, np.zeros((8, 8), np.uint8))
        assert np.array_equal(out, overlay)

    def test_2x2_per_pixel_select(self):
        # base=[[a,b],[c,d]], overlay=[[w,x],[y,z]], mask=[[1,0],[0,1]] -> [[a,x],[y,d]]
        base = np.array([[0.1, 0.2], [0.3, 0.4]], np.float32)[:, :, None]
        base = np.repeat(base, 1, axis=2)
        overlay = np.array([[0.5, 0.6], [0.7, 0.8]], np.float32)[:, :, None]
        mask = np.array([[1, 0], [0, 1]], np.uint8)
        base8 = np.zeros((8, 8, 1), np.float32)
        over8 = np.zeros((8, 8, 1), np.float32)
        mask8 = np.zeros((8, 8), np.uint8)
        base8[:2, :2] = base
        over8[:2, :2] = overlay
        mask8[:2, :2] = mask
        out = composite(base8, over8, mask8)
        expected = np.array([[0.1, 0.6], [0.7, 0.4]], np.float32)
        assert np.allclose(out[:2, :2, 0], expected, atol=0)

    def test_shape_mismatch_rejected(self):
        rng = np.random.default_rng(2)
        with pytest.raises(ShapeError):
            composite(rand_image(rng, 8, 8), rand_image(rng, 8, 9), np.ones((8, 8), np.uint8))
        with pytest.raises(ShapeError):
            composite(rand_image(rng, 8, 8, 3), rand_image(rng, 8, 8, 1), np.ones((8, 8), np.uint8))

    def test_idempotent_per_region(self):
        rng = np.random.default_rng(3)
        base, overlay, mask = rand_image(rng), rand_image(rng), rand_mask(rng)
        once = composite(base, overlay, mask)
        twice = composite(once, overlay, mask)
        assert np.array_equal(once, twice)

    def test_randomized_against_select_oracle(self):
        rng = np.random.default_rng(4)
        for _ in range(200):
            base, overlay, mask = rand_image(rng), rand_image(rng), rand_mask(rng)
            out = composite(base, overlay, mask)
            expect = np.where(mask[:, :, None].astype(bool), base, overlay)
            assert np.array_equal(out, expect)


class TestDilate:
    def test_radius_zero_identity(self):
        rng = np.random.default_rng(5)
        m = rand_mask(rng)
        assert np.array_equal(dilate(m, 0), m)

    def test_all_zero_any_radius(self):
        for r in (0, 1, 3):
            assert dilate(np.zeros((8, 8), np.uint8), r).sum() == 0

    def test_single_pixel_block(self):
        m = np.zeros((16, 16), np.uint8)
        m[5, 5] = 1
        out = dilate(m, 1)
        expect = np.zeros_like(m)
        expect[4:7, 4:7] = 1
        assert np.array_equal(out, expect)

    def test_against_brute_force(self):
        rng = np.random.default_rng(6)
        for _ in range(300):
            m = rand_mask(rng)
            r = int(rng.integers(0, 3))
            assert np.array_equal(dilate(m, r), brute_force_dilate(m, r))

    def test_output_contains_input(self):
        rng = np.random.default_rng(7)
        for _ in range(50):
            m = rand_mask(rng)
            assert np.all(dilate(m, 2) >= m)

    @settings(max_examples=60, deadline=None)
    @given(data=st.data())
    def test_monotonicity_and_composition(self, data):
        bits1 = data.draw(st.lists(st.booleans(), min_size=64, max_size=64))
        extra = data.draw(st.lists(st.booleans(), min_size=64, max_size=64))
        m1 = np.array(bits1, np.uint8).reshape(8, 8)
        m2 = (m1 | np.array(extra, np.uint8).reshape(8, 8)).astype(np.uint8)
        r1 = data.draw(st.integers(0, 2))
        r2 = data.draw(st.integers(0, 2))
        assert np.all(dilate(m1, r1) <= dilate(m2, r1))  # m1 subset m2
        assert np.array_equal(dilate(m1, r1 + r2), dilate(dilate(m1, r1), r2))

    def test_erode_duality(self):
        rng = np.random.default_rng(8)
        m = rand_mask(rng, 12, 12)
        assert np.array_equal(erode(m, 1), 1 - dilate((1 - m).astype(np.uint8), 1))


class TestOcclusionRatio:
    def test_visible_equals_amodal_is_zero(self):
        m = np.zeros((8, 8), np.uint8)
        m[2:6, 2:6] = 1
        assert occlusion_ratio(m, m) == 0.0

    def test_empty_visible_is_one(self):
        amodal = np.zeros((8, 8), np.uint8)
        amodal[1:5, 1:5] = 1
        assert occlusion_ratio(np.zeros_like(amodal), amodal) == 1.0

    def test_pixel_count_arithmetic(self):
        amodal = np.zeros((16, 16), np.uint8)
        amodal.flat[:100] = 1
        visible = np.zeros_like(amodal)
        visible.flat[:47] = 1
        assert occlusion_ratio(visible, amodal) == pytest.approx(0.53, abs=1e-12)

    def test_empty_amodal_rejected(self):
        with pytest.raises(ValueError):
            occlusion_ratio(np.zeros((8, 8), np.uint8), np.zeros((8, 8), np.uint8))

    def test_visible_not_subset_rejected(self):
        amodal = np.zeros((8, 8), np.uint8)
        amodal[0, 0] = 1
        visible = np.zeros_like(amodal)
        visible[1, 1] = 1
        with pytest.raises(ValueError):
            occlusion_ratio(visible, amodal)

    def test_zero_iff_equal(self):
        rng = np.random.default_rng(9)
        for _ in range(50):
            amodal = rand_mask(rng, p=0.5)
            if amodal.sum() == 0:
                continue
            visible = (amodal & rand_mask(rng, p=0.7)).astype(np.uint8)
            ratio = occlusion_ratio(visible, amodal)
            assert (ratio == 0.0) == np.array_equal(visible, amodal)


class TestPersistence:
    def test_image_roundtrip_lossless_at_8bit(self, tmp_path):
        rng = np.random.default_rng(10)
        img = rng.random((16, 16, 3)).astype(np.float32)
        quantized = np.round(img * 255.0) / 255.0
        save_image(tmp_path / "x.png", img)
        back = load_image(tmp_path / "x.png")
        assert np.allclose(back, quantized, atol=1e-7)
        # a second round trip is exact
        save_image(tmp_path / "y.png", back)
        assert np.array_equal(load_image(tmp_path / "y.png"), back)

    def test_mask_roundtrip(self, tmp_path):
        rng = np.random.default_rng(11)
        m = rand_mask(rng, 16, 16)
        save_mask(tmp_path / "m.png", m)
        assert np.array_equal(load_mask(tmp_path / "m.png"), m)


def test_default_dilation_radius_scales():
    assert default_dilation_radius(64, 64) == 2
    assert default_dilation_radius(128, 128) == 4
    assert default_dilation_radius(32, 32) == 1
