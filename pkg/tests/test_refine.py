import numpy as np
import pytest
import torch

from occufill.diffusion.schedule import make_schedule
from occufill.masknet import MaskNet
from occufill.refine import (
    RefineConfig, latent_mask, random_inpaint_mask, refine, refine_plug,
    strength_to_schedule, untrained_inpaint_state,
)

torch.set_num_threads(2)
SCHED = make_schedule()


class TestStrengthToSchedule:
    def test_reference_pair(self):
        t0, steps = strength_to_schedule(0.5, SCHED, 20, kappa=0.76)
        assert t0 == 380
        assert len(steps) == 10
        assert steps == sorted(steps, reverse=True)
        assert steps[0] == 380

    def test_s_zero_empty(self):
        t0, steps = strength_to_schedule(0.0, SCHED, 20)
        assert t0 is None and steps == []

    def test_s_one_kappa_one_pure_noise(self):
        t0, steps = strength_to_schedule(1.0, SCHED, 20, kappa=1.0)
        assert t0 == SCHED.T - 1
        assert len(steps) == 20

    def test_t0_monotone_in_s(self):
        values = [strength_to_schedule(s, SCHED, 20)[0]
                  for s in (0.05, 0.2, 0.4, 0.6, 0.8, 1.0)]
        assert values == sorted(values)

    def test_active_count(self):
        import math

        for s in (0.1, 0.25, 0.5, 0.75, 1.0):
            _, steps = strength_to_schedule(s, SCHED, 20)
            assert len(steps) == math.ceil(s * 20)

    def test_invalid_s_rejected(self):
        with pytest.raises(ValueError):
            strength_to_schedule(1.5, SCHED, 20)
        with pytest.raises(ValueError):
            RefineConfig(s=-0.1)


@pytest.fixture(scope="module")
def state():
    torch.manual_seed(0)
    return untrained_inpaint_state()


class TestRefineContract:
    def test_unmasked_preservation_randomized(self, state):
        rng = np.random.default_rng(0)
        for trial in range(12):
            base = rng.random((64, 64, 3)).astype(np.float32)
            mask = random_inpaint_mask(rng, 64)
            s = float(rng.choice([0.0, 0.25, 0.5, 0.75, 1.0]))
            cfg = RefineConfig(s=s, seed=int(rng.integers(0, 1000)),
                               allow_untrained=True)
            out = refine(base, mask, cfg, state)
            outside = mask == 0
            assert np.array_equal(out[outside], base[outside])
            assert out.shape == base.shape and np.isfinite(out).all()

    def test_s_zero_identity(self, state):
        rng = np.random.default_rng(1)
        base = rng.random((64, 64, 3)).astype(np.float32)
        mask = random_inpaint_mask(rng, 64)
        out = refine(base, mask, RefineConfig(s=0.0, allow_untrained=True), state)
        assert np.array_equal(out, base)

    def test_empty_mask_identity(self, state):
        rng = np.random.default_rng(2)
        base = rng.random((64, 64, 3)).astype(np.float32)
        out = refine(base, np.zeros((64, 64), np.uint8),
                     RefineConfig(s=0.7, allow_untrained=True), state)
        assert np.array_equal(out, base)

    def test_seed_determinism(self, state):
        rng = np.random.default_rng(3)
        base = rng.random((64, 64, 3)).astype(np.float32)
        mask = random_inpaint_mask(rng, 64)
        cfg = RefineConfig(s=0.5, seed=77, allow_untrained=True)
        a = refine(base, mask, cfg, state)
        b = refine(base, mask, cfg, state)
        assert np.array_equal(a, b)
        c = refine(base, mask, RefineConfig(s=0.5, seed=78, allow_untrained=True), state)
        assert not np.array_equal(a[mask == 1], c[mask == 1])

    def test_untrained_rejected_without_flag(self, state):
        base = np.zeros((64, 64, 3), np.float32)
        mask = np.ones((64, 64), np.uint8)
        with pytest.raises(RuntimeError, match="untrained"):
            refine(base, mask, RefineConfig(s=0.5), state)


class TestLatentMask:
    def test_conservative_downsampling(self):
        mask = np.zeros((64, 64), np.uint8)
        mask[5, 5] = 1  # single pixel -> its 4x4 latent cell is covered
        lm = latent_mask(mask, 4)
        assert lm.shape == (1, 1, 16, 16)
        assert lm[0, 0, 1, 1] == 1.0
        assert float(lm.sum()) == 1.0

    def test_full_mask(self):
        lm = latent_mask(np.ones((64, 64), np.uint8), 4)
        assert float(lm.min()) == 1.0


class TestMaskGenerator:
    def test_area_fraction_span(self):
        rng = np.random.default_rng(4)
        fracs = [random_inpaint_mask(rng, 64).mean() for _ in range(2000)]
        fracs = np.array(fracs)
        assert fracs.min() <= 0.07
        assert fracs.max() >= 0.55
        assert np.percentile(fracs, 5) >= 0.01
        assert np.percentile(fracs, 95) <= 0.8

    def test_footprints_used(self):
        rng = np.random.default_rng(5)
        footprint = np.zeros((64, 64), np.uint8)
        footprint[10:20, 10:20] = 1
        seen = False
        for _ in range(50):
            m = random_inpaint_mask(rng, 64, [footprint])
            if np.array_equal(m, footprint):
                seen = True
                break
        assert seen


class TestRefinePlug:
    def test_contract_on_untrained(self, state):
        torch.manual_seed(1)
        masknet = MaskNet(base=(8, 16, 24))
        masknet.eval()
        rng = np.random.default_rng(6)
        occluded = rng.random((64, 64, 3)).astype(np.float32)
        candidate = rng.random((64, 64, 3)).astype(np.float32)
        vmask = np.zeros((64, 64), np.uint8)
        vmask[10:40, 10:40] = 1
        cfg = RefineConfig(s=0.5, seed=0, dilation_radius=2, allow_untrained=True)
        out = refine_plug(candidate, occluded, vmask, cfg, state, masknet)
        assert set(out) == {"soft_mask", "invisible_mask", "dilated_mask", "base", "refined"}
        base, refined, dil = out["base"], out["refined"], out["dilated_mask"]
        assert np.array_equal(refined[dil == 0], base[dil == 0])
        # base composite keeps the occluded input on the visible mask
        assert np.array_equal(base[vmask == 1], occluded[vmask == 1])
