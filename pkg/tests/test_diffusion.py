import copy

import numpy as np
import pytest
import torch

from occufill.diffusion.condition import assemble_condition, prompt_to_control_input
from occufill.diffusion.nets import ContextEmbedder, DenoiserConfig, LatentCodec
from occufill.diffusion.sampling import guided_eps, sample_coarse, step_list
from occufill.diffusion.schedule import NoiseSchedule, forward_noise, make_schedule
from occufill.diffusion.training import (
    CoarseModel, DiffusionTrainConfig, TrainingDiverged, apply_freeze_mask,
    build_freeze_mask, build_optimizer, epoch_plan, make_training_batch,
    training_step,
)
from occufill.forge import ForgeConfig, make_sample
from occufill.prompts import PromptSpec
from occufill.promptsynth import synthesize_prompt

torch.set_num_threads(2)


@pytest.fixture(scope="module")
def sample():
    return make_sample(ForgeConfig(seed=21), 0, 0)


@pytest.fixture(scope="module")
def tiny_stack():
    torch.manual_seed(0)
    model = CoarseModel(DenoiserConfig())
    model.eval()
    codec = LatentCodec()
    codec.eval()
    return model, codec, make_schedule()


class TestSchedule:
    def test_linear_default_alpha_bar_small(self):
        sched = make_schedule(1000, 1e-4, 2e-2, "linear")
        assert sched.alpha_bar[-1] < 0.01
        assert sched.alpha_bar[0] > 0.99

    def test_T1(self):
        sched = make_schedule(1, 0.1, 0.2, "linear")
        assert sched.alpha_bar[0] == pytest.approx(1 - 0.1)

    def test_monotonicity_both_shapes(self):
        for shape in ("linear", "cosine"):
            sched = make_schedule(500, 1e-4, 2e-2, shape)
            assert np.all(np.diff(sched.beta) >= -1e-12)
            assert np.all(np.diff(sched.alpha_bar) < 0)
            assert np.all((sched.beta > 0) & (sched.beta < 1))

    def test_invalid_bounds_rejected(self):
        with pytest.raises(ValueError):
            make_schedule(100, 0.2, 0.1)
        with pytest.raises(ValueError):
            make_schedule(100, 0.0, 0.1)
        with pytest.raises(ValueError):
            make_schedule(100, 1e-4, 2e-2, "weird")

    def test_config_roundtrip(self):
        sched = make_schedule(64)
        back = NoiseSchedule.from_config(sched.to_config())
        assert np.array_equal(back.beta, sched.beta)


class TestForwardNoise:
    def test_alpha_bar_near_one_returns_z0(self):
        sched = make_schedule(4, 1e-12, 2e-12)
        z0 = torch.randn(2, 3, 4, 4, dtype=torch.float64)
        eps = torch.randn_like(z0)
        zt = forward_noise(z0, 0, eps, sched)
        assert torch.allclose(zt, z0, atol=1e-5)

    def test_alpha_bar_near_zero_returns_eps(self):
        beta = np.full(300, 0.5)
        sched = NoiseSchedule(T=300, beta=beta)
        z0 = torch.randn(2, 3, 4, 4, dtype=torch.float64)
        eps = torch.randn_like(z0)
        zt = forward_noise(z0, 299, eps, sched)
        assert torch.allclose(zt, eps, atol=1e-5)

    def test_monte_carlo_variance(self):
        # alpha_bar_0 = 0.64 by construction; z0 = 0 so Var[z_t] = 0.36
        sched = NoiseSchedule(T=1, beta=np.array([0.36]))
        gen = torch.Generator().manual_seed(0)
        z0 = torch.zeros(10000, 10, dtype=torch.float64)
        eps = torch.randn(z0.shape, generator=gen, dtype=torch.float64)
        zt = forward_noise(z0, 0, eps, sched)
        assert abs(zt.var().item() - 0.36) < 0.02

    def test_out_of_range_rejected(self):
        sched = make_schedule(10)
        z = torch.zeros(1, 2)
        with pytest.raises(ValueError):
            forward_noise(z, 10, z, sched)
        with pytest.raises(ValueError):
            forward_noise(z, torch.tensor([3, 11]), torch.zeros(2, 2), sched)

    def test_matches_closed_form_oracle(self):
        sched = make_schedule(100)
        gen = torch.Generator().manual_seed(1)
        z0 = torch.randn(4, 3, 2, 2, generator=gen, dtype=torch.float64)
        eps = torch.randn(z0.shape, generator=gen, dtype=torch.float64)
        t = torch.tensor([0, 10, 50, 99])
        zt = forward_noise(z0, t, eps, sched)
        for i, ti in enumerate(t.tolist()):
            ab = sched.alpha_bar[ti]
            expect = np.sqrt(ab) * z0[i].numpy() + np.sqrt(1 - ab) * eps[i].numpy()
            assert np.allclose(zt[i].numpy(), expect, atol=1e-12)


class TestCondition:
    def test_z_cond_channel_count(self, sample, tiny_stack):
        model, codec, _ = tiny_stack
        bundle = assemble_condition(
            sample.occluded, sample.visible_mask, None, codec, model.control, model.context)
        assert bundle.z_cond.shape[1] == 2 * codec.latent_channels

    def test_zero_init_control_residuals(self, sample, tiny_stack):
        model, codec, _ = tiny_stack
        spec = synthesize_prompt(sample, "pose")
        from occufill.prompts import compose_prompt_image, default_skeleton

        raster = compose_prompt_image(spec, default_skeleton(), sample.occluded.shape[:2])
        bundle = assemble_condition(
            sample.occluded, sample.visible_mask, raster, codec, model.control, model.context)
        for tensor in bundle.control.values():
            assert torch.count_nonzero(tensor) == 0

    def test_none_equals_zero_prompt(self, sample, tiny_stack):
        model, codec, _ = tiny_stack
        h, w = sample.occluded.shape[:2]
        a = assemble_condition(sample.occluded, sample.visible_mask, None,
                               codec, model.control, model.context)
        b = assemble_condition(sample.occluded, sample.visible_mask,
                               np.zeros((h, w, 6), np.float32),
                               codec, model.control, model.context)
        assert torch.equal(a.z_cond, b.z_cond)
        for k in a.control:
            assert torch.equal(a.control[k], b.control[k])

    def test_channel_mismatch_rejected(self, sample):
        with pytest.raises(ValueError):
            prompt_to_control_input(np.zeros((64, 64, 4), np.float32), (64, 64))
        with pytest.raises(ValueError):
            prompt_to_control_input(np.zeros((32, 32, 6), np.float32), (64, 64))


class TestFreeze:
    def test_mask_marks_exactly_cross_attention(self):
        model = CoarseModel(DenoiserConfig())
        mask = build_freeze_mask(model, "cross-attn")
        for name, trainable in mask.items():
            if name.startswith("control."):
                assert trainable
            else:
                assert trainable == (".xattn" in name)
        full = build_freeze_mask(model, "none")
        assert all(full.values())
        with pytest.raises(ValueError):
            build_freeze_mask(model, "bogus")

    def test_frozen_tensors_bit_identical_after_steps(self, sample):
        torch.manual_seed(3)
        model = CoarseModel(DenoiserConfig())
        codec = LatentCodec()
        sched = make_schedule()
        mask = build_freeze_mask(model, "cross-attn")
        apply_freeze_mask(model, mask)
        cfg = DiffusionTrainConfig(freeze="cross-attn")
        opt, _ = build_optimizer(model, cfg)
        before = {n: p.detach().clone() for n, p in model.named_parameters()}
        rng = np.random.default_rng(0)
        tensors = make_training_batch([sample] * 4, ["pose"] * 4, rng)
        for step in range(5):
            training_step(tensors, model, codec, opt, sched, rng, step=step)
        changed_any = False
        for name, param in model.named_parameters():
            if mask[name]:
                changed_any = changed_any or not torch.equal(param, before[name])
            else:
                assert torch.equal(param, before[name]), f"frozen tensor {name} moved"
        assert changed_any

    def test_loss_finite_o1_at_init(self, sample):
        torch.manual_seed(4)
        model = CoarseModel(DenoiserConfig())
        codec = LatentCodec()
        sched = make_schedule()
        opt, _ = build_optimizer(model, DiffusionTrainConfig())
        rng = np.random.default_rng(1)
        tensors = make_training_batch([sample] * 4, ["none", "pose", "interest_bbox", "entire_bbox"], rng)
        loss = training_step(tensors, model, codec, opt, sched, rng)
        assert np.isfinite(loss) and 0.01 < loss < 10.0

    def test_divergence_raises(self, sample):
        torch.manual_seed(5)
        model = CoarseModel(DenoiserConfig())
        codec = LatentCodec()
        with torch.no_grad():
            model.denoiser.conv_out.weight.fill_(float("nan"))
        sched = make_schedule()
        opt, _ = build_optimizer(model, DiffusionTrainConfig())
        rng = np.random.default_rng(2)
        tensors = make_training_batch([sample] * 2, ["pose", "none"], rng)
        with pytest.raises(TrainingDiverged):
            training_step(tensors, model, codec, opt, sched, rng)


class TestCFG:
    def test_guidance_algebra(self, sample, tiny_stack):
        model, codec, sched = tiny_stack
        bundle = assemble_condition(
            sample.occluded, sample.visible_mask, None, codec, model.control, model.context)
        gen = torch.Generator().manual_seed(0)
        z = torch.randn(1, codec.latent_channels, 16, 16, generator=gen)
        t = torch.tensor([500])
        zero_ctrl = model.zero_control(1, 16, 16)
        with torch.no_grad():
            bundle.guidance_scale = 1.0
            eps_hat, eps_c, eps_u = guided_eps(model, z, bundle.z_cond, t, bundle, zero_ctrl)
            assert torch.equal(eps_hat, eps_c)
            bundle.guidance_scale = 0.0
            eps_hat, eps_c, eps_u = guided_eps(model, z, bundle.z_cond, t, bundle, zero_ctrl)
            assert torch.equal(eps_hat, eps_u)

    def test_sampling_determinism(self, sample, tiny_stack):
        model, codec, sched = tiny_stack
        spec = synthesize_prompt(sample, "interest_bbox")
        a = sample_coarse(sample.occluded, sample.visible_mask, spec, 9,
                          model, codec, sched, n_steps=6)
        b = sample_coarse(sample.occluded, sample.visible_mask, spec, 9,
                          model, codec, sched, n_steps=6)
        assert np.array_equal(a, b)

    def test_zero_init_prompt_invariance(self, sample, tiny_stack):
        model, codec, sched = tiny_stack
        spec = synthesize_prompt(sample, "pose_and_entire_bbox")
        prompted = sample_coarse(sample.occluded, sample.visible_mask, spec, 11,
                                 model, codec, sched, n_steps=6)
        unprompted = sample_coarse(sample.occluded, sample.visible_mask,
                                   PromptSpec(kind="none"), 11,
                                   model, codec, sched, n_steps=6)
        assert np.array_equal(prompted, unprompted)

    def test_distinct_seeds_distinct_outputs(self, sample, tiny_stack):
        model, codec, sched = tiny_stack
        spec = PromptSpec(kind="none")
        outs = [sample_coarse(sample.occluded, sample.visible_mask, spec, s,
                              model, codec, sched, n_steps=4) for s in range(3)]
        assert not np.array_equal(outs[0], outs[1])
        assert not np.array_equal(outs[1], outs[2])

    def test_output_range(self, sample, tiny_stack):
        model, codec, sched = tiny_stack
        img = sample_coarse(sample.occluded, sample.visible_mask,
                            PromptSpec(kind="none"), 0, model, codec, sched, n_steps=4)
        assert img.min() >= 0.0 and img.max() <= 1.0 and np.isfinite(img).all()

    def test_step_list_properties(self):
        steps = step_list(1000, 24)
        assert steps[0] == 999 and steps[-1] == 0
        assert np.all(np.diff(steps) < 0)
        assert len(steps) == 24


class TestGradientCheck:
    def test_diffusion_objective_finite_differences(self, sample):
        # 64-bit central differences on a sampled parameter slice
        torch.manual_seed(6)
        model = CoarseModel(DenoiserConfig()).double()
        codec = LatentCodec().double()
        sched = make_schedule(100)
        rng = np.random.default_rng(3)
        tensors = tuple(t.double() for t in make_training_batch([sample] * 2, ["pose", "none"], rng))
        complete, occluded, vmask, hint = tensors

        gen = torch.Generator().manual_seed(0)
        with torch.no_grad():
            z0 = codec.encode(complete)
            z_cond = torch.cat([codec.encode(occluded), codec.encode(vmask)], dim=1)
        t = torch.tensor([30, 70])
        eps = torch.randn(z0.shape, generator=gen, dtype=torch.float64)
        from occufill.diffusion.schedule import forward_noise as fwd

        z_t = fwd(z0, t, eps, sched)

        def loss_fn():
            ctx = model.context(occluded)
            control = model.control(hint)
            pred = model.denoiser(torch.cat([z_t, z_cond], dim=1), t, ctx, control)
            return torch.nn.functional.mse_loss(pred, eps)

        loss = loss_fn()
        params = [p for p in model.parameters() if p.requires_grad]
        grads = torch.autograd.grad(loss, params, allow_unused=True)
        named = [(n, p) for n, p in model.named_parameters()]
        rng2 = np.random.default_rng(4)
        checked = 0
        h = 1e-5
        grad_map = {id(p): g for p, g in zip(params, grads)}
        while checked < 10:
            name, p = named[rng2.integers(0, len(named))]
            g = grad_map.get(id(p))
            if g is None:
                continue
            idx = tuple(rng2.integers(0, s) for s in p.shape)
            analytic = float(g[idx])
            with torch.no_grad():
                orig = float(p[idx])
                p[idx] = orig + h
                lp = float(loss_fn())
                p[idx] = orig - h
                lm = float(loss_fn())
                p[idx] = orig
            fd = (lp - lm) / (2 * h)
            denom = max(abs(analytic), abs(fd), 1e-8)
            assert abs(analytic - fd) / denom < 1e-3, f"{name}[{idx}]: {analytic} vs {fd}"
            checked += 1


def test_epoch_plan_one_view_per_subject():
    manifest = {"samples": [
        {"subject": s, "view": v, "split": "train", "path": f"train/{s}_{v}"}
        for s in range(5) for v in range(3)
    ]}
    rng = np.random.default_rng(0)
    plan = epoch_plan(manifest, "train", rng)
    assert len(plan) == 5
    assert sorted(e["subject"] for e in plan) == list(range(5))
