"""Command-line interface.

Verbs: forge, train-diffusion, coarse-pool, train-mask, train-segmenter,
train-inpaint, train-detector, complete, refine, refine-plug, evaluate,
experiment, serve. Environment variables override default paths only:
OCCUFILL_DATA_DIR, OCCUFILL_CKPT_DIR, OCCUFILL_OUT_DIR.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import forge, imaging
from .prompts import PromptSpec


def _env(name: str, default: str) -> str:
    return os.environ.get(name, default)


def log(msg: str) -> None:
    print(msg, file=sys.stderr, flush=True)


def cmd_forge(args) -> None:
    cfg = forge.ForgeConfig(
        subjects=args.subjects, views=args.views, size=args.size,
        mu=args.mu, sigma=args.sigma, lo=args.lo, hi=args.hi,
        test_subjects=args.test_subjects, seed=args.seed, out_dir=args.out,
    )
    manifest = forge.build_dataset(cfg, log=log)
    log(f"forged {len(manifest['samples'])} samples into {args.out} "
        f"({len(manifest['skipped'])} skipped)")


def cmd_train_diffusion(args) -> None:
    from .diffusion.training import DiffusionTrainConfig, train_diffusion

    cfg = DiffusionTrainConfig(
        steps=args.steps, batch_size=args.batch, codec_steps=args.codec_steps,
        freeze=args.freeze, seed=args.seed,
        lr_denoiser=args.lr, lr_control=args.lr_control,
    )
    path = train_diffusion(args.data, Path(args.ckpts) / "diffusion", cfg, log=log)
    log(f"diffusion checkpoint at {path}")


def cmd_coarse_pool(args) -> None:
    from .diffusion.sampling import generate_coarse_pool

    doc = generate_coarse_pool(
        args.data, Path(args.ckpts) / "diffusion", args.out,
        n_train=args.n, n_test=args.n_test, prompt_kind=args.kind,
        n_steps=args.steps, log=log,
    )
    log(f"coarse pool with {len(doc['entries'])} entries at {args.out}")


def cmd_train_mask(args) -> None:
    from .masknet import MaskTrainConfig, train_mask_net

    cfg = MaskTrainConfig(steps=args.steps, lr=args.lr, weight_decay=args.wd,
                          lambda_dice=args.lambda_dice, seed=args.seed)
    path = train_mask_net(args.data, args.coarse_pool, Path(args.ckpts) / "masknet",
                          cfg, log=log)
    log(f"mask-net checkpoint at {path}")


def cmd_train_segmenter(args) -> None:
    from .segmenter import SegmenterTrainConfig, train_segmenter

    cfg = SegmenterTrainConfig(steps=args.steps, lr=args.lr, seed=args.seed)
    path = train_segmenter(args.data, Path(args.ckpts) / "segmenter", cfg, log=log)
    log(f"segmenter checkpoint at {path}")


def cmd_train_inpaint(args) -> None:
    from .refine import InpaintTrainConfig, train_inpaint_denoiser

    cfg = InpaintTrainConfig(steps=args.steps, lr=args.lr, seed=args.seed)
    codec_from = Path(args.ckpts) / "diffusion" if args.codec_from_diffusion else None
    path = train_inpaint_denoiser(args.data, Path(args.ckpts) / "inpaint", cfg,
                                  codec_from=codec_from, log=log)
    log(f"inpaint checkpoint at {path}")


def cmd_train_detector(args) -> None:
    from .detector import DetectorTrainConfig, train_keypoint_detector

    cfg = DetectorTrainConfig(steps=args.steps, lr=args.lr, seed=args.seed)
    path = train_keypoint_detector(args.data, Path(args.ckpts) / "detector", cfg, log=log)
    log(f"detector checkpoint at {path}")


def _pipeline_state(args):
    from .pipeline import PipelineConfig, PipelineState
    from .refine import RefineConfig

    ckpts = Path(args.ckpts)
    refine_cfg = RefineConfig(
        s=getattr(args, "s", 0.5), n_steps=getattr(args, "refine_steps", 20),
        guidance=getattr(args, "refine_guidance", 1.5),
    )
    cfg = PipelineConfig(
        diffusion_ckpt=str(ckpts / "diffusion"),
        masknet_ckpt=str(ckpts / "masknet"),
        inpaint_ckpt=str(ckpts / "inpaint"),
        detector_ckpt=str(ckpts / "detector") if (ckpts / "detector.pt").exists() else None,
        segmenter_ckpt=str(ckpts / "segmenter") if (ckpts / "segmenter.pt").exists() else None,
        sampler_steps=getattr(args, "sampler_steps", 24),
        guidance=getattr(args, "guidance", 2.0),
        refine=refine_cfg,
        dilation_radius=getattr(args, "dilation", 2),
    )
    return PipelineState(cfg)


def cmd_complete(args) -> None:
    from .pipeline import run_pipeline

    state = _pipeline_state(args)
    image = imaging.load_image(args.input)
    spec = PromptSpec.loads(Path(args.prompt).read_text()) if args.prompt else PromptSpec(kind="none")
    vmask = imaging.load_mask(args.vmask) if args.vmask else None
    result = run_pipeline(image, spec, state, args.seed, visible_mask=vmask)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    imaging.save_image(out / "coarse.png", result.coarse)
    imaging.save_image(out / "base.png", result.base)
    imaging.save_image(out / "refined.png", result.refined)
    imaging.save_mask(out / "invisible_mask.png", result.invisible_mask)
    imaging.save_mask(out / "dilated_mask.png", result.dilated_mask)
    imaging.save_mask(out / "visible_mask.png", result.visible_mask)
    (out / "result.json").write_text(json.dumps(
        {"seed": result.seed, "prompt": result.prompt, "timings": result.timings}, indent=1))
    log(f"pipeline outputs in {out}")


def cmd_refine(args) -> None:
    from .refine import RefineConfig, load_inpaint_state, refine

    state = load_inpaint_state(Path(args.ckpts) / "inpaint" if args.inpaint is None else args.inpaint)
    cfg = RefineConfig(s=args.s, n_steps=args.steps, guidance=args.guidance,
                       seed=args.seed, allow_untrained=args.allow_untrained)
    base = imaging.load_image(args.input)
    mask = imaging.load_mask(args.mask)
    out_img = refine(base, mask, cfg, state)
    imaging.save_image(args.out, out_img)
    log(f"refined image at {args.out}")


def cmd_refine_plug(args) -> None:
    from .masknet import load_mask_net
    from .refine import RefineConfig, load_inpaint_state, refine_plug

    inpaint = load_inpaint_state(Path(args.ckpts) / "inpaint")
    masknet = load_mask_net(Path(args.ckpts) / "masknet")
    cfg = RefineConfig(s=args.s, n_steps=args.steps, guidance=args.guidance,
                       dilation_radius=args.dilation, seed=args.seed)
    result = refine_plug(
        imaging.load_image(args.candidate), imaging.load_image(args.occluded),
        imaging.load_mask(args.vmask), cfg, inpaint, masknet,
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    imaging.save_image(out / "refined.png", result["refined"])
    imaging.save_image(out / "base.png", result["base"])
    imaging.save_mask(out / "invisible_mask.png", result["invisible_mask"])
    imaging.save_mask(out / "dilated_mask.png", result["dilated_mask"])
    log(f"plug-refined outputs in {out}")


def cmd_evaluate(args) -> None:
    from .experiment import evaluate_predictions

    state = _pipeline_state(args) if args.with_pipeline_masks else None
    doc = evaluate_predictions(args.data, args.pred, args.report,
                               detector_ckpt=args.detector, state=state)
    log(f"evaluation report in {args.report}: "
        f"{json.dumps(doc['aggregates'], sort_keys=True)[:200]}...")


def cmd_experiment(args) -> None:
    from .experiment import run_experiment, strength_sweep

    state = _pipeline_state(args)
    kinds = args.kinds.split(",")
    seeds = [int(s) for s in args.seeds.split(",")]
    if args.sweep:
        s_values = [float(s) for s in args.sweep.split(",")]
        doc = strength_sweep(args.data, state, s_values, seeds, args.report, log=log)
    else:
        doc = run_experiment(args.data, state, kinds, seeds, args.report, log=log)
    log(f"experiment report in {args.report} ({doc['row_count']} rows)")


def cmd_serve(args) -> None:
    from .service import serve

    state = _pipeline_state(args)
    serve(state, args.bind, args.results, data_dir=args.data,
          frontend_dist=args.frontend, max_concurrency=args.max_concurrency)


def build_parser() -> argparse.ArgumentParser:
    data_default = _env("OCCUFILL_DATA_DIR", "dataset")
    ckpt_default = _env("OCCUFILL_CKPT_DIR", "ckpts")
    out_default = _env("OCCUFILL_OUT_DIR", "out")

    p = argparse.ArgumentParser(prog="occufill", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    f = sub.add_parser("forge", help="generate the synthetic occlusion dataset")
    f.add_argument("--subjects", type=int, default=64)
    f.add_argument("--views", type=int, default=4)
    f.add_argument("--size", type=int, default=64)
    f.add_argument("--mu", type=float, default=0.3)
    f.add_argument("--sigma", type=float, default=0.15)
    f.add_argument("--lo", type=float, default=0.05)
    f.add_argument("--hi", type=float, default=0.9)
    f.add_argument("--test-subjects", type=int, default=8)
    f.add_argument("--seed", type=int, default=0)
    f.add_argument("--out", default=data_default)
    f.set_defaults(fn=cmd_forge)

    td = sub.add_parser("train-diffusion", help="train codec + coarse generator + control branch")
    td.add_argument("--data", default=data_default)
    td.add_argument("--ckpts", default=ckpt_default)
    td.add_argument("--steps", type=int, default=3000)
    td.add_argument("--batch", type=int, default=14)
    td.add_argument("--codec-steps", type=int, default=1200)
    td.add_argument("--lr", type=float, default=1e-4)
    td.add_argument("--lr-control", type=float, default=5e-4)
    td.add_argument("--freeze", choices=["none", "cross-attn"], default="none")
    td.add_argument("--seed", type=int, default=0)
    td.set_defaults(fn=cmd_train_diffusion)

    cp = sub.add_parser("coarse-pool", help="pre-generate per-sample coarse completions")
    cp.add_argument("--data", default=data_default)
    cp.add_argument("--ckpts", default=ckpt_default)
    cp.add_argument("--out", default=str(Path(out_default) / "coarse_pool"))
    cp.add_argument("--n", type=int, default=16)
    cp.add_argument("--n-test", type=int, default=2)
    cp.add_argument("--kind", default="pose")
    cp.add_argument("--steps", type=int, default=24)
    cp.set_defaults(fn=cmd_coarse_pool)

    tm = sub.add_parser("train-mask", help="train the invisible-mask net on coarse pools")
    tm.add_argument("--data", default=data_default)
    tm.add_argument("--coarse-pool", default=str(Path(out_default) / "coarse_pool"))
    tm.add_argument("--ckpts", default=ckpt_default)
    tm.add_argument("--steps", type=int, default=900)
    tm.add_argument("--lr", type=float, default=1e-4)
    tm.add_argument("--wd", type=float, default=1e-4)
    tm.add_argument("--lambda-dice", type=float, default=0.5)
    tm.add_argument("--seed", type=int, default=0)
    tm.set_defaults(fn=cmd_train_mask)

    ts = sub.add_parser("train-segmenter", help="train the visible-mask segmenter adapter")
    ts.add_argument("--data", default=data_default)
    ts.add_argument("--ckpts", default=ckpt_default)
    ts.add_argument("--steps", type=int, default=700)
    ts.add_argument("--lr", type=float, default=1e-3)
    ts.add_argument("--seed", type=int, default=0)
    ts.set_defaults(fn=cmd_train_segmenter)

    ti = sub.add_parser("train-inpaint", help="train the masked-refinement denoiser")
    ti.add_argument("--data", default=data_default)
    ti.add_argument("--ckpts", default=ckpt_default)
    ti.add_argument("--steps", type=int, default=2200)
    ti.add_argument("--lr", type=float, default=2e-4)
    ti.add_argument("--seed", type=int, default=0)
    ti.add_argument("--codec-from-diffusion", action="store_true",
                    help="reuse the diffusion checkpoint's codec instead of training one")
    ti.set_defaults(fn=cmd_train_inpaint)

    tk = sub.add_parser("train-detector", help="train the keypoint detector")
    tk.add_argument("--data", default=data_default)
    tk.add_argument("--ckpts", default=ckpt_default)
    tk.add_argument("--steps", type=int, default=1400)
    tk.add_argument("--lr", type=float, default=2e-3)
    tk.add_argument("--seed", type=int, default=0)
    tk.set_defaults(fn=cmd_train_detector)

    c = sub.add_parser("complete", help="run the full pipeline on one image")
    c.add_argument("--input", required=True)
    c.add_argument("--prompt", help="PromptSpec JSON file; omit for unprompted inference")
    c.add_argument("--vmask", help="visible mask PNG; omit to use the segmenter adapter")
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--ckpts", default=ckpt_default)
    c.add_argument("--out", default=str(Path(out_default) / "complete"))
    c.add_argument("--sampler-steps", type=int, default=24)
    c.add_argument("--guidance", type=float, default=2.0)
    c.add_argument("--s", type=float, default=0.5)
    c.add_argument("--dilation", type=int, default=2)
    c.set_defaults(fn=cmd_complete)

    r = sub.add_parser("refine", help="refine a base composite inside a mask")
    r.add_argument("--input", required=True, help="base composite PNG")
    r.add_argument("--mask", required=True, help="dilated invisible mask PNG")
    r.add_argument("--s", type=float, default=0.5)
    r.add_argument("--steps", type=int, default=20)
    r.add_argument("--guidance", type=float, default=1.5)
    r.add_argument("--seed", type=int, default=0)
    r.add_argument("--ckpts", default=ckpt_default)
    r.add_argument("--inpaint", help="explicit inpaint checkpoint path")
    r.add_argument("--allow-untrained", action="store_true")
    r.add_argument("--out", default=str(Path(out_default) / "refined.png"))
    r.set_defaults(fn=cmd_refine)

    rp = sub.add_parser("refine-plug", help="apply refinement to an external completion")
    rp.add_argument("--candidate", required=True)
    rp.add_argument("--occluded", required=True)
    rp.add_argument("--vmask", required=True)
    rp.add_argument("--s", type=float, default=0.5)
    rp.add_argument("--steps", type=int, default=20)
    rp.add_argument("--guidance", type=float, default=1.5)
    rp.add_argument("--dilation", type=int, default=2)
    rp.add_argument("--seed", type=int, default=0)
    rp.add_argument("--ckpts", default=ckpt_default)
    rp.add_argument("--out", default=str(Path(out_default) / "refine_plug"))
    rp.set_defaults(fn=cmd_refine_plug)

    ev = sub.add_parser("evaluate", help="evaluate a directory of predicted completions")
    ev.add_argument("--pred", required=True)
    ev.add_argument("--data", default=data_default)
    ev.add_argument("--detector", help="detector checkpoint for joint error")
    ev.add_argument("--report", default=str(Path(out_default) / "evaluation"))
    ev.add_argument("--ckpts", default=ckpt_default)
    ev.add_argument("--with-pipeline-masks", action="store_true",
                    help="also score predicted invisible masks via the pipeline")
    ev.set_defaults(fn=cmd_evaluate)

    ex = sub.add_parser("experiment", help="prompt-kind / seed sweep over the test split")
    ex.add_argument("--data", default=data_default)
    ex.add_argument("--ckpts", default=ckpt_default)
    ex.add_argument("--kinds", default="pose,none")
    ex.add_argument("--seeds", default="0,1,2")
    ex.add_argument("--sweep", help="comma list of refinement strengths instead")
    ex.add_argument("--report", default=str(Path(out_default) / "experiment"))
    ex.add_argument("--sampler-steps", type=int, default=24)
    ex.add_argument("--guidance", type=float, default=2.0)
    ex.add_argument("--s", type=float, default=0.5)
    ex.add_argument("--dilation", type=int, default=2)
    ex.set_defaults(fn=cmd_experiment)

    sv = sub.add_parser("serve", help="run the HTTP service")
    sv.add_argument("--bind", default="127.0.0.1:8000")
    sv.add_argument("--ckpts", default=ckpt_default)
    sv.add_argument("--data", default=None)
    sv.add_argument("--results", default=str(Path(out_default) / "results"))
    sv.add_argument("--frontend", default=None, help="built UI directory to serve at /")
    sv.add_argument("--max-concurrency", type=int, default=2)
    sv.add_argument("--sampler-steps", type=int, default=24)
    sv.add_argument("--guidance", type=float, default=2.0)
    sv.add_argument("--s", type=float, default=0.5)
    sv.add_argument("--dilation", type=int, default=2)
    sv.set_defaults(fn=cmd_serve)

    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    args.fn(args)
    return 0


if __name__ == "__main__":
    sys.exit(main())
