import numpy as np
import pytest
import torch

from occufill.checkpoints import save_checkpoint
from occufill.diffusion.nets import DenoiserConfig, LatentCodec
from occufill.diffusion.training import CoarseModel
from occufill.detector import KeypointNet
from occufill.forge import ForgeConfig, build_dataset
from occufill.masknet import MaskNet
from occufill.refine import InpaintUNet
from occufill.segmenter import SegmenterNet

torch.set_num_threads(2)

SCHEDULE_DOC = {"T": 1000, "beta_min": 1e-4, "beta_max": 2e-2, "shape": "linear"}


def write_untrained_checkpoints(ckpt_dir, seed=0):
    """Random-weight checkpoints in the real persisted format (step 0)."""
    torch.manual_seed(seed)
    model = CoarseModel(DenoiserConfig())
    codec = LatentCodec()
    save_checkpoint(
        ckpt_dir / "diffusion",
        {"codec": codec.state_dict(), "model": model.state_dict()},
        {"kind": "diffusion", "arch": model.cfg.to_dict(), "schedule": SCHEDULE_DOC,
         "freeze": "none", "step": 0, "dataset_manifest_sha256": "test",
         "codec_recon_mse": None, "codec_latent_scale": 1.0, "image_size": 64},
    )
    masknet = MaskNet()
    save_checkpoint(
        ckpt_dir / "masknet",
        {"model": masknet.state_dict()},
        {"kind": "masknet", "arch": {"base": list(masknet.net.base)}, "step": 0,
         "lambda_dice": 0.5, "dataset_manifest_sha256": "test"},
    )
    inpaint = InpaintUNet()
    inpaint_codec = LatentCodec()
    save_checkpoint(
        ckpt_dir / "inpaint",
        {"unet": inpaint.state_dict(), "codec": inpaint_codec.state_dict()},
        {"kind": "inpaint",
         "arch": {"latent_channels": 16, "base": list(inpaint.cfg.base)},
         "schedule": SCHEDULE_DOC, "step": 0, "dataset_manifest_sha256": "test"},
    )
    detector = KeypointNet(7)
    save_checkpoint(
        ckpt_dir / "detector",
        {"model": detector.state_dict()},
        {"kind": "detector", "arch": {"joints": 7, "base": list(detector.net.base)},
         "step": 0, "floor_px": None, "dataset_manifest_sha256": "test"},
    )
    segmenter = SegmenterNet()
    save_checkpoint(
        ckpt_dir / "segmenter",
        {"model": segmenter.state_dict()},
        {"kind": "segmenter", "arch": {"base": list(segmenter.net.base)}, "step": 0,
         "dataset_manifest_sha256": "test"},
    )
    return ckpt_dir


@pytest.fixture(scope="session")
def untrained_ckpts(tmp_path_factory):
    return write_untrained_checkpoints(tmp_path_factory.mktemp("ckpts"))


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory):
    out = tmp_path_factory.mktemp("data") / "ds"
    cfg = ForgeConfig(subjects=4, views=2, test_subjects=1, seed=13, out_dir=str(out))
    manifest = build_dataset(cfg)
    return str(out), manifest
