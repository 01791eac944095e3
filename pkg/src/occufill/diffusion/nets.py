"""Network building blocks: latent codec, denoising U-Net, control branch.

Everything is sized for 64x64 inputs with a 4x-downsampled, 16-channel latent
space; the denoiser runs three resolutions (16, 8, 4) with cross-attention at
the two coarsest. Cross-attention modules live under attribute name ``xattn``
so the fine-tune freeze mask can address exactly them by parameter name.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import torch
from torch import nn


def timestep_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    """Sinusoidal embedding of integer timesteps, shape (B, dim)."""
    half = dim // 2
    freqs = torch.exp(
        -math.log(10000.0) * torch.arange(half, dtype=torch.float64) / (half - 1)
    ).to(device=t.device)
    args = t.double()[:, None] * freqs[None, :]
    emb = torch.cat([torch.cos(args), torch.sin(args)], dim=1)
    return emb.to(dtype=torch.get_default_dtype())


def _norm(channels: int) -> nn.GroupNorm:
    return nn.GroupNorm(min(8, channels), channels)


class ResBlock(nn.Module):
    """GN-SiLU-conv x2 with an additive projected time embedding."""

    def __init__(self, in_ch: int, out_ch: int, temb_dim: int):
        super().__init__()
        self.norm1 = _norm(in_ch)
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, padding=1)
        self.temb_proj = nn.Linear(temb_dim, out_ch)
        self.norm2 = _norm(out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1)
        self.skip = nn.Conv2d(in_ch, out_ch, 1) if in_ch != out_ch else nn.Identity()

    def forward(self, x: torch.Tensor, temb: torch.Tensor) -> torch.Tensor:
        h = self.conv1(nn.functional.silu(self.norm1(x)))
        h = h + self.temb_proj(nn.functional.silu(temb))[:, :, None, None]
        h = self.conv2(nn.functional.silu(self.norm2(h)))
        return h + self.skip(x)


class CrossAttention(nn.Module):
    """Single-head attention from spatial features onto context tokens."""

    def __init__(self, channels: int, ctx_dim: int):
        super().__init__()
        self.norm = _norm(channels)
        self.to_q = nn.Linear(channels, channels, bias=False)
        self.to_k = nn.Linear(ctx_dim, channels, bias=False)
        self.to_v = nn.Linear(ctx_dim, channels, bias=False)
        self.to_out = nn.Linear(channels, channels)
        self.scale = channels**-0.5

    def forward(self, x: torch.Tensor, ctx: torch.Tensor) -> torch.Tensor:
        b, c, h, w = x.shape
        q = self.to_q(self.norm(x).reshape(b, c, h * w).transpose(1, 2))
        k = self.to_k(ctx)
        v = self.to_v(ctx)
        attn = torch.softmax(q @ k.transpose(1, 2) * self.scale, dim=-1)
        out = self.to_out(attn @ v)
        return x + out.transpose(1, 2).reshape(b, c, h, w)


class Downsample(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.conv = nn.Conv2d(channels, channels, 3, stride=2, padding=1)

    def forward(self, x):
        return self.conv(x)


class Upsample(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.conv = nn.Conv2d(channels, channels, 3, padding=1)

    def forward(self, x):
        return self.conv(nn.functional.interpolate(x, scale_factor=2, mode="nearest"))


@dataclass(frozen=True)
class DenoiserConfig:
    in_channels: int = 48  # noisy latent (16) + conditioning latents (32)
    out_channels: int = 16
    base: tuple = (64, 96, 128)
    temb_dim: int = 128
    ctx_dim: Optional[int] = 64  # None disables cross-attention entirely
    ctx_tokens: int = 4

    def to_dict(self) -> dict:
        d = {k: getattr(self, k) for k in ("in_channels", "out_channels", "temb_dim", "ctx_dim", "ctx_tokens")}
        d["base"] = list(self.base)
        return d

    @staticmethod
    def from_dict(d: dict) -> "DenoiserConfig":
        return DenoiserConfig(
            in_channels=d["in_channels"], out_channels=d["out_channels"],
            base=tuple(d["base"]), temb_dim=d["temb_dim"],
            ctx_dim=d["ctx_dim"], ctx_tokens=d["ctx_tokens"],
        )


class Denoiser(nn.Module):
    """Three-level eps-prediction U-Net with optional cross-attention.

    Control residuals, when given, are added to the encoder skip tensors and
    the middle activation, scaled by ``conditioning_scale``.
    """

    def __init__(self, cfg: DenoiserConfig):
        super().__init__()
        self.cfg = cfg
        c0, c1, c2 = cfg.base
        self.temb = nn.Sequential(
            nn.Linear(cfg.temb_dim, cfg.temb_dim), nn.SiLU(), nn.Linear(cfg.temb_dim, cfg.temb_dim)
        )
        self.conv_in = nn.Conv2d(cfg.in_channels, c0, 3, padding=1)
        self.rb0 = ResBlock(c0, c0, cfg.temb_dim)
        self.down0 = Downsample(c0)
        self.rb1 = ResBlock(c0, c1, cfg.temb_dim)
        self.down1 = Downsample(c1)
        self.rb2 = ResBlock(c1, c2, cfg.temb_dim)
        self.rb_mid = ResBlock(c2, c2, cfg.temb_dim)
        if cfg.ctx_dim is not None:
            self.xattn1 = CrossAttention(c1, cfg.ctx_dim)
            self.xattn2 = CrossAttention(c2, cfg.ctx_dim)
            self.xattn_mid = CrossAttention(c2, cfg.ctx_dim)
            self.xattn_up2 = CrossAttention(c1, cfg.ctx_dim)
            self.xattn_up1 = CrossAttention(c1, cfg.ctx_dim)
        self.rb_up2 = ResBlock(c2 + c2, c1, cfg.temb_dim)
        self.up2 = Upsample(c1)
        self.rb_up1 = ResBlock(c1 + c1, c1, cfg.temb_dim)
        self.up1 = Upsample(c1)
        self.rb_up0 = ResBlock(c1 + c0, c0, cfg.temb_dim)
        self.out_norm = _norm(c0)
        self.conv_out = nn.Conv2d(c0, cfg.out_channels, 3, padding=1)

    def encoder_features(self, x, temb, ctx):
        h0 = self.rb0(self.conv_in(x), temb)
        h1 = self.rb1(self.down0(h0), temb)
        if ctx is not None:
            h1 = self.xattn1(h1, ctx)
        h2 = self.rb2(self.down1(h1), temb)
        if ctx is not None:
            h2 = self.xattn2(h2, ctx)
        m = self.rb_mid(h2, temb)
        if ctx is not None:
            m = self.xattn_mid(m, ctx)
        return h0, h1, h2, m

    def forward(
        self,
        x: torch.Tensor,
        t: torch.Tensor,
        ctx: Optional[torch.Tensor] = None,
        control: Optional[dict] = None,
        conditioning_scale: float = 1.0,
    ) -> torch.Tensor:
        if (ctx is None) != (self.cfg.ctx_dim is None):
            raise ValueError("context presence must match the model's ctx_dim")
        dtype = self.conv_in.weight.dtype
        temb = self.temb(timestep_embedding(t, self.cfg.temb_dim).to(dtype))
        h0, h1, h2, m = self.encoder_features(x, temb, ctx)
        if control is not None:
            cs = conditioning_scale
            h0 = h0 + cs * control["skip0"]
            h1 = h1 + cs * control["skip1"]
            h2 = h2 + cs * control["skip2"]
            m = m + cs * control["mid"]
        u2 = self.rb_up2(torch.cat([m, h2], dim=1), temb)
        if ctx is not None:
            u2 = self.xattn_up2(u2, ctx)
        u1 = self.rb_up1(torch.cat([self.up2(u2), h1], dim=1), temb)
        if ctx is not None:
            u1 = self.xattn_up1(u1, ctx)
        u0 = self.rb_up0(torch.cat([self.up1(u1), h0], dim=1), temb)
        return self.conv_out(nn.functional.silu(self.out_norm(u0)))


def zero_conv(channels: int) -> nn.Conv2d:
    conv = nn.Conv2d(channels, channels, 1)
    nn.init.zeros_(conv.weight)
    nn.init.zeros_(conv.bias)
    return conv


class ControlBranch(nn.Module):
    """Trainable copy of the denoiser encoder fed by a prompt-raster hint head.

    The forward pass depends only on the prompt raster (a fixed zero time
    embedding and learned internal tokens stand in for step inputs), so the
    per-resolution residuals are computed once per request. Every residual
    passes through a zero-initialized 1x1 conv, so an untrained branch
    contributes exactly nothing.
    """

    def __init__(self, cfg: DenoiserConfig, hint_channels: int = 6):
        super().__init__()
        self.cfg = cfg
        self.hint_channels = hint_channels
        c0, c1, c2 = cfg.base
        self.hint_head = nn.Sequential(
            nn.Conv2d(hint_channels, 16, 3, padding=1), nn.SiLU(),
            nn.Conv2d(16, 32, 3, stride=2, padding=1), nn.SiLU(),
            nn.Conv2d(32, c0, 3, stride=2, padding=1), nn.SiLU(),
            nn.Conv2d(c0, c0, 3, padding=1),
        )
        self.rb0 = ResBlock(c0, c0, cfg.temb_dim)
        self.down0 = Downsample(c0)
        self.rb1 = ResBlock(c0, c1, cfg.temb_dim)
        self.down1 = Downsample(c1)
        self.rb2 = ResBlock(c1, c2, cfg.temb_dim)
        self.rb_mid = ResBlock(c2, c2, cfg.temb_dim)
        if cfg.ctx_dim is not None:
            self.xattn1 = CrossAttention(c1, cfg.ctx_dim)
            self.xattn2 = CrossAttention(c2, cfg.ctx_dim)
            self.xattn_mid = CrossAttention(c2, cfg.ctx_dim)
            self.tokens = nn.Parameter(torch.zeros(cfg.ctx_tokens, cfg.ctx_dim))
        self.zero0 = zero_conv(c0)
        self.zero1 = zero_conv(c1)
        self.zero2 = zero_conv(c2)
        self.zero_mid = zero_conv(c2)

    def copy_encoder_from(self, denoiser: Denoiser) -> None:
        """Initialize the copied blocks from the denoiser's encoder weights."""
        pairs = ["rb0", "down0", "rb1", "down1", "rb2", "rb_mid"]
        if self.cfg.ctx_dim is not None:
            pairs += ["xattn1", "xattn2", "xattn_mid"]
        for name in pairs:
            getattr(self, name).load_state_dict(getattr(denoiser, name).state_dict())

    def forward(self, prompt_raster: torch.Tensor) -> dict:
        if prompt_raster.shape[1] != self.hint_channels:
            raise ValueError(
                f"control input head expects {self.hint_channels} channels, got {prompt_raster.shape[1]}"
            )
        b = prompt_raster.shape[0]
        temb = prompt_raster.new_zeros((b, self.cfg.temb_dim))
        ctx = self.tokens[None].expand(b, -1, -1) if self.cfg.ctx_dim is not None else None
        h0 = self.rb0(self.hint_head(prompt_raster), temb)
        h1 = self.rb1(self.down0(h0), temb)
        if ctx is not None:
            h1 = self.xattn1(h1, ctx)
        h2 = self.rb2(self.down1(h1), temb)
        if ctx is not None:
            h2 = self.xattn2(h2, ctx)
        m = self.rb_mid(h2, temb)
        if ctx is not None:
            m = self.xattn_mid(m, ctx)
        return {
            "skip0": self.zero0(h0),
            "skip1": self.zero1(h1),
            "skip2": self.zero2(h2),
            "mid": self.zero_mid(m),
        }


class ContextEmbedder(nn.Module):
    """Global conditioning tokens from the occluded input image.

    Stands in for an external image-embedding encoder; a learned null token
    set serves the unconditional guidance branch.
    """

    def __init__(self, ctx_dim: int = 64, tokens: int = 4):
        super().__init__()
        self.ctx_dim = ctx_dim
        self.tokens = tokens
        self.trunk = nn.Sequential(
            nn.Conv2d(3, 16, 3, stride=2, padding=1), nn.SiLU(),
            nn.Conv2d(16, 32, 3, stride=2, padding=1), nn.SiLU(),
            nn.Conv2d(32, ctx_dim, 3, stride=2, padding=1), nn.SiLU(),
        )
        self.norm = nn.LayerNorm(ctx_dim)
        self.null_context = nn.Parameter(torch.randn(tokens, ctx_dim) * 0.02)

    def forward(self, image: torch.Tensor) -> torch.Tensor:
        h = self.trunk(image)
        side = int(math.isqrt(self.tokens))
        h = nn.functional.adaptive_avg_pool2d(h, side)
        tok = h.flatten(2).transpose(1, 2)
        return self.norm(tok)

    def null(self, batch: int) -> torch.Tensor:
        return self.null_context[None].expand(batch, -1, -1)


class LatentCodec(nn.Module):
    """Small autoencoder: 3x64x64 images <-> 16x16x16 latents (factor 4).

    ``latent_scale`` normalizes encoder outputs to roughly unit variance; it is
    measured on training data after reconstruction pretraining.
    """

    downsampling = 4

    def __init__(self, latent_channels: int = 16):
        super().__init__()
        self.latent_channels = latent_channels
        self.encoder = nn.Sequential(
            nn.Conv2d(3, 16, 3, padding=1), nn.SiLU(),
            nn.Conv2d(16, 32, 3, stride=2, padding=1), nn.SiLU(),
            nn.Conv2d(32, 64, 3, stride=2, padding=1), nn.SiLU(),
            nn.Conv2d(64, latent_channels, 3, padding=1),
        )
        self.decoder = nn.Sequential(
            nn.Conv2d(latent_channels, 64, 3, padding=1), nn.SiLU(),
            nn.Upsample(scale_factor=2, mode="nearest"),
            nn.Conv2d(64, 32, 3, padding=1), nn.SiLU(),
            nn.Conv2d(32, 32, 3, padding=1), nn.SiLU(),
            nn.Upsample(scale_factor=2, mode="nearest"),
            nn.Conv2d(32, 16, 3, padding=1), nn.SiLU(),
            nn.Conv2d(16, 3, 3, padding=1),
        )
        self.register_buffer("latent_scale", torch.ones(()))

    def encode(self, image: torch.Tensor) -> torch.Tensor:
        if image.shape[1] == 1:
            image = image.expand(-1, 3, -1, -1)
        return self.encoder(image) * self.latent_scale

    def decode(self, z: torch.Tensor) -> torch.Tensor:
        return self.decoder(z / self.latent_scale)

    def reconstruct(self, image: torch.Tensor) -> torch.Tensor:
        return self.decode(self.encode(image))


class DoubleConv(nn.Module):
    def __init__(self, in_ch: int, out_ch: int):
        super().__init__()
        self.block = nn.Sequential(
            nn.Conv2d(in_ch, out_ch, 3, padding=1), _norm(out_ch), nn.SiLU(),
            nn.Conv2d(out_ch, out_ch, 3, padding=1), _norm(out_ch), nn.SiLU(),
        )

    def forward(self, x):
        return self.block(x)


class SmallUNet(nn.Module):
    """Plain three-level U-Net used by the mask, segmentation, and keypoint heads."""

    def __init__(self, in_channels: int, out_channels: int, base: tuple = (16, 32, 64)):
        super().__init__()
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.base = tuple(base)
        c0, c1, c2 = base
        self.enc0 = DoubleConv(in_channels, c0)
        self.pool0 = nn.Conv2d(c0, c0, 3, stride=2, padding=1)
        self.enc1 = DoubleConv(c0, c1)
        self.pool1 = nn.Conv2d(c1, c1, 3, stride=2, padding=1)
        self.enc2 = DoubleConv(c1, c2)
        self.up1 = Upsample(c2)
        self.dec1 = DoubleConv(c2 + c1, c1)
        self.up0 = Upsample(c1)
        self.dec0 = DoubleConv(c1 + c0, c0)
        self.head = nn.Conv2d(c0, out_channels, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        e0 = self.enc0(x)
        e1 = self.enc1(self.pool0(e0))
        e2 = self.enc2(self.pool1(e1))
        d1 = self.dec1(torch.cat([self.up1(e2), e1], dim=1))
        d0 = self.dec0(torch.cat([self.up0(d1), e0], dim=1))
        return self.head(d0)
