"""Compact 3D U-Net noise predictor with time embedding and optional
cross-attention conditioning on histogram tokens."""

from __future__ import annotations

import math
from dataclasses import dataclass, asdict

import torch
import torch.nn as nn


@dataclass(frozen=True)
class DenoiserContract:
    """Channel/conditioning contract a denoiser exposes to the engine.

    Input = image_channels + cond_channels concatenated volumes; output has
    image_channels. context_token_dim is set iff the model takes
    cross-attention context tokens.
    """

    image_channels: int
    cond_channels: int = 0
    context_token_dim: int | None = None
    time_dim: int = 64

    @property
    def in_channels(self) -> int:
        return self.image_channels + self.cond_channels

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, d: dict) -> "DenoiserContract":
        return cls(**d)


def _norm_groups(channels: int) -> int:
    g = 8
    while channels % g:
        g //= 2
    return max(g, 1)


class SinusoidalTimeEmbedding(nn.Module):
    def __init__(self, dim: int):
        super().__init__()
        if dim % 2:
            raise ValueError(f"time embedding dim must be even, got {dim}")
        self.dim = dim

    def forward(self, t: torch.Tensor) -> torch.Tensor:
        half = self.dim // 2
        freqs = torch.exp(
            -math.log(10000.0) * torch.arange(half, device=t.device, dtype=torch.float32) / max(half - 1, 1)
        )
        args = t.float()[:, None] * freqs[None, :]
        return torch.cat([args.sin(), args.cos()], dim=-1)


class ResBlock3D(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, time_dim: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(_norm_groups(in_ch), in_ch)
        self.conv1 = nn.Conv3d(in_ch, out_ch, 3, padding=1)
        self.time_proj = nn.Linear(time_dim, out_ch)
        self.norm2 = nn.GroupNorm(_norm_groups(out_ch), out_ch)
        self.conv2 = nn.Conv3d(out_ch, out_ch, 3, padding=1)
        self.skip = nn.Conv3d(in_ch, out_ch, 1) if in_ch != out_ch else nn.Identity()
        self.act = nn.SiLU()

    def forward(self, x: torch.Tensor, t_emb: torch.Tensor) -> torch.Tensor:
        h = self.conv1(self.act(self.norm1(x)))
        h = h + self.time_proj(self.act(t_emb))[:, :, None, None, None]
        h = self.conv2(self.act(self.norm2(h)))
        return h + self.skip(x)


class CrossAttention3D(nn.Module):
    """Attend from spatial positions (queries) to context tokens (keys/values)."""

    def __init__(self, channels: int, token_dim: int, heads: int = 2):
        super().__init__()
        self.heads = heads
        self.scale = (channels // heads) ** -0.5
        self.norm = nn.GroupNorm(_norm_groups(channels), channels)
        self.to_q = nn.Linear(channels, channels, bias=False)
        self.to_k = nn.Linear(token_dim, channels, bias=False)
        self.to_v = nn.Linear(token_dim, channels, bias=False)
        self.proj = nn.Linear(channels, channels)

    def forward(self, x: torch.Tensor, context: torch.Tensor) -> torch.Tensor:
        b, c, d, h, w = x.shape
        flat = self.norm(x).reshape(b, c, -1).permute(0, 2, 1)  # (B, N, C)
        q = self.to_q(flat)
        k = self.to_k(context)
        v = self.to_v(context)

        def split(z):
            return z.reshape(b, -1, self.heads, c // self.heads).transpose(1, 2)

        q, k, v = split(q), split(k), split(v)
        attn = torch.softmax(q @ k.transpose(-2, -1) * self.scale, dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(b, -1, c)
        out = self.proj(out).permute(0, 2, 1).reshape(b, c, d, h, w)
        return x + out


class Denoiser3D(nn.Module):
    """Noise predictor: (B, in_channels, D, H, W) + timestep -> (B, image_channels, D, H, W).

    Spatial dims must be divisible by 2 ** (len(channel_mults) - 1).
    """

    def __init__(
        self,
        image_channels: int = 1,
        cond_channels: int = 0,
        base_channels: int = 16,
        channel_mults: tuple[int, ...] = (1, 2),
        time_dim: int = 64,
        context_token_dim: int | None = None,
        heads: int = 2,
    ):
        super().__init__()
        self.contract = DenoiserContract(
            image_channels=image_channels,
            cond_channels=cond_channels,
            context_token_dim=context_token_dim,
            time_dim=time_dim,
        )
        self.hparams = {
            "image_channels": image_channels,
            "cond_channels": cond_channels,
            "base_channels": base_channels,
            "channel_mults": list(channel_mults),
            "time_dim": time_dim,
            "context_token_dim": context_token_dim,
            "heads": heads,
        }
        chs = [base_channels * m for m in channel_mults]
        self.time_mlp = nn.Sequential(
            SinusoidalTimeEmbedding(time_dim),
            nn.Linear(time_dim, time_dim),
            nn.SiLU(),
            nn.Linear(time_dim, time_dim),
        )
        self.in_conv = nn.Conv3d(image_channels + cond_channels, chs[0], 3, padding=1)

        self.down_blocks = nn.ModuleList()
        self.downsamples = nn.ModuleList()
        for i, ch in enumerate(chs):
            in_ch = chs[max(i - 1, 0)]
            self.down_blocks.append(ResBlock3D(in_ch, ch, time_dim))
            self.downsamples.append(
                nn.Conv3d(ch, ch, 4, stride=2, padding=1) if i < len(chs) - 1 else nn.Identity()
            )

        self.mid1 = ResBlock3D(chs[-1], chs[-1], time_dim)
        self.mid_attn = (
            CrossAttention3D(chs[-1], context_token_dim, heads) if context_token_dim else None
        )
        self.mid2 = ResBlock3D(chs[-1], chs[-1], time_dim)

        self.up_blocks = nn.ModuleList()
        self.upsamples = nn.ModuleList()
        for i in reversed(range(len(chs))):
            self.upsamples.append(
                nn.ConvTranspose3d(chs[min(i + 1, len(chs) - 1)], chs[i], 4, stride=2, padding=1)
                if i < len(chs) - 1
                else nn.Identity()
            )
            self.up_blocks.append(ResBlock3D(chs[i] * 2, chs[i], time_dim))

        self.out_norm = nn.GroupNorm(_norm_groups(chs[0]), chs[0])
        self.out_conv = nn.Conv3d(chs[0], image_channels, 3, padding=1)
        self.act = nn.SiLU()

    def forward(
        self, x: torch.Tensor, t: torch.Tensor, context: torch.Tensor | None = None
    ) -> torch.Tensor:
        if self.mid_attn is not None and context is None:
            raise ValueError("denoiser requires context tokens but none were given")
        if self.mid_attn is None and context is not None:
            raise ValueError("denoiser takes no context tokens")
        t_emb = self.time_mlp(t)
        h = self.in_conv(x)
        skips = []
        for block, down in zip(self.down_blocks, self.downsamples):
            h = block(h, t_emb)
            skips.append(h)
            h = down(h)
        h = self.mid1(h, t_emb)
        if self.mid_attn is not None:
            h = self.mid_attn(h, context)
        h = self.mid2(h, t_emb)
        for block, up in zip(self.up_blocks, self.upsamples):
            h = up(h)
            h = block(torch.cat([h, skips.pop()], dim=1), t_emb)
        return self.out_conv(self.act(self.out_norm(h)))
