"""Small conditional U-Net with cross-attention at every block.

Down layer ``j`` (1-based) emits a skip latent; up block ``i`` consumes the
skip from down layer ``L - i + 1``. Content residuals are added to the mid
output and to these skip latents (see :func:`refstyle.content_fusion.inject_content`).
"""
from __future__ import annotations

import math
from typing import Optional

import torch
import torch.nn as nn
import torch.nn.functional as F

from .attention import ParallelCrossAttention
from .config import DenoiserConfig


def timestep_embedding(t: torch.Tensor, dim: int, max_period: float = 10000.0) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=torch.float64) / half)
    args = t.to(torch.float64)[:, None] * freqs[None]
    emb = torch.cat([torch.cos(args), torch.sin(args)], dim=-1)
    if dim % 2:
        emb = F.pad(emb, (0, 1))
    return emb


class TimeEmbedding(nn.Module):
    def __init__(self, width: int):
        super().__init__()
        self.width = width
        self.fc1 = nn.Linear(width, width)
        self.fc2 = nn.Linear(width, width)

    def forward(self, t: torch.Tensor) -> torch.Tensor:
        ref = self.fc1.weight
        emb = timestep_embedding(t, self.width).to(ref.dtype)
        return self.fc2(F.silu(self.fc1(emb)))


class ResnetBlock(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, time_width: int, groups: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(min(groups, in_ch), in_ch)
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, padding=1)
        self.time = nn.Linear(time_width, out_ch)
        self.norm2 = nn.GroupNorm(min(groups, out_ch), out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1)
        self.skip = nn.Conv2d(in_ch, out_ch, 1) if in_ch != out_ch else nn.Identity()

    def forward(self, x, temb):
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.time(F.silu(temb))[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return self.skip(x) + h


class AttentionSite(nn.Module):
    """GroupNorm, flatten to tokens, cross-attend, add back."""

    def __init__(self, channels: int, cfg: DenoiserConfig):
        super().__init__()
        self.norm = nn.GroupNorm(min(cfg.groups, channels), channels)
        self.attn = ParallelCrossAttention(channels, cfg.text_width, cfg.attn_width, cfg.attn_heads)

    def forward(self, x, context, style=None, scale=0.0):
        b, c, h, w = x.shape
        tokens = self.norm(x).flatten(2).transpose(1, 2)
        out = self.attn(tokens, context, style, scale)
        return x + out.transpose(1, 2).reshape(b, c, h, w)


class DownBlock(nn.Module):
    def __init__(self, in_ch, out_ch, cfg: DenoiserConfig, downsample: bool):
        super().__init__()
        self.res = ResnetBlock(in_ch, out_ch, cfg.time_width, cfg.groups)
        self.attn = AttentionSite(out_ch, cfg)
        self.down = nn.Conv2d(out_ch, out_ch, 3, stride=2, padding=1) if downsample else None

    def forward(self, x, temb, context, style=None, scale=0.0):
        skip = self.attn(self.res(x, temb), context, style, scale)
        h = self.down(skip) if self.down is not None else skip
        return h, skip


class MidBlock(nn.Module):
    def __init__(self, ch, cfg: DenoiserConfig):
        super().__init__()
        self.res1 = ResnetBlock(ch, ch, cfg.time_width, cfg.groups)
        self.attn = AttentionSite(ch, cfg)
        self.res2 = ResnetBlock(ch, ch, cfg.time_width, cfg.groups)

    def forward(self, x, temb, context, style=None, scale=0.0):
        return self.res2(self.attn(self.res1(x, temb), context, style, scale), temb)


class UpBlock(nn.Module):
    def __init__(self, in_ch, skip_ch, out_ch, cfg: DenoiserConfig, upsample: bool):
        super().__init__()
        self.res = ResnetBlock(in_ch + skip_ch, out_ch, cfg.time_width, cfg.groups)
        self.attn = AttentionSite(out_ch, cfg)
        self.up = nn.Conv2d(out_ch, out_ch, 3, padding=1) if upsample else None

    def forward(self, x, skip, temb, context, style=None, scale=0.0):
        h = self.attn(self.res(torch.cat([x, skip], dim=1), temb), context, style, scale)
        if self.up is not None:
            h = self.up(F.interpolate(h, scale_factor=2, mode="nearest"))
        return h


class UNet(nn.Module):
    def __init__(self, cfg: DenoiserConfig):
        super().__init__()
        self.cfg = cfg
        widths = list(cfg.widths)
        n = len(widths)
        self.conv_in = nn.Conv2d(cfg.latent_channels, widths[0], 3, padding=1)
        self.time_embed = TimeEmbedding(cfg.time_width)
        self.down = nn.ModuleList(
            DownBlock(widths[max(j - 1, 0)], widths[j], cfg, downsample=j < n - 1) for j in range(n)
        )
        self.mid = MidBlock(widths[-1], cfg)
        ups = []
        prev = widths[-1]
        for i in range(n):
            skip_ch = widths[n - 1 - i]
            ups.append(UpBlock(prev, skip_ch, skip_ch, cfg, upsample=i < n - 1))
            prev = skip_ch
        self.up = nn.ModuleList(ups)
        self.norm_out = nn.GroupNorm(min(cfg.groups, widths[0]), widths[0])
        self.conv_out = nn.Conv2d(widths[0], cfg.latent_channels, 3, padding=1)

    @property
    def n_layers(self) -> int:
        return len(self.down)

    def attention_sites(self) -> dict[str, ParallelCrossAttention]:
        return {name: m for name, m in self.named_modules() if isinstance(m, ParallelCrossAttention)}

    def add_style_adapter(self, style_dim: int) -> None:
        for site in self.attention_sites().values():
            site.add_style_branch(style_dim)

    @property
    def has_style_adapter(self) -> bool:
        sites = self.attention_sites().values()
        return bool(sites) and all(s.has_style_branch for s in sites)

    def adapter_parameters(self) -> list[nn.Parameter]:
        params = []
        for site in self.attention_sites().values():
            if site.has_style_branch:
                params += [site.to_k_style.weight, site.to_v_style.weight]
        return params

    def skip_shapes(self, batch: int = 1) -> dict:
        """Shapes of the mid latent and of the skip latents, in down order."""
        size = self.cfg.latent_size
        down = []
        for j, w in enumerate(self.cfg.widths):
            down.append((batch, w, size, size))
            if j < self.n_layers - 1:
                size //= 2
        return {"mid": (batch, self.cfg.widths[-1], size, size), "down": down}

    def forward(
        self,
        x: torch.Tensor,
        t: torch.Tensor,
        text: torch.Tensor,
        style: Optional[torch.Tensor] = None,
        scale: float = 0.0,
        content=None,
    ) -> torch.Tensor:
        from .content_fusion import inject_content

        if t.ndim == 0:
            t = t.expand(x.shape[0])
        temb = self.time_embed(t)
        h = self.conv_in(x)
        skips = []
        for block in self.down:
            h, skip = block(h, temb, text, style, scale)
            skips.append(skip)
        h = self.mid(h, temb, text, style, scale)
        latents = {"mid": h, "up": skips[::-1]}
        if content is not None:
            latents = inject_content(latents, content)
        h = latents["mid"]
        for block, skip in zip(self.up, latents["up"]):
            h = block(h, skip, temb, text, style, scale)
        return self.conv_out(F.silu(self.norm_out(h)))
