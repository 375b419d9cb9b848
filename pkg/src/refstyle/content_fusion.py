"""Content-fusion encoder: a trainable copy of the denoiser's down/mid stack.

The copy reads the noisy latent plus an embedding of the binary content map,
cross-attends to style embeddings only, and emits one residual per down layer
plus one for the mid block through zero-initialised 1x1 convolutions.
"""
from __future__ import annotations

import copy
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .unet import UNet


@dataclass
class ContentResiduals:
    mid: torch.Tensor  # f_c^0
    down: list[torch.Tensor]  # f_c^1 .. f_c^L, down order

    @property
    def n_layers(self) -> int:
        return len(self.down)

    def scaled(self, factor: float) -> "ContentResiduals":
        return ContentResiduals(self.mid * factor, [d * factor for d in self.down])


def inject_content(latents: dict, residuals: ContentResiduals) -> dict:
    """Add content residuals to the mid latent and the up-block latents.

    ``latents`` is ``{"mid": f^0, "up": [f^1, ..., f^L]}``. Up latent ``i``
    receives down residual ``L - i + 1``: the first up block gets the deepest
    residual and the last up block gets the shallowest.
    """
    up = latents["up"]
    n = len(up)
    if residuals.n_layers != n:
        raise ValueError(f"residual count {residuals.n_layers} != up-block count {n}")
    if residuals.mid.shape != latents["mid"].shape:
        raise ValueError(
            f"mid residual shape {tuple(residuals.mid.shape)} != mid latent shape {tuple(latents['mid'].shape)}"
        )
    new_up = []
    for i in range(1, n + 1):
        r = residuals.down[n - i]  # f_c^{L-i+1}, 0-based
        f = up[i - 1]
        if r.shape != f.shape:
            raise ValueError(
                f"up latent {i} shape {tuple(f.shape)} != content residual {n - i + 1} shape {tuple(r.shape)}"
            )
        new_up.append(f + r)
    return {"mid": latents["mid"] + residuals.mid, "up": new_up}


def zero_conv(channels: int) -> nn.Conv2d:
    conv = nn.Conv2d(channels, channels, 1)
    nn.init.zeros_(conv.weight)
    nn.init.zeros_(conv.bias)
    return conv


class HintStem(nn.Module):
    """Downsamples the content map to latent resolution; last conv starts at zero."""

    def __init__(self, factor: int, out_channels: int, hidden: int = 16):
        super().__init__()
        layers: list[nn.Module] = [nn.Conv2d(1, hidden, 3, padding=1), nn.SiLU()]
        while factor > 1:
            layers += [nn.Conv2d(hidden, hidden, 3, stride=2, padding=1), nn.SiLU()]
            factor //= 2
        self.body = nn.Sequential(*layers)
        self.out = nn.Conv2d(hidden, out_channels, 3, padding=1)
        nn.init.zeros_(self.out.weight)
        nn.init.zeros_(self.out.bias)

    def forward(self, x):
        return self.out(self.body(x))


class ContentFusionEncoder(nn.Module):
    def __init__(self, unet: UNet, image_size: int):
        super().__init__()
        cfg = unet.cfg
        self.cfg = cfg
        self.image_size = image_size
        factor = image_size // cfg.latent_size
        self.conv_in = copy.deepcopy(unet.conv_in)
        self.time_embed = copy.deepcopy(unet.time_embed)
        self.down = copy.deepcopy(unet.down)
        self.mid = copy.deepcopy(unet.mid)
        # Conditioning is style-only: the cloned text projections read f_s and
        # there is no parallel branch.
        for m in self.modules():
            if hasattr(m, "remove_style_branch"):
                m.remove_style_branch()
        for p in self.parameters():
            p.requires_grad_(True)
        self.stem = HintStem(factor, cfg.widths[0])
        self.zero_down = nn.ModuleList(zero_conv(w) for w in cfg.widths)
        self.zero_mid = zero_conv(cfg.widths[-1])

    @property
    def n_layers(self) -> int:
        return len(self.down)

    def check_compatible(self, unet: UNet) -> None:
        if unet.n_layers != self.n_layers:
            raise ValueError(f"content encoder has {self.n_layers} down layers, denoiser has {unet.n_layers}")
        for j, (a, b) in enumerate(zip(self.cfg.widths, unet.cfg.widths), start=1):
            if a != b:
                raise ValueError(f"down layer {j}: content encoder width {a} != denoiser width {b}")
        if self.cfg.latent_size != unet.cfg.latent_size:
            raise ValueError("content encoder latent size differs from the denoiser")

    def forward(self, content_map, style, x_t, t) -> ContentResiduals:
        if content_map.ndim == 3:
            content_map = content_map.unsqueeze(1)
        content_map = content_map.to(x_t.dtype)
        if content_map.shape[-1] != self.image_size:
            content_map = F.interpolate(content_map, size=(self.image_size,) * 2, mode="nearest")
        if t.ndim == 0:
            t = t.expand(x_t.shape[0])
        temb = self.time_embed(t)
        h = self.conv_in(x_t) + self.stem(content_map)
        taps = []
        for block, zc in zip(self.down, self.zero_down):
            h, skip = block(h, temb, style)
            taps.append(zc(skip))
        h = self.mid(h, temb, style)
        return ContentResiduals(self.zero_mid(h), taps)

