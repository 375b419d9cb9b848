"""End-to-end style transfer model at desk scale.

Bundles the frozen text encoder, the fixed latent codec, the U-Net with its
style adapter, the style encoder and (optionally) the content-fusion encoder.
"""
from __future__ import annotations

import math
import re
import zlib
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import DEFAULT_GUIDANCE, DEFAULT_STEPS, DEFAULT_STYLE_SCALE, ModelConfig, TextEncoderConfig
from .content_fusion import ContentFusionEncoder
from .diffusion import NoiseSchedule, cfg_predict, sample
from .style_encoder import StyleEncoder
from .unet import UNet

_WORD = re.compile(r"[a-z0-9']+")


class HashTextEncoder(nn.Module):
    """Deterministic stand-in for a frozen text encoder.

    Words are hashed (crc32) into a fixed random embedding table; a sinusoidal
    position code is added. The table is a buffer, so it never trains.
    """

    def __init__(self, cfg: TextEncoderConfig):
        super().__init__()
        self.cfg = cfg
        gen = torch.Generator().manual_seed(cfg.seed)
        table = torch.randn(cfg.vocab_size, cfg.width, generator=gen) / math.sqrt(cfg.width)
        table[0] = 0.0  # padding
        pos = torch.arange(cfg.n_tokens, dtype=torch.float64)[:, None]
        freq = torch.exp(-math.log(100.0) * torch.arange(cfg.width, dtype=torch.float64) / cfg.width)
        self.register_buffer("table", table)
        self.register_buffer("pos", (0.1 * torch.sin(pos * freq[None] + torch.arange(cfg.width))).float())

    def token_ids(self, prompt: str) -> list[int]:
        words = _WORD.findall(prompt.lower())[: self.cfg.n_tokens]
        ids = [zlib.crc32(w.encode()) % (self.cfg.vocab_size - 1) + 1 for w in words]
        return ids + [0] * (self.cfg.n_tokens - len(ids))

    def forward(self, prompts: Sequence[str] | str) -> torch.Tensor:
        if isinstance(prompts, str):
            prompts = [prompts]
        ids = torch.tensor([self.token_ids(p) for p in prompts])
        return self.table[ids] + self.pos


class LatentCodec(nn.Module):
    """Fixed orthonormal linear map between images and the toy latent space.

    Each ``f x f`` RGB block (``f = image_size / latent_size``) maps to four
    numbers: the three channel means and a horizontal luminance ramp. Decoding
    is the transpose, so encode(decode(z)) == z.
    """

    def __init__(self, factor: int):
        super().__init__()
        self.factor = factor
        f2 = factor * factor
        basis = torch.zeros(4, 3 * f2, dtype=torch.float64)
        for c in range(3):
            basis[c, c * f2:(c + 1) * f2] = 1.0 / factor
        ramp = (torch.arange(factor, dtype=torch.float64) - (factor - 1) / 2).repeat(factor)
        basis[3] = ramp.repeat(3)
        basis[3] /= basis[3].norm()
        self.register_buffer("basis", basis.float())

    def encode(self, images: torch.Tensor) -> torch.Tensor:
        """``(B, 3, H, W)`` in [0, 1] -> ``(B, 4, H/f, W/f)``."""
        blocks = F.pixel_unshuffle(images * 2 - 1, self.factor)
        return torch.einsum("kc,bchw->bkhw", self.basis.to(images.dtype), blocks) / self.factor

    def decode(self, latents: torch.Tensor) -> torch.Tensor:
        blocks = torch.einsum("kc,bkhw->bchw", self.basis.to(latents.dtype), latents * self.factor)
        return ((F.pixel_shuffle(blocks, self.factor) + 1) / 2).clamp(0, 1)


def to_uint8(images: torch.Tensor) -> np.ndarray:
    """``(B, 3, H, W)`` floats in [0, 1] -> ``(B, H, W, 3)`` uint8."""
    arr = images.detach().to(torch.float64).clamp(0, 1).permute(0, 2, 3, 1).numpy()
    return np.round(arr * 255).astype(np.uint8)


def from_uint8(arr: np.ndarray) -> torch.Tensor:
    """``(H, W, 3)`` or ``(B, H, W, 3)`` uint8 -> ``(B, 3, H, W)`` float32 in [0, 1]."""
    arr = np.asarray(arr)
    if arr.ndim == 3:
        arr = arr[None]
    return torch.from_numpy(arr.astype(np.float32) / 255.0).permute(0, 3, 1, 2).contiguous()


class StylePipeline(nn.Module):
    def __init__(self, cfg: ModelConfig, seed: int = 0, style_adapter: bool = True):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            self.unet = UNet(cfg.denoiser)
            self.style_encoder = StyleEncoder(cfg.style)
            if style_adapter:
                self.unet.add_style_adapter(cfg.style.out_width)
        self.text_encoder = HashTextEncoder(cfg.text)
        self.codec = LatentCodec(cfg.image_size // cfg.denoiser.latent_size)
        self.schedule = NoiseSchedule.scaled_linear(cfg.schedule_steps, cfg.beta_start, cfg.beta_end)
        self.content_encoder: Optional[ContentFusionEncoder] = None

    @property
    def dtype(self) -> torch.dtype:
        return self.unet.conv_in.weight.dtype

    def attach_content_encoder(self, seed: int = 0) -> ContentFusionEncoder:
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            enc = ContentFusionEncoder(self.unet, self.cfg.image_size).to(self.dtype)
        enc.check_compatible(self.unet)
        self.content_encoder = enc
        return enc

    def detach_content_encoder(self) -> None:
        self.content_encoder = None

    def encode_text(self, prompts) -> torch.Tensor:
        return self.text_encoder(prompts).to(self.dtype)

    def null_text(self, batch: int) -> torch.Tensor:
        return self.encode_text([""] * batch)

    def encode_style(self, images: torch.Tensor) -> torch.Tensor:
        return self.style_encoder(images.to(self.dtype))

    def predict_eps(self, x_t, t, text, style=None, scale=0.0, content_map=None):
        content = None
        if content_map is not None:
            if self.content_encoder is None:
                raise RuntimeError("a content map was given but no content-fusion encoder is attached")
            content = self.content_encoder(content_map, style, x_t, torch.as_tensor(t))
        return self.unet(x_t, torch.as_tensor(t), text, style, scale, content)

    @torch.no_grad()
    def generate(
        self,
        style_image: Optional[torch.Tensor],
        prompt: str | Sequence[str] = "",
        content_map: Optional[torch.Tensor] = None,
        steps: int = DEFAULT_STEPS,
        guidance: float = DEFAULT_GUIDANCE,
        scale: float = DEFAULT_STYLE_SCALE,
        seed: int = 0,
        sampler: str = "ddim",
    ) -> dict[str, torch.Tensor]:
        """Sample a stylised image.

        ``style_image`` is ``(B, 3, L, L)`` in [0, 1]; ``content_map`` is an
        optional binary ``(B, 1, L, L)`` map which requires an attached
        content-fusion encoder. Returns the final latent and decoded image.
        """
        prompts = [prompt] if isinstance(prompt, str) else list(prompt)
        batch = len(prompts)
        text = self.encode_text(prompts)
        null_text = self.null_text(batch)
        needs_style = scale != 0 or content_map is not None
        if needs_style:
            if style_image is None:
                raise ValueError("a style reference is required when scale != 0 or content is given")
            style = self.encode_style(style_image)
            if style.shape[0] != batch:
                style = style.expand(batch, -1, -1)
            null_style = self.style_encoder.null_embedding(batch).to(self.dtype)
        else:
            style = null_style = None
        if content_map is not None:
            content_map = content_map.to(self.dtype)
            if content_map.shape[0] != batch:
                content_map = content_map.expand(batch, -1, -1, -1)

        def eps_fn(x, t):
            cond = self.predict_eps(x, t, text, style, scale, content_map)
            if guidance == 1:
                return cond
            uncond = self.predict_eps(x, t, null_text, null_style, scale, content_map)
            return cfg_predict(cond, uncond, guidance)

        d = self.cfg.denoiser
        shape = (batch, d.latent_channels, d.latent_size, d.latent_size)
        latent = sample(eps_fn, shape, self.schedule, steps, seed, sampler, dtype=self.dtype)
        return {"latent": latent, "image": self.codec.decode(latent)}
