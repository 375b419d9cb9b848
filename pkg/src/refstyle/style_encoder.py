"""Style-aware encoder: multi-scale patch experts + position-free transformer."""
from __future__ import annotations

import math

import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import StyleEncoderConfig
from .patches import SCALES, partition_batch


def _groups(channels: int) -> int:
    for g in (8, 4, 2, 1):
        if channels % g == 0:
            return g
    return 1


class ResBlock(nn.Module):
    """conv3x3 -> GroupNorm -> SiLU -> conv3x3, plus identity skip."""

    def __init__(self, channels: int):
        super().__init__()
        self.conv1 = nn.Conv2d(channels, channels, 3, padding=1)
        self.norm = nn.GroupNorm(_groups(channels), channels)
        self.conv2 = nn.Conv2d(channels, channels, 3, padding=1)

    def forward(self, x):
        return x + self.conv2(F.silu(self.norm(self.conv1(x))))


class PatchExpert(nn.Module):
    """Stack of ``depth`` ResBlocks mapping one patch to one token.

    A 2x average-pool follows every block while the feature map is larger than
    1x1, then the map is mean-pooled and linearly projected to ``width``. With
    depths 6/5/4 and 512px references, all three experts reach 2x2 before the
    final pool.
    """

    def __init__(self, in_channels: int, channels: int, depth: int, width: int):
        super().__init__()
        self.depth = depth
        self.stem = nn.Conv2d(in_channels, channels, 3, padding=1)
        self.blocks = nn.ModuleList(ResBlock(channels) for _ in range(depth))
        self.head = nn.Linear(channels, width)

    def forward(self, x):
        h = self.stem(x)
        for block in self.blocks:
            h = block(h)
            if h.shape[-1] > 1:
                h = F.avg_pool2d(h, 2)
        return self.head(h.mean(dim=(-2, -1)))


class SelfAttention(nn.Module):
    def __init__(self, width: int, heads: int):
        super().__init__()
        if width % heads:
            raise ValueError(f"width {width} not divisible by heads {heads}")
        self.heads = heads
        self.qkv = nn.Linear(width, 3 * width)
        self.out = nn.Linear(width, width)

    def forward(self, x):
        b, n, d = x.shape
        q, k, v = self.qkv(x).reshape(b, n, 3, self.heads, d // self.heads).permute(2, 0, 3, 1, 4)
        w = torch.softmax(q @ k.transpose(-1, -2) / math.sqrt(d // self.heads), dim=-1)
        return self.out((w @ v).transpose(1, 2).reshape(b, n, d))


class TransformerBlock(nn.Module):
    """Pre-norm attention + MLP block. Full bidirectional attention, no masking."""

    def __init__(self, width: int, heads: int, mlp_ratio: float = 4.0):
        super().__init__()
        hidden = int(width * mlp_ratio)
        self.ln1 = nn.LayerNorm(width)
        self.attn = SelfAttention(width, heads)
        self.ln2 = nn.LayerNorm(width)
        self.fc1 = nn.Linear(width, hidden)
        self.fc2 = nn.Linear(hidden, width)

    def forward(self, x):
        x = x + self.attn(self.ln1(x))
        return x + self.fc2(F.gelu(self.fc1(self.ln2(x))))

    def identity_init(self) -> None:
        for lin in (self.attn.out, self.fc2):
            nn.init.zeros_(lin.weight)
            nn.init.zeros_(lin.bias)


class StyleEncoder(nn.Module):
    """Reference image -> ``n_style_tokens`` style embeddings.

    Holds the three patch experts, the learnable style tokens, the transformer
    blocks, the output MLP and the learned null style embedding used for
    classifier-free guidance. There is deliberately no positional embedding.
    """

    def __init__(self, cfg: StyleEncoderConfig, in_channels: int = 3):
        super().__init__()
        self.cfg = cfg
        self.experts = nn.ModuleDict(
            {
                name: PatchExpert(in_channels, cfg.expert_channels, depth, cfg.width)
                for name, depth in zip(SCALES, cfg.expert_depths)
            }
        )
        self.style_tokens = nn.Parameter(torch.randn(cfg.n_style_tokens, cfg.width) * 0.02)
        self.blocks = nn.ModuleList(
            TransformerBlock(cfg.width, cfg.transformer_heads, cfg.mlp_ratio)
            for _ in range(cfg.transformer_depth)
        )
        self.ln_post = nn.LayerNorm(cfg.width)
        self.proj = nn.Sequential(
            nn.Linear(cfg.width, cfg.proj_hidden), nn.GELU(), nn.Linear(cfg.proj_hidden, cfg.out_width)
        )
        self.null_style = nn.Parameter(torch.zeros(cfg.n_style_tokens, cfg.out_width))

    @property
    def n_tokens(self) -> int:
        return self.cfg.n_style_tokens

    def embed_patches(self, images: torch.Tensor) -> torch.Tensor:
        """``(B, C, L, L)`` images -> ``(B, 56, width)`` patch embeddings.

        Row order is 8 large, 16 medium, 32 small, each produced by the expert
        of its own scale.
        """
        tiles = partition_batch(images)
        rows = []
        for name in SCALES:
            t = tiles[name]
            b, n = t.shape[:2]
            emb = self.experts[name](t.flatten(0, 1))
            if emb.shape[-1] != self.cfg.width:
                raise ValueError(f"{name} expert emits width {emb.shape[-1]}, expected {self.cfg.width}")
            rows.append(emb.reshape(b, n, -1))
        return torch.cat(rows, dim=1)

    def encode_style(self, patch_embeddings: torch.Tensor) -> torch.Tensor:
        """Run ``[style_tokens; f_p]`` through the blocks and read the style rows."""
        fp = patch_embeddings
        if fp.ndim == 2:
            fp = fp.unsqueeze(0)
        if fp.shape[-1] != self.cfg.width:
            raise ValueError(f"patch embedding width {fp.shape[-1]} != encoder width {self.cfg.width}")
        tokens = self.style_tokens.unsqueeze(0).expand(fp.shape[0], -1, -1).to(fp.dtype)
        x = torch.cat([tokens, fp], dim=1)
        for i, block in enumerate(self.blocks):
            x = block(x)
            if not torch.isfinite(x).all():
                raise FloatingPointError(f"non-finite activations after transformer block {i}")
        x = self.ln_post(x[:, : self.n_tokens])
        out = self.proj(x)
        return out if patch_embeddings.ndim == 3 else out[0]

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        return self.encode_style(self.embed_patches(images))

    def null_embedding(self, batch: int) -> torch.Tensor:
        return self.null_style.unsqueeze(0).expand(batch, -1, -1)

    def identity_init_blocks(self) -> None:
        for block in self.blocks:
            block.identity_init()

