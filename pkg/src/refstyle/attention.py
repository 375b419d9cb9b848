"""Cross-attention with a parallel style branch.

Matrices follow the row-vector convention: ``Q = f @ W_Q`` with ``W_Q`` of
shape ``(d_latent, d_attn)``.
"""
from __future__ import annotations

import math
from typing import Optional

import torch
import torch.nn as nn


def _check_width(x: torch.Tensor, w: torch.Tensor, what: str) -> None:
    if x.shape[-1] != w.shape[0]:
        raise ValueError(f"{what}: input width {x.shape[-1]} does not match weight rows {w.shape[0]}")


def cross_attention(
    f: torch.Tensor,
    context: torch.Tensor,
    w_q: torch.Tensor,
    w_k: torch.Tensor,
    w_v: torch.Tensor,
    heads: int = 1,
) -> torch.Tensor:
    """softmax(Q K^T / sqrt(d)) V with Q from ``f`` and K, V from ``context``.

    ``d`` is the per-head width; with ``heads=1`` it is the full ``d_attn``.
    """
    _check_width(f, w_q, "query")
    _check_width(context, w_k, "key")
    _check_width(context, w_v, "value")
    if w_q.shape[1] != w_k.shape[1]:
        raise ValueError(f"query/key projection widths differ: {w_q.shape[1]} vs {w_k.shape[1]}")
    return attend(f @ w_q, context @ w_k, context @ w_v, heads)


def attend(q: torch.Tensor, k: torch.Tensor, v: torch.Tensor, heads: int = 1) -> torch.Tensor:
    if heads == 1:
        scores = q @ k.transpose(-1, -2) / math.sqrt(q.shape[-1])
        return torch.softmax(scores, dim=-1) @ v
    if q.shape[-1] % heads or v.shape[-1] % heads:
        raise ValueError(f"attention width not divisible by {heads} heads")

    def split(x):
        return x.unflatten(-1, (heads, -1)).transpose(-2, -3)

    qh, kh, vh = split(q), split(k), split(v)
    scores = qh @ kh.transpose(-1, -2) / math.sqrt(qh.shape[-1])
    out = torch.softmax(scores, dim=-1) @ vh
    return out.transpose(-2, -3).flatten(-2)


def blended_attention(
    f: torch.Tensor,
    text: torch.Tensor,
    style: Optional[torch.Tensor],
    scale: float,
    w_q: torch.Tensor,
    w_kt: torch.Tensor,
    w_vt: torch.Tensor,
    w_ks: Optional[torch.Tensor] = None,
    w_vs: Optional[torch.Tensor] = None,
    heads: int = 1,
) -> torch.Tensor:
    """Text attention plus ``scale`` times style attention, sharing the query.

    At ``scale == 0`` the style branch is skipped entirely so the result is
    bit-identical to plain text cross-attention.
    """
    if not math.isfinite(scale):
        raise ValueError(f"style scale must be finite, got {scale}")
    out = cross_attention(f, text, w_q, w_kt, w_vt, heads)
    if scale == 0:
        return out
    if style is None or w_ks is None or w_vs is None:
        raise ValueError(f"style scale is {scale} but no style branch/embedding was provided")
    return out + scale * cross_attention(f, style, w_q, w_ks, w_vs, heads)


class ParallelCrossAttention(nn.Module):
    """Multi-head cross-attention site with an optional style branch.

    ``to_k_style`` / ``to_v_style`` exist only after :meth:`add_style_branch`.
    The style value projection starts at zero so installing the branch does
    not change the base model's output.
    """

    def __init__(self, query_dim: int, context_dim: int, inner_dim: int, heads: int = 1):
        super().__init__()
        self.heads = heads
        self.to_q = nn.Linear(query_dim, inner_dim, bias=False)
        self.to_k = nn.Linear(context_dim, inner_dim, bias=False)
        self.to_v = nn.Linear(context_dim, inner_dim, bias=False)
        self.to_out = nn.Linear(inner_dim, query_dim)
        self.to_k_style: Optional[nn.Linear] = None
        self.to_v_style: Optional[nn.Linear] = None

    @property
    def has_style_branch(self) -> bool:
        return self.to_k_style is not None

    def add_style_branch(self, style_dim: int) -> None:
        inner = self.to_q.out_features
        ref = self.to_q.weight
        self.to_k_style = nn.Linear(style_dim, inner, bias=False).to(ref)
        self.to_v_style = nn.Linear(style_dim, inner, bias=False).to(ref)
        nn.init.zeros_(self.to_v_style.weight)

    def remove_style_branch(self) -> None:
        self.to_k_style = None
        self.to_v_style = None

    def forward(
        self,
        x: torch.Tensor,
        context: torch.Tensor,
        style: Optional[torch.Tensor] = None,
        scale: float = 0.0,
    ) -> torch.Tensor:
        # nn.Linear stores (out, in); transpose to the (in, out) convention.
        w_ks = self.to_k_style.weight.T if self.to_k_style is not None else None
        w_vs = self.to_v_style.weight.T if self.to_v_style is not None else None
        h = blended_attention(
            x, context, style, scale,
            self.to_q.weight.T, self.to_k.weight.T, self.to_v.weight.T, w_ks, w_vs, self.heads,
        )
        return self.to_out(h)
