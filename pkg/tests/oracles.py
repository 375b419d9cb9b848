"""Independent reference implementations used by the tests.

Everything here is written with plain Python loops / numpy so it shares no
code path with the package under test.
"""
from __future__ import annotations

import math

import numpy as np
import torch


def _np(a) -> np.ndarray:
    if isinstance(a, torch.Tensor):
        a = a.detach().cpu().numpy()
    return np.asarray(a, dtype=np.float64)


def scalar_attention(f, ctx, wq, wk, wv, heads=1):
    """softmax(QK^T/sqrt(d))V with explicit loops over tokens and features."""
    f, ctx, wq, wk, wv = (_np(a) for a in (f, ctx, wq, wk, wv))
    n, m = f.shape[0], ctx.shape[0]
    d_attn, d_v = wq.shape[1], wv.shape[1]

    def proj(x, w):
        out = [[0.0] * w.shape[1] for _ in range(x.shape[0])]
        for i in range(x.shape[0]):
            for j in range(w.shape[1]):
                s = 0.0
                for k in range(x.shape[1]):
                    s += x[i, k] * w[k, j]
                out[i][j] = s
        return out

    q, k, v = proj(f, wq), proj(ctx, wk), proj(ctx, wv)
    dh, dvh = d_attn // heads, d_v // heads
    out = [[0.0] * d_v for _ in range(n)]
    for h in range(heads):
        for i in range(n):
            scores = []
            for j in range(m):
                s = 0.0
                for c in range(h * dh, (h + 1) * dh):
                    s += q[i][c] * k[j][c]
                scores.append(s / math.sqrt(dh))
            top = max(scores)
            ex = [math.exp(s - top) for s in scores]
            z = sum(ex)
            for c in range(h * dvh, (h + 1) * dvh):
                out[i][c] = sum(ex[j] / z * v[j][c] for j in range(m))
    return np.array(out)


def brute_dilate(mask: np.ndarray, radius: int, iterations: int) -> np.ndarray:
    """Square dilation by explicit neighbourhood scan; outside the image counts as off."""
    cur = np.asarray(mask, dtype=bool)
    h, w = cur.shape
    for _ in range(iterations):
        nxt = np.zeros_like(cur)
        for y in range(h):
            for x in range(w):
                hit = False
                for dy in range(-radius, radius + 1):
                    for dx in range(-radius, radius + 1):
                        yy, xx = y + dy, x + dx
                        if 0 <= yy < h and 0 <= xx < w and cur[yy, xx]:
                            hit = True
                nxt[y, x] = hit
        cur = nxt
    return cur


def central_difference(loss_fn, param: torch.Tensor, eps: float = 1e-6, max_entries: int = 12, seed: int = 0):
    """Numerical gradient of ``loss_fn()`` w.r.t. a random subset of ``param`` entries.

    Returns ``(flat_indices, numeric_grads)``.
    """
    flat = param.data.view(-1)
    rng = np.random.default_rng(seed)
    idx = rng.choice(flat.numel(), size=min(max_entries, flat.numel()), replace=False)
    grads = []
    for i in idx:
        old = flat[i].item()
        flat[i] = old + eps
        plus = float(loss_fn())
        flat[i] = old - eps
        minus = float(loss_fn())
        flat[i] = old
        grads.append((plus - minus) / (2 * eps))
    return idx, np.array(grads)


def grad_rel_error(loss_fn, param: torch.Tensor, **kw) -> float:
    """max |analytic - numeric| / max(|numeric|) over sampled entries."""
    param.grad = None
    loss = loss_fn()
    (g,) = torch.autograd.grad(loss, [param])
    with torch.no_grad():
        idx, num = central_difference(loss_fn, param, **kw)
    ana = g.reshape(-1)[torch.as_tensor(idx)].numpy()
    scale = max(np.abs(num).max(), np.abs(ana).max(), 1e-12)
    return float(np.abs(ana - num).max() / scale)


def alphas_cumprod_loop(beta_start: float, beta_end: float, steps: int) -> list[float]:
    """abar_t for t = 0..T by a running product (abar_0 = 1)."""
    out = [1.0]
    lo, hi = math.sqrt(beta_start), math.sqrt(beta_end)
    for i in range(steps):
        b = (lo + (hi - lo) * i / (steps - 1)) ** 2
        out.append(out[-1] * (1.0 - b))
    return out
