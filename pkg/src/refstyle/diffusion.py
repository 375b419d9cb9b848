"""Noise schedule, epsilon-prediction loss, classifier-free guidance, samplers."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
import torch


@dataclass(frozen=True)
class NoiseSchedule:
    """Scaled-linear beta schedule with ``T`` steps.

    Arrays are indexed by ``t`` in ``0..T``; index 0 is the clean endpoint
    (``alpha_bar[0] == 1``), steps ``1..T`` are the noising steps.
    """

    betas: np.ndarray
    alphas_cumprod: np.ndarray

    @classmethod
    def scaled_linear(cls, steps: int = 1000, beta_start: float = 0.00085, beta_end: float = 0.012):
        betas = np.linspace(beta_start**0.5, beta_end**0.5, steps, dtype=np.float64) ** 2
        ac = np.concatenate([[1.0], np.cumprod(1.0 - betas)])
        return cls(np.concatenate([[0.0], betas]), ac)

    @property
    def T(self) -> int:
        return len(self.betas) - 1

    @property
    def alphas(self) -> np.ndarray:
        return 1.0 - self.betas

    def alpha_bar(self, t) -> torch.Tensor:
        t = torch.as_tensor(t)
        return torch.as_tensor(self.alphas_cumprod, dtype=torch.float64)[t.long()]

    def check_t(self, t, lo: int = 0) -> None:
        t = torch.as_tensor(t)
        if (t < lo).any() or (t > self.T).any():
            raise ValueError(f"timestep out of range [{lo}, {self.T}]: {t.tolist()}")


def _bcast(v: torch.Tensor, like: torch.Tensor) -> torch.Tensor:
    v = v.to(like.dtype)
    return v.reshape(v.shape + (1,) * (like.ndim - v.ndim))


def forward_noise(x0: torch.Tensor, t, eps: torch.Tensor, schedule: NoiseSchedule) -> torch.Tensor:
    """x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps."""
    schedule.check_t(t)
    ab = schedule.alpha_bar(t)
    if ab.ndim == 0:
        ab = ab.expand(x0.shape[0])
    return _bcast(ab.sqrt(), x0) * x0 + _bcast((1 - ab).sqrt(), x0) * eps


def denoise_loss(
    predict: Callable,
    x0: torch.Tensor,
    t,
    eps: torch.Tensor,
    cond,
    schedule: NoiseSchedule,
    reduction: str = "mean",
    step: int | None = None,
) -> torch.Tensor:
    """Squared error between the true noise and ``predict(x_t, t, cond)``.

    ``reduction="sum"`` gives the plain squared norm; ``"mean"`` divides by the
    element count (the usual training objective).
    """
    t = torch.as_tensor(t)
    if t.ndim == 0:
        t = t.expand(x0.shape[0])
    x_t = forward_noise(x0, t, eps, schedule)
    err = (eps - predict(x_t, t, cond)) ** 2
    loss = err.sum() if reduction == "sum" else err.mean()
    if not torch.isfinite(loss):
        where = f" at step {step}" if step is not None else ""
        raise FloatingPointError(f"non-finite loss{where} (t={t.tolist()})")
    return loss


def cfg_predict(eps_cond: torch.Tensor, eps_uncond: torch.Tensor, scale: float) -> torch.Tensor:
    if scale < 0:
        raise ValueError(f"guidance scale must be >= 0, got {scale}")
    if scale == 1:
        return eps_cond
    if scale == 0:
        return eps_uncond
    return eps_uncond + scale * (eps_cond - eps_uncond)


def timestep_pairs(schedule: NoiseSchedule, steps: int) -> list[tuple[int, int]]:
    """Descending ``(t, t_prev)`` pairs from ``T`` down to the clean endpoint 0."""
    if steps < 1:
        raise ValueError("steps must be >= 1")
    ts = np.round(np.linspace(schedule.T, 0, steps + 1)).astype(int)
    return list(zip(ts[:-1].tolist(), ts[1:].tolist()))


def ddim_step(x: torch.Tensor, eps: torch.Tensor, t: int, t_prev: int, schedule: NoiseSchedule) -> torch.Tensor:
    ab_t = float(schedule.alphas_cumprod[t])
    ab_prev = float(schedule.alphas_cumprod[t_prev])
    x0 = (x - (1 - ab_t) ** 0.5 * eps) / ab_t**0.5
    return ab_prev**0.5 * x0 + (1 - ab_prev) ** 0.5 * eps


# Adams-Bashforth weights used by the pseudo linear multistep (PLMS) sampler.
_PLMS_WEIGHTS = {
    1: (1.0,),
    2: (3 / 2, -1 / 2),
    3: (23 / 12, -16 / 12, 5 / 12),
    4: (55 / 24, -59 / 24, 37 / 24, -9 / 24),
}


def sample(
    eps_fn: Callable[[torch.Tensor, int], torch.Tensor],
    shape: tuple[int, ...],
    schedule: NoiseSchedule,
    steps: int = 50,
    seed: int = 0,
    sampler: str = "ddim",
    dtype: torch.dtype = torch.float32,
) -> torch.Tensor:
    """Run a deterministic sampler from seeded Gaussian noise.

    ``eps_fn(x, t)`` returns the (already guided) noise prediction. ``"ddim"``
    is the deterministic DDIM update; ``"plms"`` combines the last up-to-four
    noise predictions with linear multistep weights before the same update.
    """
    if sampler not in ("ddim", "plms"):
        raise ValueError(f"unknown sampler {sampler!r}")
    gen = torch.Generator().manual_seed(seed)
    x = torch.randn(shape, generator=gen, dtype=dtype)
    history: list[torch.Tensor] = []
    for k, (t, t_prev) in enumerate(timestep_pairs(schedule, steps)):
        eps = eps_fn(x, t)
        if sampler == "plms":
            history = ([eps] + history)[:4]
            eps = sum(w * e for w, e in zip(_PLMS_WEIGHTS[len(history)], history))
        x = ddim_step(x, eps, t, t_prev, schedule)
        if not torch.isfinite(x).all():
            raise FloatingPointError(f"non-finite latent at sampler step {k} (t={t})")
    return x
