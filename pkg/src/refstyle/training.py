"""Two-stage training: style path first, then the content-fusion encoder."""
from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch
from PIL import Image

from . import checkpoint as ckpt
from .config import ModelConfig, desk_profile
from .content import content_map
from .diffusion import denoise_loss
from .pipeline import StylePipeline, from_uint8

log = logging.getLogger(__name__)

FULL_STEPS = {1: 300_000, 2: 60_000}


@dataclass
class TrainingConfig:
    stage: int = 1
    steps: Optional[int] = None  # None -> FULL_STEPS[stage]
    lr: float = 1e-4
    adapter_lr: Optional[float] = None  # None -> lr
    weight_decay: float = 0.01
    batch_size: int = 16
    p_joint_drop: float = 0.05
    p_image_drop: float = 0.25
    dropout_mode: str = "independent"  # or "exclusive"
    seed: int = 0
    log_every: int = 10
    checkpoint_every: int = 0

    def __post_init__(self):
        if self.stage not in (1, 2):
            raise ValueError(f"stage must be 1 or 2, got {self.stage}")
        for name in ("p_joint_drop", "p_image_drop"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"{name} must be in [0, 1], got {p}")
        if self.dropout_mode not in ("independent", "exclusive"):
            raise ValueError(f"unknown dropout_mode {self.dropout_mode!r}")
        if self.dropout_mode == "exclusive" and self.p_joint_drop + self.p_image_drop > 1:
            raise ValueError("exclusive dropout needs p_joint_drop + p_image_drop <= 1")

    @property
    def total_steps(self) -> int:
        return self.steps if self.steps is not None else FULL_STEPS[self.stage]

    @classmethod
    def load(cls, path) -> "TrainingConfig":
        return cls(**json.loads(Path(path).read_text()))


def desk_training_config(stage: int = 1, **overrides) -> TrainingConfig:
    """Desk-scale overrides: a few hundred steps, small batches, faster adapter lr."""
    base = dict(stage=stage, steps=500, lr=1e-4, adapter_lr=1e-2, batch_size=8)
    base.update(overrides)
    return TrainingConfig(**base)


# -- preprocessing -----------------------------------------------------------

def preprocess(image, size: int = 512) -> tuple[np.ndarray, np.ndarray]:
    """Resize the shortest side to ``size`` and centre-crop to a square.

    Returns ``(target, reference)``; both are the same ``size x size x 3``
    uint8 array since one image serves as denoising target and style reference.
    """
    if not isinstance(image, Image.Image):
        image = Image.fromarray(np.asarray(image))
    image = image.convert("RGB")
    w, h = image.size
    if (w, h) != (size, size):
        scale = size / min(w, h)
        nw, nh = max(size, round(w * scale)), max(size, round(h * scale))
        image = image.resize((nw, nh), Image.BICUBIC)
        left, top = (nw - size) // 2, (nh - size) // 2
        image = image.crop((left, top, left + size, top + size))
    arr = np.asarray(image, dtype=np.uint8)
    return arr, arr


@dataclass
class Example:
    image: np.ndarray  # size x size x 3 uint8
    caption: str
    content: Optional[np.ndarray] = None  # binary content map, filled lazily


def load_examples(items: Sequence, size: int) -> list[Example]:
    """Build examples from ``(image_or_path, caption)`` pairs; unreadable images are skipped."""
    out = []
    for src, caption in items:
        try:
            img = Image.open(src) if isinstance(src, (str, Path)) else src
            target, _ = preprocess(img, size)
        except (OSError, ValueError) as err:
            log.warning("skipping unreadable image %s: %s", src, err)
            continue
        out.append(Example(target, caption))
    return out


# -- conditioning dropout ----------------------------------------------------

def draw_dropout(rng: np.random.Generator, n: int, p_joint: float, p_image: float, mode: str = "independent"):
    """Boolean masks ``(drop_text, drop_style)`` for ``n`` samples.

    ``independent``: a joint drop with ``p_joint``; otherwise the style alone
    with ``p_image``. ``exclusive``: one uniform draw split into the two events.
    """
    u = rng.random(n)
    joint = u < p_joint
    if mode == "independent":
        image_only = ~joint & (rng.random(n) < p_image)
    else:
        image_only = (u >= p_joint) & (u < p_joint + p_image)
    return joint, joint | image_only


def dropout_conditions(text, style, rng, null_text, null_style, p_joint=0.05, p_image=0.25, mode="independent"):
    """Replace dropped text/style rows with the null embeddings."""
    drop_text, drop_style = draw_dropout(rng, text.shape[0], p_joint, p_image, mode)
    dt = torch.from_numpy(drop_text)[:, None, None]
    ds = torch.from_numpy(drop_style)[:, None, None]
    return torch.where(dt, null_text, text), torch.where(ds, null_style.to(style.dtype), style), (drop_text, drop_style)


# -- parameter audits --------------------------------------------------------

def tensor_hash(t: torch.Tensor) -> str:
    return hashlib.sha256(t.detach().cpu().contiguous().numpy().tobytes()).hexdigest()


def group_hashes(groups: dict[str, Sequence[torch.Tensor]]) -> dict[str, str]:
    out = {}
    for name, tensors in groups.items():
        h = hashlib.sha256()
        for t in tensors:
            h.update(tensor_hash(t).encode())
        out[name] = h.hexdigest()
    return out


class StageTrainer:
    """Owns the optimizer for one stage and enforces the freezing contract."""

    def __init__(self, pipe: StylePipeline, config: TrainingConfig, examples: Sequence[Example], log_path=None):
        if not examples:
            raise ValueError("no training examples")
        self.pipe = pipe
        self.config = config
        self.examples = list(examples)
        self.rng = np.random.default_rng(config.seed)
        self.gen = torch.Generator().manual_seed(config.seed)
        self.step_idx = 0
        self.losses: list[float] = []
        self.log_path = Path(log_path) if log_path else None
        if config.stage == 2:
            if pipe.content_encoder is None:
                raise ValueError("stage 2 needs a pipeline with a content-fusion encoder attached")
            self._prepare_content()
        for p in pipe.parameters():
            p.requires_grad_(False)
            p.grad = None  # stale gradients from an earlier stage
        trainable = self.trainable_groups()
        for params in trainable.values():
            for p in params:
                p.requires_grad_(True)
        lr_groups = []
        for name, params in trainable.items():
            lr = config.adapter_lr if (name == "adapter" and config.adapter_lr) else config.lr
            lr_groups.append({"params": list(params), "lr": lr})
        self.opt = torch.optim.AdamW(lr_groups, lr=config.lr, weight_decay=config.weight_decay)
        images = torch.cat([from_uint8(e.image) for e in self.examples]).to(pipe.dtype)
        self.images = images
        self.latents = pipe.codec.encode(images)
        self.text = pipe.encode_text([e.caption for e in self.examples])

    def _prepare_content(self) -> None:
        for e in self.examples:
            if e.content is None:
                e.content = content_map(e.image).mask

    def trainable_groups(self) -> dict[str, list[torch.nn.Parameter]]:
        pipe = self.pipe
        if self.config.stage == 1:
            enc = [p for n, p in pipe.style_encoder.named_parameters() if n != "null_style"]
            return {
                "style_encoder": enc,
                "adapter": pipe.unet.adapter_parameters(),
                "null_style": [pipe.style_encoder.null_style],
            }
        return {"content_fusion": list(pipe.content_encoder.parameters())}

    def frozen_groups(self) -> dict[str, list[torch.Tensor]]:
        pipe = self.pipe
        trainable = {id(p) for ps in self.trainable_groups().values() for p in ps}
        groups = {
            "base_denoiser": [p for p in pipe.unet.parameters() if id(p) not in trainable],
            "text_encoder": list(pipe.text_encoder.buffers()),
        }
        if self.config.stage == 2:
            groups["style_encoder"] = list(pipe.style_encoder.parameters())
            groups["adapter"] = pipe.unet.adapter_parameters()
        return groups

    def _check_frozen(self) -> None:
        for name, tensors in self.frozen_groups().items():
            for t in tensors:
                if getattr(t, "grad", None) is not None:
                    raise RuntimeError(f"gradient reached frozen parameter group {name!r}")

    def step(self) -> float:
        cfg, pipe = self.config, self.pipe
        n = len(self.examples)
        idx = torch.from_numpy(self.rng.integers(0, n, cfg.batch_size))
        x0 = self.latents[idx]
        t = torch.randint(1, pipe.schedule.T + 1, (cfg.batch_size,), generator=self.gen)
        eps = torch.randn(x0.shape, generator=self.gen, dtype=x0.dtype)
        if cfg.stage == 1:
            style = pipe.encode_style(self.images[idx])
        else:
            with torch.no_grad():
                style = pipe.encode_style(self.images[idx])
        null_text = pipe.null_text(cfg.batch_size)
        null_style = pipe.style_encoder.null_embedding(cfg.batch_size)
        text, style, _ = dropout_conditions(
            self.text[idx], style, self.rng, null_text, null_style,
            cfg.p_joint_drop, cfg.p_image_drop, cfg.dropout_mode,
        )
        content = None
        if cfg.stage == 2:
            content = torch.stack([torch.from_numpy(self.examples[i].content) for i in idx.tolist()])[:, None]

        def predict(x_t, tt, _cond):
            return pipe.predict_eps(x_t, tt, text, style, 1.0, content)

        loss = denoise_loss(predict, x0, t, eps, None, pipe.schedule, step=self.step_idx)
        self.opt.zero_grad(set_to_none=True)
        loss.backward()
        self._check_frozen()
        self.opt.step()
        value = float(loss.detach())
        self.losses.append(value)
        self.step_idx += 1
        if self.log_path and (self.step_idx % cfg.log_every == 0 or self.step_idx == 1):
            with open(self.log_path, "a") as fh:
                fh.write(json.dumps({"stage": cfg.stage, "step": self.step_idx, "loss": value}) + "\n")
        return value

    def train(self, steps: Optional[int] = None, out_dir=None) -> list[float]:
        steps = self.config.total_steps if steps is None else steps
        for _ in range(steps):
            self.step()
            every = self.config.checkpoint_every
            if out_dir is not None and every and self.step_idx % every == 0:
                self.save(out_dir)
        return self.losses

    def save(self, out_dir) -> dict:
        parts = ("base", "style_encoder", "adapter") if self.config.stage == 1 else ("content_fusion",)
        meta = {"stage": self.config.stage, "step": self.step_idx, "training": asdict(self.config)}
        return ckpt.save_pipeline(self.pipe, out_dir, parts, meta)


def smoothed(losses: Sequence[float], window: int = 25) -> np.ndarray:
    """Trailing moving average (valid windows only)."""
    arr = np.asarray(losses, dtype=np.float64)
    if len(arr) < window:
        return np.array([arr.mean()]) if len(arr) else arr
    c = np.cumsum(np.concatenate([[0.0], arr]))
    return (c[window:] - c[:-window]) / window


def run_stage(
    config: TrainingConfig,
    dataset: Sequence,
    out_dir,
    checkpoints: Optional[dict] = None,
    model_config: Optional[ModelConfig] = None,
    log_path=None,
) -> Path:
    """Train one stage and write its checkpoint parts into ``out_dir``.

    Stage 1 starts from ``checkpoints["base"]`` (a directory with ``base.pt``)
    when given, otherwise from a seeded random denoiser. Stage 2 refuses to run
    without ``checkpoints["stage1"]``.
    """
    checkpoints = checkpoints or {}
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if config.stage == 1:
        if checkpoints.get("base"):
            base = ckpt.load_pipeline(checkpoints["base"])
            cfg = base.cfg
            pipe = StylePipeline(cfg, seed=config.seed)
            pipe.unet.load_state_dict(ckpt.base_state(base.unet), strict=False)
        else:
            cfg = model_config or desk_profile()
            pipe = StylePipeline(cfg, seed=config.seed)
    else:
        stage1 = checkpoints.get("stage1")
        if not stage1 or not ckpt.has_part(stage1, "adapter") or not ckpt.has_part(stage1, "style_encoder"):
            raise FileNotFoundError("stage 2 requires a stage-1 checkpoint directory (style_encoder.pt + adapter.pt)")
        pipe = ckpt.load_pipeline(stage1)
        pipe.attach_content_encoder(seed=config.seed)
        if Path(stage1).resolve() != out_dir.resolve():
            ckpt.save_pipeline(pipe, out_dir, ("base", "style_encoder", "adapter"))
    examples = dataset if dataset and isinstance(dataset[0], Example) else load_examples(dataset, pipe.cfg.image_size)
    trainer = StageTrainer(pipe, config, examples, log_path)
    trainer.train(out_dir=out_dir)
    trainer.save(out_dir)
    return out_dir
