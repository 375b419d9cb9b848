"""Model and run configuration.

Two profiles ship with the package:

* ``desk``: 64x64 images, a 16x16x4 latent and a small U-Net; everything
  trains and samples on one CPU.
* ``tiny``: an even smaller float64-friendly variant used for gradient checks.

The ``pretrained`` profile describes the intended large-scale setup (SD v1.5
denoiser, ViT-H/14 initialised transformer blocks, VAE). It is documentation
plus a loud failure: the weights are not bundled and no loader is wired up.
"""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

# Inference defaults used throughout (sampler steps, CFG scale, style weight).
DEFAULT_STEPS = 50
DEFAULT_GUIDANCE = 7.5
DEFAULT_STYLE_SCALE = 1.0


class BackendUnavailable(RuntimeError):
    """A pretrained backend was requested but is not available locally."""


@dataclass
class StyleEncoderConfig:
    n_style_tokens: int = 4
    width: int = 64  # d: patch-embedding / transformer width
    out_width: int = 64  # d_out: must equal the denoiser's cross-attention context width
    expert_channels: int = 32
    # ResBlock depths for the large / medium / small patch experts.
    expert_depths: tuple[int, int, int] = (6, 5, 4)
    transformer_depth: int = 2
    transformer_heads: int = 4
    mlp_ratio: float = 4.0
    proj_hidden: int = 128


@dataclass
class DenoiserConfig:
    latent_channels: int = 4
    latent_size: int = 16
    widths: tuple[int, ...] = (32, 64)  # one entry per down layer; L = len(widths)
    text_width: int = 64  # d_text, also the width of style tokens fed to the adapter
    attn_width: int = 64  # d_attn
    attn_heads: int = 8
    time_width: int = 64
    groups: int = 8

    @property
    def n_layers(self) -> int:
        return len(self.widths)


@dataclass
class TextEncoderConfig:
    vocab_size: int = 4096
    n_tokens: int = 8
    width: int = 64
    seed: int = 1234


@dataclass
class ModelConfig:
    profile: str = "desk"
    image_size: int = 64
    denoiser: DenoiserConfig = field(default_factory=DenoiserConfig)
    style: StyleEncoderConfig = field(default_factory=StyleEncoderConfig)
    text: TextEncoderConfig = field(default_factory=TextEncoderConfig)
    schedule_steps: int = 1000
    beta_start: float = 0.00085
    beta_end: float = 0.012

    def validate(self) -> None:
        if self.image_size % 16:
            raise ValueError(f"image_size must be divisible by 16, got {self.image_size}")
        factor = self.image_size // self.denoiser.latent_size
        if factor * self.denoiser.latent_size != self.image_size or factor & (factor - 1):
            raise ValueError("image_size / latent_size must be a power of two")
        if self.style.out_width != self.denoiser.text_width:
            raise ValueError(
                "style out_width must match the denoiser cross-attention width "
                f"({self.style.out_width} != {self.denoiser.text_width})"
            )
        if self.text.width != self.denoiser.text_width:
            raise ValueError("text encoder width must match denoiser text_width")
        size = self.denoiser.latent_size
        for _ in range(self.denoiser.n_layers - 1):
            if size % 2:
                raise ValueError("latent_size too small for the number of down layers")
            size //= 2

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "ModelConfig":
        data = dict(data)
        den = dict(data.pop("denoiser", {}))
        if "widths" in den:
            den["widths"] = tuple(den["widths"])
        sty = dict(data.pop("style", {}))
        if "expert_depths" in sty:
            sty["expert_depths"] = tuple(sty["expert_depths"])
        txt = data.pop("text", {})
        return cls(
            denoiser=DenoiserConfig(**den),
            style=StyleEncoderConfig(**sty),
            text=TextEncoderConfig(**txt),
            **data,
        )

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True))

    @classmethod
    def load(cls, path: str | Path) -> "ModelConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))


def desk_profile() -> ModelConfig:
    return ModelConfig()


def tiny_profile() -> ModelConfig:
    """Two down layers, 8x8 latent, narrow everything. Used for gradient checks."""
    return ModelConfig(
        profile="tiny",
        image_size=32,
        denoiser=DenoiserConfig(
            latent_size=8, widths=(8, 16), text_width=16, attn_width=16, time_width=16, groups=4
        ),
        style=StyleEncoderConfig(
            n_style_tokens=4,
            width=16,
            out_width=16,
            expert_channels=8,
            transformer_depth=1,
            transformer_heads=2,
            proj_hidden=32,
        ),
        text=TextEncoderConfig(vocab_size=256, n_tokens=4, width=16),
        schedule_steps=100,
    )


# Documented for reference; not constructible without external weights.
PRETRAINED_PROFILE = {
    "image_size": 512,
    "latent": "4x64x64 via the SD v1.5 VAE",
    "denoiser": "SD v1.5 U-Net, cross-attention width 768",
    "style_transformer_init": "OpenCLIP ViT-H/14 transformer blocks",
    "expert_depths": (6, 5, 4),
    "sampler": "pndm",
}


def get_profile(name: str) -> ModelConfig:
    if name == "desk":
        return desk_profile()
    if name == "tiny":
        return tiny_profile()
    if name == "pretrained":
        raise BackendUnavailable(
            "the pretrained profile needs SD v1.5 / ViT-H/14 weights which are not bundled; "
            "use --profile desk"
        )
    raise ValueError(f"unknown profile {name!r}")
