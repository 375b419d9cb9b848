"""Reference-image style transfer on a toy latent diffusion model."""

__version__ = "0.1.0"

from .config import ModelConfig, desk_profile, get_profile, tiny_profile  # noqa: E402
from .patches import PatchSet, partition  # noqa: E402
from .pipeline import StylePipeline  # noqa: E402

__all__ = ["ModelConfig", "PatchSet", "StylePipeline", "desk_profile", "get_profile", "partition", "tiny_profile"]
