"""De-stylised content maps: edge detection, thresholding, square dilation."""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from scipy import ndimage

DEFAULT_THRESHOLD = 0.5
DEFAULT_RADIUS = 1
DEFAULT_ITERATIONS = 2

# Sobel response to a unit-contrast straight step; such an edge scores 1.
_SOBEL_STEP = 4.0


@dataclass
class ContentMap:
    mask: np.ndarray  # (H, W) uint8 in {0, 1}
    provenance: dict = field(default_factory=dict)

    def to_png_array(self) -> np.ndarray:
        return (self.mask * 255).astype(np.uint8)


def _to_float_rgb(image) -> np.ndarray:
    arr = np.asarray(image)
    if arr.dtype == np.uint8:
        arr = arr.astype(np.float64) / 255.0
    else:
        arr = arr.astype(np.float64)
    if arr.ndim == 2:
        arr = arr[..., None]
    if arr.ndim != 3:
        raise ValueError(f"expected HxW or HxWxC image, got shape {arr.shape}")
    return arr


def gradient_edges(image) -> np.ndarray:
    """Sobel magnitude of the luminance, scaled so a unit-contrast step scores 1 (clipped)."""
    rgb = _to_float_rgb(image)
    if rgb.shape[-1] >= 3:
        gray = rgb[..., :3] @ np.array([0.299, 0.587, 0.114])
    else:
        gray = rgb[..., 0]
    gx = ndimage.sobel(gray, axis=1, mode="nearest")
    gy = ndimage.sobel(gray, axis=0, mode="nearest")
    return np.clip(np.hypot(gx, gy) / _SOBEL_STEP, 0.0, 1.0)


class HEDBackend:
    """Holistically-nested edge detector loaded from a local weights file.

    The network is a VGG16 trunk with five side outputs fused by a 1x1
    convolution. Weights are not bundled.
    """

    def __init__(self, weights: Optional[str | Path] = None):
        if weights is None or not Path(weights).exists():
            raise FileNotFoundError(
                f"HED weights not found ({weights!r}); pass backend='gradient' "
                "(CLI: --backend gradient) to use the built-in fallback"
            )
        import torch

        self.net = build_hed()
        self.net.load_state_dict(torch.load(weights, map_location="cpu", weights_only=True))
        self.net.eval()

    def __call__(self, image) -> np.ndarray:
        import torch

        rgb = _to_float_rgb(image)[..., :3]
        x = torch.from_numpy(rgb * 255.0).float().permute(2, 0, 1)[None]
        with torch.no_grad():
            out = self.net(x)[0, 0].numpy()
        return np.clip(out, 0.0, 1.0)


def build_hed():
    import torch
    import torch.nn as nn
    import torch.nn.functional as F

    class HED(nn.Module):
        cfg = [(3, 64, 2), (64, 128, 2), (128, 256, 3), (256, 512, 3), (512, 512, 3)]

        def __init__(self):
            super().__init__()
            self.register_buffer("mean", torch.tensor([104.00698793, 116.66876762, 122.67891434])[None, :, None, None])
            self.stages = nn.ModuleList()
            self.sides = nn.ModuleList()
            for cin, cout, n in self.cfg:
                layers = []
                for k in range(n):
                    layers += [nn.Conv2d(cin if k == 0 else cout, cout, 3, padding=1), nn.ReLU()]
                self.stages.append(nn.Sequential(*layers))
                self.sides.append(nn.Conv2d(cout, 1, 1))
            self.fuse = nn.Conv2d(5, 1, 1)

        def forward(self, x):
            h, w = x.shape[-2:]
            x = x.flip(1) - self.mean  # RGB -> BGR, mean subtraction
            sides = []
            for i, (stage, side) in enumerate(zip(self.stages, self.sides)):
                if i:
                    x = F.max_pool2d(x, 2, 2)
                x = stage(x)
                sides.append(F.interpolate(side(x), size=(h, w), mode="bilinear", align_corners=False))
            return torch.sigmoid(self.fuse(torch.cat(sides, 1)))

    return HED()


def extract_edges(image, backend: str = "gradient", weights: Optional[str | Path] = None) -> np.ndarray:
    """Per-pixel edge strength in [0, 1]."""
    if backend == "gradient":
        return gradient_edges(image)
    if backend == "hed":
        return HEDBackend(weights)(image)
    raise ValueError(f"unknown edge backend {backend!r}")


def binarize_and_dilate(
    edges: np.ndarray,
    threshold: float = DEFAULT_THRESHOLD,
    radius: int = DEFAULT_RADIUS,
    iterations: int = DEFAULT_ITERATIONS,
    backend: str = "unknown",
) -> ContentMap:
    if not 0.0 < threshold < 1.0:
        raise ValueError(f"threshold must be in (0, 1), got {threshold}")
    if radius < 1:
        raise ValueError(f"radius must be >= 1, got {radius}")
    if iterations < 0:
        raise ValueError(f"iterations must be >= 0, got {iterations}")
    mask = np.asarray(edges) >= threshold
    # scipy treats iterations=0 as "until convergence"; here 0 means no dilation.
    if iterations > 0:
        structure = np.ones((2 * radius + 1, 2 * radius + 1), dtype=bool)
        mask = ndimage.binary_dilation(mask, structure=structure, iterations=iterations)
    return ContentMap(
        mask.astype(np.uint8),
        {"edge_backend": backend, "threshold": threshold, "dilation_radius": radius, "iterations": iterations},
    )


def content_map(
    image,
    threshold: float = DEFAULT_THRESHOLD,
    radius: int = DEFAULT_RADIUS,
    iterations: int = DEFAULT_ITERATIONS,
    backend: str = "gradient",
    weights: Optional[str | Path] = None,
) -> ContentMap:
    edges = extract_edges(image, backend, weights)
    return binarize_and_dilate(edges, threshold, radius, iterations, backend=backend)
