"""Multi-scale, non-adjacent patch partitioning of a square reference image.

The layout is a pure function of the image side ``L``:

* large  (side L/4):  4x4 grid, the 8 cells with ``(row + col)`` even
* medium (side L/8):  8x8 grid, the 16 cells with row and col both even
* small  (side L/16): 16x16 grid, rows {0, 4, 8, 12} x even cols (32 cells)

Within a scale no two cells share an edge. Cells of different scales may
overlap; each scale is handled by its own expert downstream.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
import torch

SCALES = ("large", "medium", "small")
GRID = {"large": 4, "medium": 8, "small": 16}
COUNTS = {"large": 8, "medium": 16, "small": 32}
N_PATCHES = sum(COUNTS.values())


@lru_cache(maxsize=None)
def cell_layout(scale: str) -> tuple[tuple[int, int], ...]:
    """Grid coordinates ``(row, col)`` of the selected cells, row-major."""
    n = GRID[scale]
    if scale == "large":
        cells = [(r, c) for r in range(n) for c in range(n) if (r + c) % 2 == 0]
    elif scale == "medium":
        cells = [(r, c) for r in range(0, n, 2) for c in range(0, n, 2)]
    elif scale == "small":
        cells = [(r, c) for r in range(0, n, 4) for c in range(0, n, 2)]
    else:
        raise KeyError(scale)
    assert len(cells) == COUNTS[scale]
    return tuple(cells)


def tile_side(size: int, scale: str) -> int:
    return size // GRID[scale]


def check_size(height: int, width: int) -> int:
    if height != width:
        raise ValueError(f"reference image must be square, got {height}x{width}")
    if height % 16 or height == 0:
        raise ValueError(
            f"reference image side must be a positive multiple of 16 (got {height}); "
            "resize or crop before partitioning"
        )
    return height


@dataclass(frozen=True)
class PatchSet:
    large: list[np.ndarray]
    medium: list[np.ndarray]
    small: list[np.ndarray]
    source_size: int

    def scale(self, name: str) -> list[np.ndarray]:
        return getattr(self, name)

    def covered_fraction(self) -> float:
        area = sum(t.shape[0] * t.shape[1] for name in SCALES for t in self.scale(name))
        return area / self.source_size**2

    def __len__(self) -> int:
        return len(self.large) + len(self.medium) + len(self.small)


def partition(image) -> PatchSet:
    """Split an ``L x L [x C]`` raster into the fixed multi-scale patch layout.

    Tiles are exact copies of the source pixels; nothing is resampled.
    """
    arr = np.asarray(image)
    if arr.ndim not in (2, 3):
        raise ValueError(f"expected an HxW or HxWxC raster, got shape {arr.shape}")
    size = check_size(arr.shape[0], arr.shape[1])
    tiles = {}
    for name in SCALES:
        s = tile_side(size, name)
        tiles[name] = [arr[r * s:(r + 1) * s, c * s:(c + 1) * s].copy() for r, c in cell_layout(name)]
    return PatchSet(tiles["large"], tiles["medium"], tiles["small"], size)


def partition_batch(images: torch.Tensor) -> dict[str, torch.Tensor]:
    """Batched tensor version of :func:`partition`.

    ``images`` is ``(B, C, L, L)``; returns ``{scale: (B, n_scale, C, s, s)}``
    with the same cell order as :func:`partition`.
    """
    if images.ndim != 4:
        raise ValueError(f"expected (B, C, L, L), got {tuple(images.shape)}")
    size = check_size(images.shape[-2], images.shape[-1])
    out = {}
    for name in SCALES:
        n = GRID[name]
        s = size // n
        b, c = images.shape[:2]
        grid = images.reshape(b, c, n, s, n, s).permute(0, 2, 4, 1, 3, 5)  # B, n, n, C, s, s
        rows = torch.tensor([rc[0] for rc in cell_layout(name)])
        cols = torch.tensor([rc[1] for rc in cell_layout(name)])
        out[name] = grid[:, rows, cols]
    return out
