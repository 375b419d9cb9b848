"""Procedural style images for tests, demos and desk-scale training."""
from __future__ import annotations

import numpy as np

PATTERNS = ("stripes", "checker", "dots", "waves", "rings", "diagonal", "blocks", "noise")


def style_image(pattern: str, size: int = 64, seed: int = 0) -> np.ndarray:
    """A two-palette ``size x size x 3`` uint8 image drawn from ``pattern``."""
    rng = np.random.default_rng(seed)
    c1, c2 = rng.uniform(0, 1, 3), rng.uniform(0, 1, 3)
    yy, xx = np.mgrid[0:size, 0:size] / size
    f = rng.uniform(3, 8)
    if pattern == "stripes":
        m = np.sin(2 * np.pi * f * xx) > 0
    elif pattern == "checker":
        m = (np.floor(f * xx) + np.floor(f * yy)) % 2 == 0
    elif pattern == "dots":
        m = (np.sin(2 * np.pi * f * xx) * np.sin(2 * np.pi * f * yy)) > 0.5
    elif pattern == "waves":
        m = np.sin(2 * np.pi * (f * yy + 0.15 * np.sin(2 * np.pi * 2 * xx))) > 0
    elif pattern == "rings":
        m = np.sin(2 * np.pi * f * np.hypot(xx - 0.5, yy - 0.5)) > 0
    elif pattern == "diagonal":
        m = np.sin(2 * np.pi * f * (xx + yy) / 2) > 0
    elif pattern == "blocks":
        m = rng.uniform(size=(4, 4))[(yy * 4).astype(int), (xx * 4).astype(int)] > 0.5
    elif pattern == "noise":
        m = rng.uniform(size=(size, size)) > 0.5
    else:
        raise KeyError(pattern)
    img = np.where(m[..., None], c1, c2)
    return np.round(img * 255).astype(np.uint8)


def style_set(n: int = 8, size: int = 64, seed: int = 0) -> list[tuple[np.ndarray, str]]:
    """``n`` (image, caption) pairs cycling through the patterns."""
    out = []
    for i in range(n):
        name = PATTERNS[i % len(PATTERNS)]
        out.append((style_image(name, size, seed * 1000 + i), f"a {name} pattern"))
    return out


def shapes_image(size: int = 64, seed: int = 0) -> np.ndarray:
    """A content-style image: a few flat-coloured rectangles and a disc."""
    rng = np.random.default_rng(seed)
    img = np.ones((size, size, 3)) * rng.uniform(0.6, 1.0, 3)
    yy, xx = np.mgrid[0:size, 0:size]
    for _ in range(2):
        x0, y0 = rng.integers(0, size // 2, 2)
        w, h = rng.integers(size // 6, size // 2, 2)
        img[y0:y0 + h, x0:x0 + w] = rng.uniform(0, 0.5, 3)
    cx, cy, r = rng.integers(size // 4, 3 * size // 4, 2).tolist() + [size // 6]
    img[(xx - cx) ** 2 + (yy - cy) ** 2 < r * r] = rng.uniform(0, 1, 3)
    return np.round(img * 255).astype(np.uint8)


# Planted caption corpus: 100000 records, 7700 stylised (0.077), of which
# 3311 are paintings (0.43 of the stylised ones). Counts are chosen so both
# ratios are exact.
PLANTED_TOTAL = 100_000
PLANTED_STYLIZED = 7_700
PLANTED_PAINTING = 3_311
_PLANTED_TAIL = {
    "watercolor": 1200, "oil painting": 900, "anime": 700, "pixel art": 500, "digital art": 400,
    "impressionism": 300, "cubism": 150, "low poly": 100, "art deco": 60, "ukiyo-e": 40,
    "line art": 20, "gongbi": 19,
}
_SUBJECTS = (
    "a dog on a beach", "a red car parked outside", "two children playing football", "a bowl of fruit",
    "a lighthouse at dusk", "an old wooden bridge", "a cat sleeping on a sofa", "a mountain lake",
    "a busy market street", "a bicycle leaning on a wall", "a cup of coffee", "a horse in a field",
)
_STYLED_TEMPLATES = (
    "{s} in the style of {t}", "{s}, {t}", "{s} in {t} style", "a {t} of {s}",
)


def planted_caption_corpus() -> list[dict]:
    """Deterministic caption records with planted style frequencies."""
    assert PLANTED_PAINTING + sum(_PLANTED_TAIL.values()) == PLANTED_STYLIZED
    records = []
    k = 0

    def add(caption):
        nonlocal k
        records.append({"image_ref": f"img/{k:06d}.jpg", "caption": caption})
        k += 1

    for i in range(PLANTED_PAINTING):
        add(f"a painting of {_SUBJECTS[i % len(_SUBJECTS)]}")
    for term, n in _PLANTED_TAIL.items():
        for i in range(n):
            template = _STYLED_TEMPLATES[i % len(_STYLED_TEMPLATES)]
            if template.startswith("a {t} of") and term not in ("oil painting",):
                template = "{s}, {t}"
            add(template.format(s=_SUBJECTS[i % len(_SUBJECTS)], t=term))
    for i in range(PLANTED_TOTAL - PLANTED_STYLIZED):
        add(f"{_SUBJECTS[i % len(_SUBJECTS)]} #{i}")
    return records
