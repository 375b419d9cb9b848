"""Benchmark harness: manifest, generation grid, embedding-cosine scoring.

Scores are cosine similarities of unit-normalised embeddings. A deterministic
stub scorer (hash-seeded pseudo-embeddings) is used for tests; a CLIP scorer
can be plugged in when its weights are available locally.
"""
from __future__ import annotations

import hashlib
import json
import logging
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
from PIL import Image

from .config import BackendUnavailable

log = logging.getLogger(__name__)

# Structure of the full benchmark; fixtures may use any counts.
FULL_STYLE_COUNT = 73
FULL_REFERENCE_COUNT = 490
FULL_PROMPT_COUNT = 20
FULL_CONTENT_COUNT = 40

BENCH_PROMPTS = (
    "A bench", "A bird", "A butterfly", "An elephant",
    "A car", "A dog", "A cat", "A laptop",
    "A moose", "A penguin", "A robot", "A rocket",
    "An ancient temple surrounded by lush vegetation",
    "A chef preparing meals in kitchen",
    "A colorful butterfly resting on a flower",
    "A house with a tree beside",
    "A person jogging along a scenic trail",
    "A student walking to school with backpack",
    "A wolf walking stealthily through the forest",
    "A wooden sailboat docked in a harbor",
)

# Published large-scale scores, kept for context only. Not reproducible here.
REFERENCE_SCORES = {"text_alignment": 0.219, "image_alignment": 0.640, "image_driven_image_alignment": 0.660}


@dataclass
class BenchManifest:
    styles: dict[str, list[str]]
    prompts: list[str] = field(default_factory=list)
    content_images: list[str] = field(default_factory=list)
    root: Optional[str] = None  # base directory for relative paths

    @property
    def n_references(self) -> int:
        return sum(len(v) for v in self.styles.values())

    def resolve(self, path: str) -> Path:
        p = Path(path)
        return p if p.is_absolute() or self.root is None else Path(self.root) / p

    def references(self) -> list[tuple[str, str]]:
        return [(name, ref) for name in sorted(self.styles) for ref in self.styles[name]]

    def cell_count(self, mode: str) -> int:
        inputs = self.prompts if mode == "text" else self.content_images
        return self.n_references * len(inputs)

    def validate(self, mode: Optional[str] = None) -> None:
        if not self.styles or any(not refs for refs in self.styles.values()):
            raise ValueError("manifest needs at least one style with at least one reference image")
        if mode == "text" and not self.prompts:
            raise ValueError("text mode needs prompts")
        if mode == "image" and not self.content_images:
            raise ValueError("image mode needs content_images")

    def matches_full_benchmark(self) -> bool:
        return (
            len(self.styles) == FULL_STYLE_COUNT
            and self.n_references == FULL_REFERENCE_COUNT
            and len(self.prompts) == FULL_PROMPT_COUNT
            and len(self.content_images) == FULL_CONTENT_COUNT
        )

    @classmethod
    def load(cls, path) -> "BenchManifest":
        path = Path(path)
        data = json.loads(path.read_text())
        return cls(
            styles={k: list(v) for k, v in data["styles"].items()},
            prompts=list(data.get("prompts", [])),
            content_images=list(data.get("content_images", [])),
            root=data.get("root", str(path.parent)),
        )

    def save(self, path) -> None:
        data = {"styles": self.styles, "prompts": self.prompts, "content_images": self.content_images}
        Path(path).write_text(json.dumps(data, indent=2, sort_keys=True))


# -- scoring -----------------------------------------------------------------

def cosine(a, b) -> float:
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise ValueError("cannot score a zero embedding")
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


def _seed_from(data: bytes) -> int:
    return int.from_bytes(hashlib.sha256(data).digest()[:8], "little")


class StubScorer:
    """Deterministic pseudo-embeddings seeded by a hash of the input.

    Identical inputs embed identically, so self-similarity is exactly 1;
    distinct inputs give near-orthogonal unit vectors.
    """

    name = "stub"

    def __init__(self, dim: int = 64):
        self.dim = dim

    def _vec(self, data: bytes) -> np.ndarray:
        v = np.random.default_rng(_seed_from(data)).standard_normal(self.dim)
        return v / np.linalg.norm(v)

    def embed_image(self, image: np.ndarray) -> np.ndarray:
        arr = np.ascontiguousarray(np.asarray(image, dtype=np.uint8))
        return self._vec(b"img" + str(arr.shape).encode() + arr.tobytes())

    def embed_text(self, text: str) -> np.ndarray:
        return self._vec(b"txt" + text.encode())


class ClipScorer:
    """CLIP dual encoder loaded from the local cache only (never downloads)."""

    name = "clip"

    def __init__(self, model: str = "openai/clip-vit-large-patch14"):
        try:
            import torch
            from transformers import CLIPModel, CLIPProcessor
        except ImportError as err:
            raise BackendUnavailable(
                "CLIP scoring needs the 'transformers' package; use --scorer stub for the deterministic stub"
            ) from err
        try:
            self.model = CLIPModel.from_pretrained(model, local_files_only=True).eval()
            self.proc = CLIPProcessor.from_pretrained(model, local_files_only=True)
        except OSError as err:
            raise BackendUnavailable(
                f"CLIP weights {model!r} are not cached locally; use --scorer stub for the deterministic stub"
            ) from err
        self._torch = torch

    def embed_image(self, image: np.ndarray) -> np.ndarray:
        with self._torch.no_grad():
            inputs = self.proc(images=Image.fromarray(np.asarray(image, dtype=np.uint8)), return_tensors="pt")
            return self.model.get_image_features(**inputs)[0].numpy()

    def embed_text(self, text: str) -> np.ndarray:
        with self._torch.no_grad():
            inputs = self.proc(text=[text], return_tensors="pt", padding=True)
            return self.model.get_text_features(**inputs)[0].numpy()


def get_scorer(name: str):
    if name == "stub":
        return StubScorer()
    if name == "clip":
        return ClipScorer()
    raise ValueError(f"unknown scorer {name!r} (choose 'stub' or 'clip')")


def score_text_alignment(generated: np.ndarray, prompt: str, scorer) -> float:
    return cosine(scorer.embed_text(prompt), scorer.embed_image(generated))


def score_image_alignment(generated: np.ndarray, reference: np.ndarray, scorer) -> float:
    return cosine(scorer.embed_image(generated), scorer.embed_image(reference))


# -- harness -----------------------------------------------------------------

@dataclass
class EvalReport:
    mode: str
    records: list[dict]
    metadata: dict

    @property
    def ok_records(self) -> list[dict]:
        return [r for r in self.records if r["status"] == "ok"]

    @property
    def failed(self) -> list[dict]:
        return [r for r in self.records if r["status"] != "ok"]

    def aggregates(self) -> dict[str, Optional[float]]:
        out = {}
        for key in ("text_alignment", "image_alignment"):
            vals = [r[key] for r in self.ok_records if r.get(key) is not None]
            out[key] = float(np.mean(vals)) if vals else None
        return out

    def to_dict(self) -> dict:
        return {
            "mode": self.mode,
            "metadata": self.metadata,
            "aggregates": self.aggregates(),
            "n_records": len(self.records),
            "n_failed": len(self.failed),
            "reference_scores": REFERENCE_SCORES,
            "records": self.records,
        }

    def format_table(self) -> str:
        agg = self.aggregates()
        fmt = lambda v: "n/a" if v is None else f"{v:.4f}"
        lines = [
            f"mode: {self.mode}   cells: {len(self.records)}   failed: {len(self.failed)}",
            f"{'metric':<18}{'score':>10}{'large-scale ref':>18}",
            f"{'text_alignment':<18}{fmt(agg['text_alignment']):>10}{REFERENCE_SCORES['text_alignment']:>18.3f}",
            f"{'image_alignment':<18}{fmt(agg['image_alignment']):>10}{REFERENCE_SCORES['image_alignment']:>18.3f}",
        ]
        return "\n".join(lines)


def load_image(path, size: Optional[int] = None) -> np.ndarray:
    from .training import preprocess

    with Image.open(path) as img:
        img.load()
        if size is None:
            return np.asarray(img.convert("RGB"), dtype=np.uint8)
        return preprocess(img, size)[0]


def cell_key(style: str, reference: str, condition: str) -> str:
    return json.dumps([style, reference, condition])


def _read_done(path: Path) -> dict[str, dict]:
    done = {}
    if path.exists():
        for line in path.read_text().splitlines():
            if line.strip():
                rec = json.loads(line)
                if rec["status"] == "ok":
                    done[rec["key"]] = rec
    return done


GenerateFn = Callable[[np.ndarray, str, Optional[np.ndarray], int], np.ndarray]


def pipeline_generator(pipe, steps: int, guidance: float, scale: float) -> GenerateFn:
    """Adapter from a :class:`StylePipeline` to the harness's generate callback."""
    import torch

    from .content import content_map
    from .pipeline import from_uint8, to_uint8

    def generate(reference, prompt, content, seed):
        cmap = None
        if content is not None:
            cmap = torch.from_numpy(content_map(content).mask).float()[None, None]
        out = pipe.generate(from_uint8(reference), prompt, cmap, steps, guidance, scale, seed)
        return to_uint8(out["image"])[0]

    return generate


def run_benchmark(
    manifest: BenchManifest,
    generate: GenerateFn,
    scorer,
    mode: str = "text",
    out_path=None,
    image_size: int = 64,
    seed: int = 0,
    metadata: Optional[dict] = None,
    on_cell: Optional[Callable[[dict], None]] = None,
) -> EvalReport:
    """Generate and score every cell of the manifest.

    ``text`` mode has one cell per (reference, prompt); ``image`` mode one per
    (reference, content image) with an empty prompt. When ``out_path`` is
    given, records are appended as JSON lines after each cell and completed
    cells found there are reused instead of recomputed. A cell whose
    generation raises is recorded with ``status="failed"``; the run continues.
    """
    if mode not in ("text", "image"):
        raise ValueError(f"mode must be 'text' or 'image', got {mode!r}")
    manifest.validate(mode)
    out_path = Path(out_path) if out_path else None
    done = _read_done(out_path) if out_path else {}
    conditions = manifest.prompts if mode == "text" else manifest.content_images
    refs_cache: dict[str, np.ndarray] = {}
    records = []
    for style, ref in manifest.references():
        for cond in conditions:
            key = cell_key(style, ref, cond)
            if key in done:
                records.append(done[key])
                continue
            rec = {"key": key, "style": style, "reference": ref, "condition": cond, "mode": mode}
            try:
                if ref not in refs_cache:
                    refs_cache[ref] = load_image(manifest.resolve(ref), image_size)
                reference = refs_cache[ref]
                content = load_image(manifest.resolve(cond), image_size) if mode == "image" else None
                prompt = cond if mode == "text" else ""
                generated = generate(reference, prompt, content, seed)
                rec.update(
                    status="ok",
                    text_alignment=score_text_alignment(generated, cond, scorer) if mode == "text" else None,
                    image_alignment=score_image_alignment(generated, reference, scorer),
                    self_similarity=score_image_alignment(reference, reference, scorer),
                )
            except Exception as err:  # noqa: BLE001 - a failed cell must not stop the run
                log.warning("cell %s failed: %s", key, err)
                rec.update(status="failed", error=f"{type(err).__name__}: {err}")
            records.append(rec)
            if on_cell:
                on_cell(rec)
            if out_path:
                out_path.parent.mkdir(parents=True, exist_ok=True)
                with open(out_path, "a") as fh:
                    fh.write(json.dumps(rec, sort_keys=True) + "\n")
                    fh.flush()
                    os.fsync(fh.fileno())
    meta = {"seed": seed, "scorer": getattr(scorer, "name", type(scorer).__name__), **(metadata or {})}
    return EvalReport(mode, records, meta)


def write_report(report: EvalReport, path) -> None:
    Path(path).write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True))


def full_cell_count(mode: str = "text") -> int:
    inputs = FULL_PROMPT_COUNT if mode == "text" else FULL_CONTENT_COUNT
    return FULL_REFERENCE_COUNT * inputs


__all__ = [
    "BENCH_PROMPTS", "BenchManifest", "ClipScorer", "EvalReport", "StubScorer", "cosine",
    "get_scorer", "full_cell_count", "pipeline_generator", "run_benchmark",
    "score_image_alignment", "score_text_alignment", "write_report",
]
