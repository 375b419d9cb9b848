"""Named-tensor checkpoints.

A checkpoint directory holds ``config.json`` plus one archive per component:

* ``base.pt``: denoiser weights without the style branch
* ``style_encoder.pt``: style encoder incl. null style embedding
* ``adapter.pt``: only the style key/value projections, keyed by site path
* ``content_fusion.pt``: content-fusion encoder (written by stage 2)

Each archive is a ``torch.save`` dict with a format tag, a version, a
``kind`` and a flat ``{name: tensor}`` mapping.
"""
from __future__ import annotations

import hashlib
import os
import tempfile
from pathlib import Path
from typing import Optional

import torch

from .config import ModelConfig

FORMAT = "refstyle-checkpoint"
VERSION = 1
ADAPTER_KEYS = ("to_k_style", "to_v_style")
CHECKPOINT_ENV = "REFSTYLE_CHECKPOINTS"


def atomic_write(path: Path, write) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    os.close(fd)
    try:
        write(tmp)
        os.replace(tmp, path)
    except BaseException:
        Path(tmp).unlink(missing_ok=True)
        raise


def save_tensors(path, tensors: dict[str, torch.Tensor], kind: str, meta: Optional[dict] = None) -> None:
    payload = {
        "format": FORMAT,
        "version": VERSION,
        "kind": kind,
        "meta": meta or {},
        "tensors": {k: v.detach().cpu().clone() for k, v in tensors.items()},
    }
    atomic_write(Path(path), lambda p: torch.save(payload, p))


def load_tensors(path, kind: Optional[str] = None) -> dict[str, torch.Tensor]:
    payload = torch.load(path, map_location="cpu", weights_only=True)
    if payload.get("format") != FORMAT:
        raise ValueError(f"{path}: not a {FORMAT} archive")
    if payload.get("version") != VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {payload.get('version')}")
    if kind is not None and payload.get("kind") != kind:
        raise ValueError(f"{path}: expected a {kind!r} checkpoint, found {payload.get('kind')!r}")
    return payload["tensors"]


def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _is_adapter_key(name: str) -> bool:
    return any(f".{k}." in f".{name}" for k in ADAPTER_KEYS)


def adapter_state(unet) -> dict[str, torch.Tensor]:
    return {k: v for k, v in unet.state_dict().items() if _is_adapter_key(k)}


def base_state(unet) -> dict[str, torch.Tensor]:
    return {k: v for k, v in unet.state_dict().items() if not _is_adapter_key(k)}


def save_pipeline(pipe, directory, parts=("base", "style_encoder", "adapter"), meta: Optional[dict] = None) -> dict:
    """Write the requested parts; returns ``{part: sha256}``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    atomic_write(directory / "config.json", lambda p: pipe.cfg.save(p))
    sources = {
        "base": lambda: base_state(pipe.unet),
        "style_encoder": lambda: pipe.style_encoder.state_dict(),
        "adapter": lambda: adapter_state(pipe.unet),
        "content_fusion": lambda: pipe.content_encoder.state_dict(),
    }
    hashes = {}
    for part in parts:
        if part == "content_fusion" and pipe.content_encoder is None:
            raise ValueError("no content-fusion encoder attached")
        path = directory / f"{part}.pt"
        save_tensors(path, sources[part](), part, meta)
        hashes[part] = file_sha256(path)
    return hashes


def has_part(directory, part: str) -> bool:
    return (Path(directory) / f"{part}.pt").exists()


def load_pipeline(directory, content: bool = False, content_directory=None):
    """Rebuild a :class:`StylePipeline` from a checkpoint directory.

    The content-fusion encoder is loaded only when ``content`` is true; it may
    live in a separate directory.
    """
    from .pipeline import StylePipeline

    directory = Path(directory)
    cfg = ModelConfig.load(directory / "config.json")
    pipe = StylePipeline(cfg, style_adapter=has_part(directory, "adapter"))
    base = load_tensors(directory / "base.pt", "base")
    missing = set(base_state(pipe.unet)) - set(base)
    if missing:
        raise ValueError(f"base checkpoint is missing {len(missing)} tensors, e.g. {sorted(missing)[0]}")
    pipe.unet.load_state_dict(base, strict=False)
    if has_part(directory, "adapter"):
        pipe.unet.load_state_dict(load_tensors(directory / "adapter.pt", "adapter"), strict=False)
    if has_part(directory, "style_encoder"):
        pipe.style_encoder.load_state_dict(load_tensors(directory / "style_encoder.pt", "style_encoder"))
    if content:
        cdir = Path(content_directory) if content_directory else directory
        if not has_part(cdir, "content_fusion"):
            raise FileNotFoundError(
                f"content-fusion checkpoint not found in {cdir}; train stage 2 or drop the content image"
            )
        enc = pipe.attach_content_encoder()
        enc.load_state_dict(load_tensors(cdir / "content_fusion.pt", "content_fusion"))
    return pipe


def checkpoint_hashes(directory) -> dict[str, str]:
    directory = Path(directory)
    return {p.stem: file_sha256(p) for p in sorted(directory.glob("*.pt"))}
