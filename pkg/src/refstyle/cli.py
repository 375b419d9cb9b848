"""Command-line entry point: ``refstyle <subcommand> ...``.

Exit codes: 0 success, 1 user error, 2 internal error. Failures print one
JSON object on stderr.
"""
from __future__ import annotations

import argparse
import functools
import json
import os
import sys
import traceback
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import __version__
from .config import DEFAULT_GUIDANCE, DEFAULT_STEPS, DEFAULT_STYLE_SCALE, BackendUnavailable, get_profile

EXIT_OK, EXIT_USER, EXIT_INTERNAL = 0, 1, 2
HELP_WIDTH = 100


class UserError(Exception):
    """Bad input from the caller (exit code 1)."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UserError(f"{self.prog}: {message}")


_formatter = functools.partial(argparse.ArgumentDefaultsHelpFormatter, width=HELP_WIDTH)


# -- shared helpers ----------------------------------------------------------

def _checkpoint_dir(arg: Optional[str]) -> Path:
    from .checkpoint import CHECKPOINT_ENV

    root = arg or os.environ.get(CHECKPOINT_ENV)
    if not root:
        raise UserError(f"no checkpoint directory: pass --checkpoints or set {CHECKPOINT_ENV}")
    path = Path(root)
    if not (path / "config.json").exists() or not (path / "base.pt").exists():
        raise UserError(f"{path} is not a checkpoint directory (config.json and base.pt expected)")
    return path


def _read_image(path: str, size: int) -> np.ndarray:
    from PIL import Image, UnidentifiedImageError

    from .training import preprocess

    try:
        with Image.open(path) as img:
            img.load()
            return preprocess(img, size)[0]
    except FileNotFoundError:
        raise UserError(f"image not found: {path}") from None
    except UnidentifiedImageError:
        raise UserError(f"not a readable image: {path}") from None


def _write_png(path: Path, array: np.ndarray) -> None:
    from PIL import Image

    from .checkpoint import atomic_write

    atomic_write(path, lambda p: Image.fromarray(array).save(p, format="PNG"))


def _sidecar_path(out: Path) -> Path:
    return out.with_name(out.name + ".json")


def _write_outputs(out: Path, array: np.ndarray, meta: dict) -> None:
    """Image plus sidecar; neither is left behind if either write fails."""
    from .checkpoint import atomic_write

    side = _sidecar_path(out)
    written = []
    try:
        _write_png(out, array)
        written.append(out)
        atomic_write(side, lambda p: Path(p).write_text(json.dumps(meta, indent=2, sort_keys=True)))
    except BaseException:
        for path in written:
            path.unlink(missing_ok=True)
        raise


def contact_sheet(tiles: Sequence[Sequence[np.ndarray]], pad: int = 2) -> np.ndarray:
    """Rows of equally sized HxWx3 tiles -> one image with ``pad`` white gutters."""
    rows, cols = len(tiles), len(tiles[0])
    h, w, c = tiles[0][0].shape
    sheet = np.full((rows * h + (rows + 1) * pad, cols * w + (cols + 1) * pad, c), 255, np.uint8)
    for i, row in enumerate(tiles):
        if len(row) != cols:
            raise ValueError("ragged contact sheet")
        for j, tile in enumerate(row):
            y, x = pad + i * (h + pad), pad + j * (w + pad)
            sheet[y:y + h, x:x + w] = tile
    return sheet


# -- subcommands -------------------------------------------------------------

def cmd_generate(args) -> dict:
    import torch

    from .checkpoint import checkpoint_hashes, has_part, load_pipeline
    from .content import content_map
    from .pipeline import from_uint8, to_uint8

    cfg = get_profile(args.profile)
    ckdir = _checkpoint_dir(args.checkpoints)
    content_dir = Path(args.content_checkpoints) if args.content_checkpoints else ckdir
    if args.content and not has_part(content_dir, "content_fusion"):
        raise UserError(
            f"--content needs a content-fusion checkpoint (content_fusion.pt) in {content_dir}; "
            "run 'train --stage 2' first"
        )
    if args.scale != 0 and not args.style_ref:
        raise UserError("--style-ref is required unless --scale 0")
    pipe = load_pipeline(ckdir, content=bool(args.content), content_directory=content_dir)
    if pipe.cfg.profile != cfg.profile:
        raise UserError(f"checkpoint profile {pipe.cfg.profile!r} does not match --profile {args.profile!r}")
    size = pipe.cfg.image_size
    styles = [_read_image(p, size) for p in args.style_ref] or [None]
    prompts = args.prompt or [""]
    cmap, content_meta = None, None
    if args.content:
        cm = content_map(_read_image(args.content, size))
        cmap = torch.from_numpy(cm.mask).float()[None, None]
        content_meta = cm.provenance
    tiles = []
    for style in styles:
        style_t = from_uint8(style) if style is not None else None
        row = []
        for prompt in prompts:
            out = pipe.generate(style_t, prompt, cmap, args.steps, args.guidance, args.scale, args.seed, args.sampler)
            row.append(to_uint8(out["image"])[0])
        tiles.append(row)
    image = tiles[0][0] if len(styles) * len(prompts) == 1 else contact_sheet(tiles)
    hashes = checkpoint_hashes(ckdir)
    if args.content and content_dir != ckdir:
        hashes["content_fusion"] = checkpoint_hashes(content_dir)["content_fusion"]
    meta = {
        "command": "generate",
        "version": __version__,
        "profile": args.profile,
        "style_ref": args.style_ref,
        "prompt": prompts,
        "content": args.content,
        "content_map": content_meta,
        "scale": args.scale,
        "steps": args.steps,
        "guidance": args.guidance,
        "seed": args.seed,
        "sampler": args.sampler,
        "checkpoints": str(ckdir),
        "checkpoint_sha256": hashes,
        "grid": [len(styles), len(prompts)],
    }
    out = Path(args.out)
    _write_outputs(out, image, meta)
    return {"out": str(out), "metadata": str(_sidecar_path(out)), "grid": meta["grid"]}


def cmd_extract_content(args) -> dict:
    from .content import content_map

    size = args.size
    img = _read_image(args.image, size) if size else _read_image_raw(args.image)
    try:
        cm = content_map(img, args.threshold, args.radius, args.iterations, args.backend, args.weights)
    except FileNotFoundError as err:
        raise UserError(str(err)) from None
    meta = {"command": "extract-content", "version": __version__, "image": args.image, **cm.provenance}
    out = Path(args.out)
    _write_outputs(out, cm.to_png_array(), meta)
    return {"out": str(out), "edge_fraction": float(cm.mask.mean())}


def _read_image_raw(path: str) -> np.ndarray:
    from PIL import Image, UnidentifiedImageError

    try:
        with Image.open(path) as img:
            return np.asarray(img.convert("RGB"), dtype=np.uint8)
    except FileNotFoundError:
        raise UserError(f"image not found: {path}") from None
    except UnidentifiedImageError:
        raise UserError(f"not a readable image: {path}") from None


def _parse_source(raw: str) -> tuple[str, str, float]:
    """``name=path[@weight]``."""
    if "=" not in raw:
        raise UserError(f"--source expects name=path[@weight], got {raw!r}")
    name, rest = raw.split("=", 1)
    path, weight = rest, 1.0
    if "@" in rest:
        path, w = rest.rsplit("@", 1)
        try:
            weight = float(w)
        except ValueError:
            raise UserError(f"bad weight in --source {raw!r}") from None
    return name, path, weight


def _load_records(path: str):
    from .curation import read_records

    try:
        return read_records(path)
    except FileNotFoundError:
        raise UserError(f"records file not found: {path}") from None
    except (json.JSONDecodeError, KeyError) as err:
        raise UserError(f"malformed records file {path}: {err}") from None


def cmd_curate(args) -> dict:
    from .checkpoint import atomic_write
    from .curation import StyleLexicon, build_manifest, write_records

    lexicon = StyleLexicon.load(args.lexicon)
    sources = []
    for raw in args.source:
        name, path, weight = _parse_source(raw)
        sources.append((name, _load_records(path), weight))
    records, report = build_manifest(sources, lexicon, seed=args.seed)
    out = Path(args.out)
    atomic_write(out, lambda p: write_records(records, p))
    return {"out": str(out), **report.to_dict()}


def cmd_analyze(args) -> dict:
    from .curation import StyleLexicon, analyze_distribution, destylize, estimate_stylized_fraction

    lexicon = StyleLexicon.load(args.lexicon)
    records = _load_records(args.records)
    tagged = [r if r.style_tags else destylize(r, lexicon) for r in records]
    dist = analyze_distribution(tagged)
    fraction = estimate_stylized_fraction(records, lexicon)
    if not args.json:
        print(dist.format_table(args.top_k))
        print(f"stylized fraction: {fraction:.4f} ({dist.total_stylized}/{dist.total_records} tagged)")
    return {"summary": dist.summary(args.top_k), "stylized_fraction": fraction, "_quiet": not args.json}


def cmd_train(args) -> dict:
    from .fixtures import style_set
    from .training import TrainingConfig, desk_training_config, run_stage

    overrides = {k: v for k, v in {
        "steps": args.steps, "lr": args.lr, "adapter_lr": args.adapter_lr,
        "batch_size": args.batch_size, "seed": args.seed,
    }.items() if v is not None}
    cfg = get_profile(args.profile)
    if args.train_config:
        tc = TrainingConfig.load(args.train_config)
        for k, v in overrides.items():
            setattr(tc, k, v)
        tc.stage = args.stage
        tc.__post_init__()
    else:
        tc = desk_training_config(args.stage, **overrides)
    checkpoints = {}
    if args.stage == 2:
        if not args.stage1:
            raise UserError("stage 2 needs --stage1 pointing at a stage-1 checkpoint directory")
        checkpoints["stage1"] = args.stage1
    if args.base:
        checkpoints["base"] = args.base
    if args.data:
        from .curation import read_records

        recs = read_records(args.data)
        root = Path(args.data).parent
        dataset = [(root / r.image_ref, r.caption) for r in recs]
    else:
        dataset = style_set(args.fixtures, cfg.image_size, args.seed)
    out = Path(args.out)
    try:
        run_stage(tc, dataset, out, checkpoints, cfg, log_path=out / f"stage{args.stage}_log.jsonl")
    except FileNotFoundError as err:
        raise UserError(str(err)) from None
    from .checkpoint import checkpoint_hashes

    return {"out": str(out), "stage": args.stage, "steps": tc.total_steps, "checkpoint_sha256": checkpoint_hashes(out)}


def cmd_evaluate(args) -> dict:
    from .checkpoint import checkpoint_hashes, load_pipeline
    from .evaluation import BenchManifest, get_scorer, pipeline_generator, run_benchmark, write_report

    try:
        manifest = BenchManifest.load(args.manifest)
    except FileNotFoundError:
        raise UserError(f"manifest not found: {args.manifest}") from None
    except (json.JSONDecodeError, KeyError) as err:
        raise UserError(f"malformed manifest {args.manifest}: {err}") from None
    scorer = get_scorer(args.scorer)
    ckdir = _checkpoint_dir(args.checkpoints)
    pipe = load_pipeline(ckdir, content=args.mode == "image")
    gen = pipeline_generator(pipe, args.steps, args.guidance, args.scale)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    meta = {
        "scale": args.scale, "steps": args.steps, "guidance": args.guidance,
        "checkpoint_sha256": checkpoint_hashes(ckdir),
    }
    report = run_benchmark(
        manifest, gen, scorer, args.mode, out / "cells.jsonl", pipe.cfg.image_size, args.seed, meta
    )
    write_report(report, out / "report.json")
    (out / "report.txt").write_text(report.format_table() + "\n")
    return {"out": str(out), "aggregates": report.aggregates(), "n_failed": len(report.failed)}


# -- parser ------------------------------------------------------------------

def _add_sampling(p):
    p.add_argument("--steps", type=int, default=DEFAULT_STEPS, help="sampler steps")
    p.add_argument("--guidance", type=float, default=DEFAULT_GUIDANCE, help="classifier-free guidance scale")
    p.add_argument("--scale", type=float, default=DEFAULT_STYLE_SCALE, help="style weight lambda")
    p.add_argument("--seed", type=int, default=0, help="random seed")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="refstyle", description="Reference-image style transfer on a toy latent diffusion model.",
                     formatter_class=_formatter)
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True

    def add(name, help_text):
        p = sub.add_parser(name, help=help_text, description=help_text, formatter_class=_formatter)
        p.add_argument("--config", help="JSON file whose keys override flag defaults (explicit flags still win)")
        return p

    g = add("generate", "Generate stylised images from a style reference and prompts.")
    g.add_argument("--style-ref", action="append", default=[], help="style reference image (repeat for a grid)")
    g.add_argument("--prompt", action="append", default=[], help="text prompt (repeat for a grid)")
    g.add_argument("--content", help="content image; needs a content-fusion checkpoint")
    _add_sampling(g)
    g.add_argument("--sampler", choices=("ddim", "plms"), default="ddim", help="sampler")
    g.add_argument("--profile", choices=("desk", "tiny", "pretrained"), default="desk", help="model profile")
    g.add_argument("--checkpoints", help="checkpoint directory; falls back to $REFSTYLE_CHECKPOINTS")
    g.add_argument("--content-checkpoints", help="directory holding content_fusion.pt if not --checkpoints")
    g.add_argument("--out", required=True, help="output PNG; metadata goes to <out>.json")
    g.set_defaults(func=cmd_generate)

    e = add("extract-content", "Build a binary content map (edges, threshold, dilation) from an image.")
    e.add_argument("--image", required=True, help="input image")
    e.add_argument("--out", required=True, help="output PNG mask")
    e.add_argument("--backend", choices=("gradient", "hed"), default="gradient", help="edge detector")
    e.add_argument("--weights", help="HED weights file (hed backend only)")
    e.add_argument("--threshold", type=float, default=0.5, help="edge threshold")
    e.add_argument("--radius", type=int, default=1, help="dilation radius")
    e.add_argument("--iterations", type=int, default=2, help="dilation iterations")
    e.add_argument("--size", type=int, default=None, help="resize/crop to this square size first")
    e.set_defaults(func=cmd_extract_content)

    c = add("curate", "Merge caption sources, de-stylise captions and write a training manifest.")
    c.add_argument("--source", action="append", required=True, help="name=records.jsonl[@weight]")
    c.add_argument("--lexicon", help="style lexicon file (default: bundled)")
    c.add_argument("--seed", type=int, default=0, help="shuffle/subsample seed")
    c.add_argument("--out", required=True, help="output JSONL manifest")
    c.set_defaults(func=cmd_curate)

    a = add("analyze", "Print the style distribution of a caption corpus.")
    a.add_argument("--records", required=True, help="JSONL caption records")
    a.add_argument("--lexicon", help="style lexicon file (default: bundled)")
    a.add_argument("--top-k", type=int, default=50, help="rows in the table")
    a.add_argument("--json", action="store_true", help="print JSON instead of a table")
    a.set_defaults(func=cmd_analyze)

    t = add("train", "Run one training stage and write a checkpoint directory.")
    t.add_argument("--stage", type=int, choices=(1, 2), required=True, help="1: style path, 2: content fusion")
    t.add_argument("--out", required=True, help="checkpoint output directory")
    t.add_argument("--stage1", help="stage-1 checkpoint directory (stage 2 only)")
    t.add_argument("--base", help="checkpoint directory with a base denoiser to start stage 1 from")
    t.add_argument("--data", help="JSONL caption records with image paths (default: procedural fixtures)")
    t.add_argument("--fixtures", type=int, default=8, help="number of procedural fixture images")
    t.add_argument("--profile", choices=("desk", "tiny", "pretrained"), default="desk", help="model profile")
    t.add_argument("--train-config", help="TrainingConfig JSON file")
    t.add_argument("--steps", type=int, help="training steps")
    t.add_argument("--lr", type=float, help="learning rate")
    t.add_argument("--adapter-lr", type=float, help="learning rate for the adapter projections")
    t.add_argument("--batch-size", type=int, help="batch size")
    t.add_argument("--seed", type=int, default=0, help="random seed")
    t.set_defaults(func=cmd_train)

    v = add("evaluate", "Run the benchmark grid and score it.")
    v.add_argument("--manifest", required=True, help="benchmark manifest JSON")
    v.add_argument("--mode", choices=("text", "image"), default="text", help="text- or image-driven")
    v.add_argument("--out", required=True, help="output directory (cells.jsonl, report.json, report.txt)")
    v.add_argument("--scorer", choices=("stub", "clip"), default="stub", help="embedding scorer")
    v.add_argument("--checkpoints", help="checkpoint directory; falls back to $REFSTYLE_CHECKPOINTS")
    _add_sampling(v)
    v.set_defaults(func=cmd_evaluate)
    return parser


def _apply_config(parser: argparse.ArgumentParser, argv: list[str]) -> None:
    """Load ``--config`` (if any) into the chosen subparser's defaults."""
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config")
    known, _ = pre.parse_known_args(argv)
    if not known.config:
        return
    try:
        data = json.loads(Path(known.config).read_text())
    except FileNotFoundError:
        raise UserError(f"config file not found: {known.config}") from None
    except json.JSONDecodeError as err:
        raise UserError(f"config file {known.config} is not valid JSON: {err}") from None
    if not isinstance(data, dict):
        raise UserError("config file must hold a JSON object")
    command = next((a for a in argv if not a.startswith("-")), None)
    subparsers = next(a for a in parser._actions if isinstance(a, argparse._SubParsersAction))
    if command not in subparsers.choices:
        return
    sub = subparsers.choices[command]
    dests = {a.dest for a in sub._actions}
    unknown = sorted(k.replace("-", "_") for k in data if k.replace("-", "_") not in dests)
    if unknown:
        raise UserError(f"unknown keys in config file: {', '.join(unknown)}")
    defaults = {k.replace("-", "_"): v for k, v in data.items()}
    sub.set_defaults(**defaults)
    for action in sub._actions:
        if action.dest in defaults and action.required:
            action.required = False


def _fail(code: int, err: BaseException) -> int:
    payload = {"error": type(err).__name__, "message": str(err), "exit_code": code}
    print(json.dumps(payload), file=sys.stderr)
    return code


def main(argv: Optional[Sequence[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        _apply_config(parser, argv)
        args = parser.parse_args(argv)
        result = args.func(args)
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    except (UserError, BackendUnavailable, ValueError) as err:
        return _fail(EXIT_USER, err)
    except Exception as err:  # noqa: BLE001
        if os.environ.get("REFSTYLE_DEBUG"):
            traceback.print_exc()
        return _fail(EXIT_INTERNAL, err)
    if result and not result.pop("_quiet", False):
        print(json.dumps(result, indent=2, sort_keys=True))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
