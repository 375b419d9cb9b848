"""Caption de-stylisation, style-distribution analysis and manifest building."""
from __future__ import annotations

import json
import logging
import re
from collections import Counter
from dataclasses import asdict, dataclass, field
from importlib import resources
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

log = logging.getLogger(__name__)

PLACEHOLDER_CAPTION = "an image"
FLAG_EMPTY = "empty_after_destylize"


@dataclass
class CaptionRecord:
    image_ref: str
    caption: str
    style_tags: list[str] = field(default_factory=list)
    source: str = ""
    flags: list[str] = field(default_factory=list)

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, ensure_ascii=False)

    @classmethod
    def from_dict(cls, d: dict) -> "CaptionRecord":
        return cls(
            image_ref=str(d["image_ref"]),
            caption=str(d.get("caption", "")),
            style_tags=list(d.get("style_tags", [])),
            source=str(d.get("source", "")),
            flags=list(d.get("flags", [])),
        )


def read_records(path: str | Path) -> list[CaptionRecord]:
    with open(path, encoding="utf-8") as fh:
        return [CaptionRecord.from_dict(json.loads(line)) for line in fh if line.strip()]


def write_records(records: Iterable[CaptionRecord], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for r in records:
            fh.write(r.to_json() + "\n")


def normalize_term(text: str) -> str:
    return re.sub(r"\s+", " ", text.strip().lower())


def _alternation(words: Iterable[str]) -> str:
    """Regex matching any of ``words``, built as a prefix trie.

    A flat alternation retries every word at every position; the trie shares
    prefixes. Longer continuations are tried before stopping, so the longest
    word wins as with a longest-first alternation.
    """
    trie: dict = {}
    for w in set(words):
        node = trie
        for ch in w:
            node = node.setdefault(ch, {})
        node[""] = {}

    def emit(node: dict) -> str:
        branches = []
        for ch in sorted(k for k in node if k):
            atom = r"\s+" if ch == " " else re.escape(ch)
            branches.append(atom + emit(node[ch]))
        if not branches:
            return ""
        body = branches[0] if len(branches) == 1 else "(?:" + "|".join(branches) + ")"
        if "" in node:
            return "(?:" + body + ")?"
        return body

    return emit(trie)


_FREE = r"(?P<tag>[^,.;:!?()]+?)(?=\s*(?:[,.;:!?()]|$))"


@dataclass
class StyleLexicon:
    terms: dict[str, str]  # alias or canonical -> canonical
    weak_terms: dict[str, str]
    media: list[str]
    templates: list[str]

    def __post_init__(self):
        self.terms = {normalize_term(k): normalize_term(v) for k, v in self.terms.items()}
        self.weak_terms = {normalize_term(k): normalize_term(v) for k, v in self.weak_terms.items()}
        self.media = [normalize_term(m) for m in self.media]
        self.patterns = [self._compile(t) for t in self.templates]

    def _compile(self, template: str) -> re.Pattern:
        bound = r"(?<![\w-])(?P<{name}>{alt})(?![\w-])"
        pat = template
        pat = pat.replace("{TERM}", bound.format(name="tag", alt=_alternation(self.terms)))
        pat = pat.replace("{WEAK}", bound.format(name="tag", alt=_alternation(self.weak_terms)))
        pat = pat.replace("{MEDIA}", bound.format(name="media", alt=_alternation(self.media)))
        pat = pat.replace("{FREE}", _FREE)
        return re.compile(pat, re.IGNORECASE)

    @property
    def canonical_names(self) -> set[str]:
        return set(self.terms.values()) | set(self.weak_terms.values())

    def canonical(self, name: str) -> str:
        key = normalize_term(name)
        return self.terms.get(key) or self.weak_terms.get(key) or key

    def _tags(self, m: re.Match) -> list[str]:
        groups = m.groupdict()
        raw = groups.get("tag") or groups.get("media")
        if raw is None:
            return []
        if groups.get("tag") is not None and _FREE in m.re.pattern:
            parts = re.split(r"\s+(?:and|&)\s+|\s*,\s*", raw)
        else:
            parts = [raw]
        return [self.canonical(p) for p in parts if p.strip()]

    def find(self, caption: str) -> list[tuple[re.Match, list[str]]]:
        """All pattern matches in ``caption`` (pattern order, then position)."""
        out = []
        for pat in self.patterns:
            for m in pat.finditer(caption):
                if m.group(0).strip():
                    out.append((m, self._tags(m)))
        return out

    def matches(self, caption: str) -> bool:
        return any(m.group(0).strip() for pat in self.patterns for m in pat.finditer(caption))

    @classmethod
    def parse(cls, text: str) -> "StyleLexicon":
        sections: dict[str, list[str]] = {"terms": [], "weak_terms": [], "media": [], "patterns": []}
        current = None
        for line in text.splitlines():
            if current != "patterns":
                line = line.split("#", 1)[0]
            line = line.rstrip()
            if not line.strip() or line.lstrip().startswith("#"):
                continue
            header = re.fullmatch(r"\[(\w+)\]", line.strip())
            if header:
                current = header.group(1)
                if current not in sections:
                    raise ValueError(f"unknown lexicon section [{current}]")
                continue
            if current is None:
                raise ValueError(f"lexicon line outside a section: {line!r}")
            sections[current].append(line.strip())

        def table(lines):
            mapping = {}
            for line in lines:
                canon, _, aliases = line.partition(":")
                canon = normalize_term(canon)
                mapping[canon] = canon
                for a in aliases.split(","):
                    if a.strip():
                        mapping[normalize_term(a)] = canon
            return mapping

        return cls(table(sections["terms"]), table(sections["weak_terms"]), sections["media"], sections["patterns"])

    @classmethod
    def load(cls, path: Optional[str | Path] = None) -> "StyleLexicon":
        if path is None:
            text = resources.files("refstyle.data").joinpath("style_lexicon.txt").read_text(encoding="utf-8")
        else:
            text = Path(path).read_text(encoding="utf-8")
        return cls.parse(text)


def _cleanup(caption: str) -> str:
    s = re.sub(r"\s+", " ", caption)
    s = re.sub(r"\s+([,.;:!?])", r"\1", s)
    s = re.sub(r"([,;:])(?:\s*[,;:])+", r"\1", s)
    s = s.strip()
    while True:
        t = re.sub(r"^(?:[,;:]\s*)+", "", s)
        t = re.sub(r"(?:\s*[,;:])+$", "", t)
        t = re.sub(r"\s+(?:and|with|in|by)$", "", t, flags=re.IGNORECASE).strip()
        if t == s:
            return t
        s = t


def destylize(record: CaptionRecord, lexicon: StyleLexicon) -> CaptionRecord:
    """Strip style descriptions from the caption and record them as tags.

    Removal repeats until no pattern matches, so the result is a fixed point.
    Captions that end up empty are kept with a placeholder and flagged.
    """
    caption = record.caption
    tags = list(record.style_tags)
    flags = list(record.flags)
    if not caption.strip():
        if "empty_caption" not in flags:
            flags.append("empty_caption")
        return CaptionRecord(record.image_ref, caption, tags, record.source, flags)
    changed = False
    while True:
        found = lexicon.find(caption)
        if not found:
            break
        m, new_tags = found[0]
        for tag in new_tags:
            if tag not in tags:
                tags.append(tag)
        caption = _cleanup(caption[: m.start()] + " " + caption[m.end():])
        changed = True
    if changed and not caption:
        caption = PLACEHOLDER_CAPTION
        if FLAG_EMPTY not in flags:
            flags.append(FLAG_EMPTY)
    return CaptionRecord(record.image_ref, caption, tags, record.source, flags)


@dataclass
class StyleDistribution:
    counts: dict[str, int]
    total_stylized: int
    total_records: int

    @property
    def proportions(self) -> dict[str, float]:
        if not self.total_stylized:
            return {}
        return {k: v / self.total_stylized for k, v in self.counts.items()}

    def top_k(self, k: int | None = None) -> list[tuple[str, int, float]]:
        """Rows ``(style, count, proportion)``: count descending, then name."""
        props = self.proportions
        rows = sorted(self.counts.items(), key=lambda kv: (-kv[1], kv[0]))
        if k is not None:
            rows = rows[:k]
        return [(name, n, props[name]) for name, n in rows]

    def tail_mass(self, k: int) -> float:
        return float(sum(p for _, _, p in self.top_k()[k:]))

    def summary(self, k: int = 50) -> dict:
        return {
            "total_records": self.total_records,
            "total_stylized": self.total_stylized,
            "top_k": [{"style": s, "count": n, "proportion": p} for s, n, p in self.top_k(k)],
            "tail_mass": self.tail_mass(k),
        }

    def format_table(self, k: int = 50) -> str:
        lines = [f"{'style':<28}{'count':>8}{'proportion':>12}"]
        for name, n, p in self.top_k(k):
            lines.append(f"{name:<28}{n:>8}{p:>12.4f}")
        return "\n".join(lines)


def analyze_distribution(records: Sequence[CaptionRecord]) -> StyleDistribution:
    """Count each stylised record once, under its first style tag."""
    counts = Counter(r.style_tags[0] for r in records if r.style_tags)
    return StyleDistribution(dict(counts), sum(counts.values()), len(records))


def estimate_stylized_fraction(records: Sequence[CaptionRecord], lexicon: StyleLexicon) -> float:
    """Fraction of records whose caption matches any lexicon pattern."""
    if not records:
        return 0.0
    return sum(lexicon.matches(r.caption) for r in records) / len(records)


@dataclass
class ManifestReport:
    n_records: int
    per_source: dict[str, int]
    duplicates_removed: int
    style_coverage: float  # fraction of records with at least one style tag
    flagged: int

    def to_dict(self) -> dict:
        return asdict(self)


def build_manifest(
    sources: Sequence[tuple[str, Sequence[CaptionRecord], float]],
    lexicon: StyleLexicon,
    out_path: str | Path | None = None,
    seed: int = 0,
) -> tuple[list[CaptionRecord], ManifestReport]:
    """Merge sources into one de-stylised manifest.

    ``weight`` in [0, 1] is the fraction of each source kept (a seeded
    subsample). Duplicate ``image_ref`` values keep their first occurrence.
    The merged order is a seeded shuffle, so output is reproducible.
    """
    rng = np.random.default_rng(seed)
    merged: list[CaptionRecord] = []
    for name, records, weight in sources:
        if not 0.0 <= weight <= 1.0:
            raise ValueError(f"source {name!r}: weight must be in [0, 1], got {weight}")
        n_keep = int(round(weight * len(records)))
        keep = sorted(rng.choice(len(records), size=n_keep, replace=False).tolist()) if n_keep else []
        for i in keep:
            r = records[i]
            merged.append(CaptionRecord(r.image_ref, r.caption, list(r.style_tags), name, list(r.flags)))
    seen: set[str] = set()
    unique = []
    for r in merged:
        if r.image_ref in seen:
            continue
        seen.add(r.image_ref)
        unique.append(r)
    dupes = len(merged) - len(unique)
    if dupes:
        log.info("removed %d duplicate image_ref entries", dupes)
    order = rng.permutation(len(unique))
    out = [destylize(unique[i], lexicon) for i in order]
    per_source = Counter(r.source for r in out)
    report = ManifestReport(
        n_records=len(out),
        per_source={name: per_source.get(name, 0) for name, _, _ in sources},
        duplicates_removed=dupes,
        style_coverage=(sum(bool(r.style_tags) for r in out) / len(out)) if out else 0.0,
        flagged=sum(bool(r.flags) for r in out),
    )
    if out_path is not None:
        write_records(out, out_path)
    return out, report
