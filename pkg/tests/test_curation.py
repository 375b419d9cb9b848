import json

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from refstyle.curation import (
    FLAG_EMPTY,
    PLACEHOLDER_CAPTION,
    CaptionRecord,
    StyleLexicon,
    analyze_distribution,
    build_manifest,
    destylize,
    estimate_stylized_fraction,
    read_records,
)


@pytest.fixture(scope="module")
def lex():
    return StyleLexicon.load()


def _d(caption, lex):
    return destylize(CaptionRecord("x", caption), lex)


@pytest.mark.parametrize(
    "caption, want, tags",
    [
        ("a movie poster for The Witch in the style of Arthur rackham", "a movie poster for The Witch", ["arthur rackham"]),
        ("an oil painting of a cat", "a cat", ["oil painting"]),
        ("a watercolor painting of a dog", "a dog", ["watercolor"]),
        ("a castle, pixel art", "a castle", ["pixel art"]),
        ("a street in cyberpunk style", "a street", ["cyberpunk"]),
        ("a fox in the style of Monet and Hokusai", "a fox", ["monet", "hokusai"]),
        ("a painting of a cat", "a cat", ["painting"]),
    ],
)
def test_destylize_examples(lex, caption, want, tags):
    r = _d(caption, lex)
    assert r.caption == want
    assert r.style_tags == tags


@pytest.mark.parametrize("caption", ["a man painting a fence", "a statue of a man", "an icon on a phone screen"])
def test_ambiguous_words_kept(lex, caption):
    r = _d(caption, lex)
    assert r.caption == caption and r.style_tags == []


def test_empty_results_flagged(lex):
    r = _d("watercolor", lex)
    assert r.caption == PLACEHOLDER_CAPTION and FLAG_EMPTY in r.flags
    assert "empty_caption" in _d("   ", lex).flags


_WORDS = ["a", "cat", "dog", "in", "the", "style", "of", "watercolor", "painting", "monet", ",", "and",
          "pixel", "art", "statue", "abstract", "with", "low", "poly", "aesthetic", "an", "oil"]


@settings(max_examples=200, deadline=None)
@given(st.lists(st.sampled_from(_WORDS), min_size=1, max_size=12))
def test_idempotent_and_clean(words):
    lex = StyleLexicon.load()
    r1 = destylize(CaptionRecord("x", " ".join(words)), lex)
    r2 = destylize(r1, lex)
    assert r2.caption == r1.caption
    assert r2.style_tags == r1.style_tags
    if r1.caption != PLACEHOLDER_CAPTION:
        assert not lex.matches(r1.caption)


def test_custom_lexicon_file(tmp_path):
    p = tmp_path / "lex.txt"
    p.write_text("[terms]\nvaporwave: vapor wave\n[patterns]\n,?\\s*{TERM}\n")
    lex = StyleLexicon.load(p)
    assert destylize(CaptionRecord("x", "a mall, vapor wave"), lex).style_tags == ["vaporwave"]
    with pytest.raises(ValueError):
        StyleLexicon.parse("[bogus]\nx\n")


def test_distribution_counts_first_tag_and_orders(lex):
    recs = [CaptionRecord(str(i), "c", tags) for i, tags in enumerate(
        [["b"], ["a"], ["a", "b"], ["c"], [], ["b"]])]
    d = analyze_distribution(recs)
    assert d.total_stylized == 5 and d.total_records == 6
    # ties broken by name
    assert [row[:2] for row in d.top_k()] == [("a", 2), ("b", 2), ("c", 1)]
    assert abs(sum(d.proportions.values()) - 1) < 1e-12
    assert d.tail_mass(1) == pytest.approx(3 / 5)


def test_stylized_fraction(lex):
    recs = [CaptionRecord("1", "a cat, watercolor"), CaptionRecord("2", "a cat"),
            CaptionRecord("3", "a dog"), CaptionRecord("4", "a dog in the style of Klimt")]
    assert estimate_stylized_fraction(recs, lex) == 0.5
    assert estimate_stylized_fraction([], lex) == 0.0


def _sources():
    a = [CaptionRecord(f"img{i}", f"a cat number {i}, watercolor") for i in range(10)]
    b = [CaptionRecord(f"img{i}", f"a dog {i}") for i in range(5, 15)]
    return [("a", a, 1.0), ("b", b, 1.0)]


def test_build_manifest_dedupe_and_determinism(tmp_path, lex):
    out1, rep = build_manifest(_sources(), lex, tmp_path / "m1.jsonl", seed=3)
    out2, _ = build_manifest(_sources(), lex, tmp_path / "m2.jsonl", seed=3)
    assert (tmp_path / "m1.jsonl").read_bytes() == (tmp_path / "m2.jsonl").read_bytes()
    assert rep.n_records == 15 and rep.duplicates_removed == 5
    assert rep.per_source == {"a": 10, "b": 5}
    assert all(not lex.matches(r.caption) for r in out1)
    assert sorted(r.image_ref for r in read_records(tmp_path / "m1.jsonl")) == sorted(f"img{i}" for i in range(15))
    line = (tmp_path / "m1.jsonl").read_text().splitlines()[0]
    assert list(json.loads(line)) == sorted(json.loads(line))


def test_build_manifest_weights(lex):
    src = [("a", [CaptionRecord(str(i), "x") for i in range(100)], 0.3)]
    out, rep = build_manifest(src, lex, seed=0)
    assert rep.n_records == 30
    with pytest.raises(ValueError):
        build_manifest([("a", [], 1.5)], lex)
