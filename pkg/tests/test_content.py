import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import brute_dilate
from refstyle.content import HEDBackend, binarize_and_dilate, build_hed, content_map, extract_edges, gradient_edges


def test_constant_image_has_no_edges():
    assert not gradient_edges(np.full((16, 16, 3), 77, np.uint8)).any()


def test_vertical_step_concentrates_on_step_columns():
    img = np.zeros((16, 16), np.float64)
    img[:, 8:] = 1.0
    e = gradient_edges(img)
    assert set(np.nonzero(e.sum(0))[0].tolist()) == {7, 8}
    # unit-contrast straight step scores exactly 1
    np.testing.assert_allclose(e[:, 7:9], 1.0)


def test_edge_range():
    rng = np.random.default_rng(0)
    e = gradient_edges(rng.integers(0, 256, (32, 32, 3), dtype=np.uint8))
    assert e.min() >= 0 and e.max() <= 1


def test_iterations_zero_is_pure_threshold():
    rng = np.random.default_rng(1)
    edges = rng.random((20, 20))
    cm = binarize_and_dilate(edges, 0.7, 1, 0)
    np.testing.assert_array_equal(cm.mask, (edges >= 0.7).astype(np.uint8))


def test_single_pixel_gives_3x3_block():
    edges = np.zeros((7, 7))
    edges[3, 3] = 1.0
    mask = binarize_and_dilate(edges, 0.5, 1, 1).mask
    want = np.zeros((7, 7), np.uint8)
    want[2:5, 2:5] = 1
    np.testing.assert_array_equal(mask, want)


def test_matches_brute_force_dilation():
    rng = np.random.default_rng(2)
    for radius, iters in [(1, 1), (1, 2), (2, 1), (2, 3)]:
        edges = rng.random((15, 17)) ** 4
        got = binarize_and_dilate(edges, 0.6, radius, iters).mask.astype(bool)
        np.testing.assert_array_equal(got, brute_dilate(edges >= 0.6, radius, iters))


def test_monotonicity_on_random_maps():
    rng = np.random.default_rng(3)
    for _ in range(100):
        edges = rng.random((24, 24)) ** 3
        t1, t2 = sorted(rng.uniform(0.05, 0.95, 2))
        lo_t, hi_t = binarize_and_dilate(edges, t1, 1, 2).mask, binarize_and_dilate(edges, t2, 1, 2).mask
        assert np.all(hi_t <= lo_t)
        k = int(rng.integers(0, 3))
        fewer, more = binarize_and_dilate(edges, t1, 1, k).mask, binarize_and_dilate(edges, t1, 1, k + 1).mask
        assert np.all(fewer <= more)
        assert set(np.unique(more)) <= {0, 1}


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000), t=st.floats(0.05, 0.95), r=st.integers(1, 3), k=st.integers(0, 3))
def test_dilation_superset_property(seed, t, r, k):
    edges = np.random.default_rng(seed).random((12, 12))
    cm = binarize_and_dilate(edges, t, r, k)
    assert np.all(cm.mask >= (edges >= t))
    assert cm.provenance == {"edge_backend": "unknown", "threshold": t, "dilation_radius": r, "iterations": k}


@pytest.mark.parametrize("kw", [dict(threshold=0.0), dict(threshold=1.0), dict(radius=0), dict(iterations=-1)])
def test_parameter_validation(kw):
    args = dict(threshold=0.5, radius=1, iterations=1) | kw
    with pytest.raises(ValueError):
        binarize_and_dilate(np.zeros((4, 4)), **args)


def test_content_map_deterministic_and_sized():
    img = np.random.default_rng(4).integers(0, 256, (32, 48, 3), dtype=np.uint8)
    a, b = content_map(img), content_map(img)
    assert a.mask.shape == (32, 48)
    np.testing.assert_array_equal(a.mask, b.mask)
    assert set(np.unique(a.to_png_array())) <= {0, 255}


def test_missing_hed_weights_names_fallback(tmp_path):
    with pytest.raises(FileNotFoundError, match="gradient"):
        extract_edges(np.zeros((8, 8, 3)), backend="hed", weights=tmp_path / "nope.pth")
    with pytest.raises(ValueError):
        extract_edges(np.zeros((8, 8, 3)), backend="canny")


def test_hed_backend_runs_with_local_weights(tmp_path):
    torch.manual_seed(0)
    path = tmp_path / "hed.pth"
    torch.save(build_hed().state_dict(), path)
    e = HEDBackend(path)(np.random.default_rng(0).integers(0, 256, (32, 32, 3), dtype=np.uint8))
    assert e.shape == (32, 32) and e.min() >= 0 and e.max() <= 1
