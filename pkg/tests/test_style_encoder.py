import numpy as np
import pytest
import torch

from refstyle.config import desk_profile, tiny_profile
from refstyle.patches import N_PATCHES, cell_layout
from refstyle.style_encoder import StyleEncoder


def _encoder(cfg=None, seed=0):
    torch.manual_seed(seed)
    return StyleEncoder((cfg or tiny_profile()).style).double()


def _perm_rel_err(enc, fp, perm):
    with torch.no_grad():
        a = enc.encode_style(fp)
        b = enc.encode_style(fp[:, perm])
    return float((a - b).norm() / a.norm())


def test_output_shape_and_row_count():
    cfg = tiny_profile()
    enc = _encoder(cfg)
    imgs = torch.rand(2, 3, cfg.image_size, cfg.image_size, dtype=torch.float64)
    fp = enc.embed_patches(imgs)
    assert fp.shape == (2, N_PATCHES, cfg.style.width)
    out = enc(imgs)
    assert out.shape == (2, cfg.style.n_style_tokens, cfg.style.out_width)
    assert enc.encode_style(fp[0]).shape == (cfg.style.n_style_tokens, cfg.style.out_width)


def test_expert_depths():
    enc = _encoder(desk_profile())
    assert [len(enc.experts[s].blocks) for s in ("large", "medium", "small")] == [6, 5, 4]


def test_permutation_invariance_float64():
    enc = _encoder()
    rng = np.random.default_rng(0)
    fp = torch.from_numpy(rng.standard_normal((1, N_PATCHES, enc.cfg.width)))
    for _ in range(20):
        assert _perm_rel_err(enc, fp, torch.from_numpy(rng.permutation(N_PATCHES))) < 1e-5


def test_permutation_invariance_float32():
    torch.manual_seed(0)
    enc = StyleEncoder(tiny_profile().style)
    fp = torch.randn(1, N_PATCHES, enc.cfg.width)
    assert _perm_rel_err(enc, fp, torch.randperm(N_PATCHES)) < 1e-3


def test_zero_inputs_with_identity_blocks_give_mlp_of_zero():
    enc = _encoder()
    enc.identity_init_blocks()
    with torch.no_grad():
        enc.style_tokens.zero_()
        out = enc.encode_style(torch.zeros(1, N_PATCHES, enc.cfg.width, dtype=torch.float64))
        want = enc.proj(torch.zeros(enc.cfg.width, dtype=torch.float64))
    torch.testing.assert_close(out[0], want.expand_as(out[0]), rtol=0, atol=1e-12)


def test_patch_locality():
    """A pixel inside small cell (0, 6) only, which no large or medium cell covers."""
    cfg = tiny_profile()
    enc = _encoder(cfg)
    L = cfg.image_size
    s = L // 16
    assert (0, 6) in cell_layout("small")
    row = 8 + 16 + cell_layout("small").index((0, 6))
    img = torch.rand(1, 3, L, L, dtype=torch.float64)
    img2 = img.clone()
    img2[0, :, 0, 6 * s] += 0.5
    with torch.no_grad():
        diff = (enc.embed_patches(img) - enc.embed_patches(img2)).abs().sum(-1)[0]
    changed = torch.nonzero(diff > 0).flatten().tolist()
    assert changed == [row]


def test_nan_reports_block():
    enc = _encoder()
    with torch.no_grad():
        enc.blocks[0].fc2.bias.fill_(float("nan"))
    with pytest.raises(FloatingPointError, match="block 0"):
        enc.encode_style(torch.zeros(1, N_PATCHES, enc.cfg.width, dtype=torch.float64))


def test_width_mismatch():
    enc = _encoder()
    with pytest.raises(ValueError):
        enc.encode_style(torch.zeros(1, N_PATCHES, enc.cfg.width + 1, dtype=torch.float64))


def test_null_embedding_is_learned_parameter():
    enc = _encoder()
    assert enc.null_style.requires_grad
    assert enc.null_embedding(3).shape == (3, enc.cfg.n_style_tokens, enc.cfg.out_width)
