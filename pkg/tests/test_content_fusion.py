import pytest
import torch

from refstyle.config import tiny_profile
from refstyle.content_fusion import ContentFusionEncoder, ContentResiduals, inject_content
from refstyle.pipeline import StylePipeline


@pytest.fixture
def pipe():
    return StylePipeline(tiny_profile(), seed=0).double()


def _inputs(pipe, batch=2, seed=0):
    g = torch.Generator().manual_seed(seed)
    d = pipe.cfg.denoiser
    L = pipe.cfg.image_size
    x = torch.randn(batch, d.latent_channels, d.latent_size, d.latent_size, generator=g, dtype=torch.float64)
    style = torch.randn(batch, pipe.cfg.style.n_style_tokens, d.text_width, generator=g, dtype=torch.float64)
    cmap = (torch.rand(batch, 1, L, L, generator=g) > 0.8).double()
    t = torch.tensor([10, 70])[:batch]
    return x, style, cmap, t


def test_reversed_pairing():
    n = 3
    latents = {"mid": torch.zeros(1), "up": [torch.zeros(1) for _ in range(n)]}
    res = ContentResiduals(torch.full((1,), 100.0), [torch.full((1,), float(j)) for j in range(1, n + 1)])
    out = inject_content(latents, res)
    assert out["mid"].item() == 100.0
    # up block i gets down residual L - i + 1
    assert [u.item() for u in out["up"]] == [3.0, 2.0, 1.0]


def test_shape_mismatch_prints_both_shapes():
    latents = {"mid": torch.zeros(1, 4, 2, 2), "up": [torch.zeros(1, 4, 2, 2)]}
    res = ContentResiduals(torch.zeros(1, 4, 2, 2), [torch.zeros(1, 4, 3, 3)])
    with pytest.raises(ValueError, match=r"\(1, 4, 2, 2\).*\(1, 4, 3, 3\)"):
        inject_content(latents, res)
    with pytest.raises(ValueError, match="count"):
        inject_content(latents, ContentResiduals(torch.zeros(1, 4, 2, 2), []))


def test_zero_init_residuals_are_exactly_zero(pipe):
    enc = pipe.attach_content_encoder()
    x, style, cmap, t = _inputs(pipe)
    res = enc(cmap, style, x, t)
    assert res.n_layers == pipe.unet.n_layers
    assert all(torch.count_nonzero(r) == 0 for r in [res.mid, *res.down])
    shapes = pipe.unet.skip_shapes(2)
    assert tuple(res.mid.shape) == shapes["mid"]
    assert [tuple(r.shape) for r in res.down] == shapes["down"]


def test_attaching_encoder_is_identity_at_init(pipe):
    x, style, cmap, t = _inputs(pipe)
    text = pipe.encode_text(["a", "b"])
    before = pipe.predict_eps(x, t, text, style, 1.0)
    pipe.attach_content_encoder()
    after = pipe.predict_eps(x, t, text, style, 1.0, cmap)
    assert torch.equal(before, after)


def test_residuals_depend_on_style_after_projection_is_nonzero(pipe):
    enc = pipe.attach_content_encoder()
    for conv in [*enc.zero_down, enc.zero_mid, enc.stem.out]:
        torch.nn.init.normal_(conv.weight, std=0.1)
    x, style, cmap, t = _inputs(pipe)
    with torch.no_grad():
        a = enc(cmap, style, x, t)
        b = enc(cmap, style + 0.1, x, t)
    assert not torch.allclose(a.mid, b.mid)
    assert not torch.allclose(a.down[0], b.down[0])


def test_encoder_has_no_style_branch_and_copies_weights(pipe):
    enc = pipe.attach_content_encoder()
    assert not any(getattr(m, "has_style_branch", False) for m in enc.modules())
    assert torch.equal(enc.conv_in.weight, pipe.unet.conv_in.weight)
    assert enc.conv_in.weight.data_ptr() != pipe.unet.conv_in.weight.data_ptr()


def test_incompatible_denoiser_rejected():
    cfg = tiny_profile()
    other = tiny_profile()
    other.denoiser.widths = (8, 16, 16)
    other.denoiser.latent_size = 8
    enc = ContentFusionEncoder(StylePipeline(cfg).unet, cfg.image_size)
    with pytest.raises(ValueError, match="down layers"):
        enc.check_compatible(StylePipeline(other).unet)
