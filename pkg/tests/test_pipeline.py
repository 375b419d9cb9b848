import numpy as np
import pytest
import torch

from refstyle import checkpoint as ckpt
from refstyle.config import BackendUnavailable, ModelConfig, desk_profile, get_profile, tiny_profile
from refstyle.pipeline import HashTextEncoder, LatentCodec, StylePipeline, from_uint8, to_uint8
from refstyle.fixtures import shapes_image, style_image


@pytest.fixture(scope="module")
def tiny():
    return tiny_profile()


def _perturb_adapter(pipe, seed=0):
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in pipe.unet.adapter_parameters():
            p.copy_(torch.randn(p.shape, generator=g) * 0.3)


def test_scale_zero_matches_no_adapter_baseline(tiny):
    styled = StylePipeline(tiny, seed=0)
    plain = StylePipeline(tiny, seed=0, style_adapter=False)
    _perturb_adapter(styled)
    ref = from_uint8(style_image("waves", tiny.image_size, 0))
    x = torch.randn(1, 4, 8, 8)
    text = styled.encode_text("a dog")
    style = styled.encode_style(ref)
    with torch.no_grad():
        assert torch.equal(styled.predict_eps(x, 500, text, style, 0.0), plain.predict_eps(x, 500, text))
    a = styled.generate(ref, "a dog", steps=4, scale=0.0, seed=1)["image"]
    b = plain.generate(None, "a dog", steps=4, scale=0.0, seed=1)["image"]
    assert torch.equal(a, b)
    c = styled.generate(ref, "a dog", steps=4, scale=1.0, seed=1)["image"]
    assert not torch.equal(a, c)


def test_generation_deterministic(tiny):
    pipe = StylePipeline(tiny, seed=0)
    ref = from_uint8(style_image("dots", tiny.image_size, 0))
    a = pipe.generate(ref, "a cat", steps=3, seed=5, sampler="plms")
    b = pipe.generate(ref, "a cat", steps=3, seed=5, sampler="plms")
    assert torch.equal(a["latent"], b["latent"])
    assert a["image"].shape == (1, 3, tiny.image_size, tiny.image_size)


def test_content_requires_encoder(tiny):
    pipe = StylePipeline(tiny, seed=0)
    ref = from_uint8(style_image("dots", tiny.image_size, 0))
    cmap = torch.ones(1, 1, tiny.image_size, tiny.image_size)
    with pytest.raises(RuntimeError, match="content-fusion"):
        pipe.generate(ref, "x", cmap, steps=2)


def test_content_identity_at_init_end_to_end(tiny):
    pipe = StylePipeline(tiny, seed=0)
    _perturb_adapter(pipe)
    ref = from_uint8(style_image("dots", tiny.image_size, 0))
    from refstyle.content import content_map

    cm = torch.from_numpy(content_map(shapes_image(tiny.image_size, 0)).mask).float()[None, None]
    before = pipe.generate(ref, "a cat", steps=3, seed=2)["image"]
    pipe.attach_content_encoder(seed=9)
    after = pipe.generate(ref, "a cat", cm, steps=3, seed=2)["image"]
    assert torch.equal(before, after)


def test_codec_orthonormal_roundtrip():
    codec = LatentCodec(4).double()
    basis = codec.basis
    torch.testing.assert_close(basis @ basis.T, torch.eye(4, dtype=torch.float64))
    z = torch.randn(2, 4, 3, 3, dtype=torch.float64) * 0.1
    torch.testing.assert_close(codec.encode(codec.decode(z)), z)
    img = torch.full((1, 3, 8, 8), 0.25, dtype=torch.float64)
    np.testing.assert_allclose(codec.decode(codec.encode(img)).numpy(), img.numpy())


def test_uint8_roundtrip():
    arr = np.random.default_rng(0).integers(0, 256, (2, 8, 8, 3), dtype=np.uint8)
    np.testing.assert_array_equal(to_uint8(from_uint8(arr)), arr)


def test_text_encoder_is_fixed_and_null_is_empty_prompt(tiny):
    enc = HashTextEncoder(tiny.text)
    assert torch.equal(enc("A Dog"), enc("a dog"))
    assert not torch.equal(enc("a dog"), enc("a cat"))
    assert enc.table.requires_grad is False
    pipe = StylePipeline(tiny)
    assert torch.equal(pipe.null_text(2)[0], pipe.encode_text("")[0])


def test_checkpoint_roundtrip(tmp_path, tiny):
    pipe = StylePipeline(tiny, seed=3)
    _perturb_adapter(pipe)
    pipe.attach_content_encoder()
    hashes = ckpt.save_pipeline(pipe, tmp_path, ("base", "style_encoder", "adapter", "content_fusion"))
    assert hashes == ckpt.checkpoint_hashes(tmp_path)
    loaded = ckpt.load_pipeline(tmp_path, content=True)
    for a, b in [(pipe.unet, loaded.unet), (pipe.style_encoder, loaded.style_encoder),
                 (pipe.content_encoder, loaded.content_encoder)]:
        sa, sb = a.state_dict(), b.state_dict()
        assert sa.keys() == sb.keys() and all(torch.equal(sa[k], sb[k]) for k in sa)
    base = ckpt.load_tensors(tmp_path / "base.pt", "base")
    assert not any("style" in k for k in base)
    with pytest.raises(ValueError, match="expected"):
        ckpt.load_tensors(tmp_path / "base.pt", "adapter")


def test_missing_content_checkpoint(tmp_path, tiny):
    ckpt.save_pipeline(StylePipeline(tiny), tmp_path)
    with pytest.raises(FileNotFoundError, match="content-fusion"):
        ckpt.load_pipeline(tmp_path, content=True)


def test_config_roundtrip_and_profiles(tmp_path):
    cfg = desk_profile()
    cfg.save(tmp_path / "c.json")
    assert ModelConfig.load(tmp_path / "c.json") == cfg
    assert get_profile("tiny") == tiny_profile()
    with pytest.raises(BackendUnavailable, match="desk"):
        get_profile("pretrained")
    bad = desk_profile()
    bad.style.out_width = 32
    with pytest.raises(ValueError, match="out_width"):
        bad.validate()
