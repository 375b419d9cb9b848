"""Central-difference gradient checks on the tiny (2-layer) profile in float64."""
import pytest
import torch

from oracles import grad_rel_error
from refstyle.config import tiny_profile
from refstyle.diffusion import denoise_loss
from refstyle.pipeline import StylePipeline

TOL = 1e-3


@pytest.fixture(scope="module")
def setup():
    cfg = tiny_profile()
    pipe = StylePipeline(cfg, seed=0).double()
    enc = pipe.attach_content_encoder()
    torch.manual_seed(1)
    with torch.no_grad():
        for site in pipe.unet.attention_sites().values():
            torch.nn.init.normal_(site.to_v_style.weight, std=0.2)
        for conv in [*enc.zero_down, enc.zero_mid, enc.stem.out]:
            torch.nn.init.normal_(conv.weight, std=0.1)
            torch.nn.init.normal_(conv.bias, std=0.1)
    g = torch.Generator().manual_seed(2)
    L = cfg.image_size
    images = torch.rand(2, 3, L, L, generator=g, dtype=torch.float64)
    x0 = pipe.codec.encode(images)
    eps = torch.randn(x0.shape, generator=g, dtype=torch.float64)
    cmap = (torch.rand(2, 1, L, L, generator=g) > 0.7).double()
    text = pipe.encode_text(["a cat", "a dog"])
    t = torch.tensor([20, 80])

    def loss():
        style = pipe.encode_style(images)
        pred = lambda x_t, tt, _c: pipe.predict_eps(x_t, tt, text, style, 1.0, cmap)
        return denoise_loss(pred, x0, t, eps, None, pipe.schedule)

    return pipe, loss


def test_style_tokens(setup):
    pipe, loss = setup
    assert grad_rel_error(loss, pipe.style_encoder.style_tokens) < TOL


@pytest.mark.parametrize("which", ["to_k_style", "to_v_style"])
@pytest.mark.parametrize("site", ["down.0.attn.attn", "mid.attn.attn", "up.1.attn.attn"])
def test_adapter_projections(setup, which, site):
    pipe, loss = setup
    param = getattr(pipe.unet.attention_sites()[site], which).weight
    assert grad_rel_error(loss, param) < TOL


@pytest.mark.parametrize("name", ["zero_mid.weight", "zero_down.0.weight", "stem.out.weight", "down.1.res.conv1.weight"])
def test_content_encoder(setup, name):
    pipe, loss = setup
    param = dict(pipe.content_encoder.named_parameters())[name]
    assert grad_rel_error(loss, param) < TOL
