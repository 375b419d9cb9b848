"""Library-level tour: patches, style encoding, the style scale, content maps.

Run with ``python3 demos/api_tour.py``. Uses an untrained tiny pipeline, so the
images are noise-like; the point is the shapes and the invariants.
"""
import numpy as np
import torch

from refstyle.config import tiny_profile
from refstyle.content import content_map
from refstyle.curation import StyleLexicon, destylize, CaptionRecord
from refstyle.fixtures import shapes_image, style_image
from refstyle.patches import partition
from refstyle.pipeline import StylePipeline, from_uint8

cfg = tiny_profile()
ref_arr = style_image("rings", cfg.image_size, 0)

ps = partition(ref_arr)
print("patches per scale:", len(ps.large), len(ps.medium), len(ps.small), "covered:", ps.covered_fraction())

pipe = StylePipeline(cfg, seed=0)
ref = from_uint8(ref_arr)
print("style embedding shape:", tuple(pipe.encode_style(ref).shape))

plain = StylePipeline(cfg, seed=0, style_adapter=False)
a = pipe.generate(ref, "a boat", steps=10, scale=0.0, seed=3)["image"]
b = plain.generate(None, "a boat", steps=10, scale=0.0, seed=3)["image"]
print("scale 0 equals the no-adapter model:", torch.equal(a, b))

cm = content_map(shapes_image(cfg.image_size, 0))
print("content map coverage:", float(cm.mask.mean()), cm.provenance)
pipe.attach_content_encoder()
c = pipe.generate(ref, "a boat", torch.from_numpy(cm.mask).float()[None, None], steps=10, seed=3)["image"]
print("fresh content encoder changes nothing:", torch.equal(c, pipe.generate(ref, "a boat", steps=10, seed=3)["image"]))

lex = StyleLexicon.load()
for cap in ["a watercolor painting of a harbour", "a man painting a fence"]:
    r = destylize(CaptionRecord("x", cap), lex)
    print(f"{cap!r} -> {r.caption!r} tags={r.style_tags}")
print("image range:", np.round([float(a.min()), float(a.max())], 3))
