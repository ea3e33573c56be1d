"""Small fixtures shared by model, trainer and acceptance tests."""

import numpy as np

from bagel_toy.layout import ImageSpec, TextBlock, build_sample_layout
from bagel_toy.model import ImageInputs, ModelConfig, SampleInputs

SMALL = dict(layers=2, d_model=32, heads=2, head_dim=16, ffn_hidden=64, vocab_size=11)


def small_config(variant="mot", **kw) -> ModelConfig:
    return ModelConfig(**{**SMALL, **kw, "variant": variant})


def random_inputs(layout, cfg: ModelConfig, rng: np.random.Generator) -> SampleInputs:
    """Random token ids, pixels and latents covering every split of ``layout``."""
    n_text = int(sum(s.token_count for s in layout.splits if s.image_id is None))
    images = {}
    for im in layout.images:
        hp, wp = im.h_lat * cfg.downsample, im.w_lat * cfg.downsample
        lat = (im.h_lat, im.w_lat, cfg.latent_channels)
        images[im.image_id] = ImageInputs(pixels=rng.uniform(-1, 1, (hp, wp, 3)),
                                          clean=rng.standard_normal(lat), noised=rng.standard_normal(lat))
    return SampleInputs(rng.integers(0, cfg.vocab_size, n_text), images)


def text_image_layout(h=4, w=4, role="gen", text=3):
    return build_sample_layout([TextBlock(text), ImageSpec(h, w, role)])


def random_layout(rng: np.random.Generator, max_tokens: int = 64, max_images: int = 4):
    """Random sample layout in either regime, with random grouping and condition dropout."""
    from bagel_toy.layout import (DropFlags, LayoutBuilder, Regime, apply_cfg_dropout,
                                  assign_noise_levels)

    regime = list(Regime)[rng.integers(2)]
    n_img = int(rng.integers(0, max_images + 1))
    kinds = ["image"] * n_img + ["text"] * int(rng.integers(1 if n_img == 0 else 0, 5))
    rng.shuffle(kinds)
    sets = [(True, True, True), (True, True, False), (False, False, True), (True, False, True),
            (False, True, True), (False, True, False), (True, False, False)]
    b = LayoutBuilder(regime)
    for kind in kinds:
        before = (list(b.splits), list(b.images), b.cursor)
        if kind == "text":
            b.text(int(rng.integers(1, 7)))
        else:
            h, w = [(2, 2), (2, 4), (4, 2), (4, 4)][rng.integers(4)]
            flags = DropFlags(*(bool(x) for x in rng.random(3) < 0.2))
            b.image(h, w, *sets[rng.integers(len(sets))], dropped=flags)
        if sum(s.token_count for s in b.splits) > max_tokens:
            b.splits, b.images, b.cursor = before
            break
    if not b.splits:
        b.text(1)
    layout = b.build()
    if regime is Regime.DIFFUSION_FORCING:
        layout = assign_noise_levels(layout, float(rng.random()), rng)
    return apply_cfg_dropout(layout, rng, *rng.uniform(0, 0.5, 3))
