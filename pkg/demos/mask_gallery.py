"""Print the attention masks of a few layouts next to their token map.

    python demos/mask_gallery.py
"""

import dataclasses

import numpy as np

from bagel_toy.layout import DropFlags, ImageSpec, Modality, TextBlock, build_sample_layout
from bagel_toy.mask import build_mask, mask_stats, oracle_mask

GLYPH = {Modality.TEXT: "t", Modality.VIT: "v", Modality.VAE_CLEAN: "c", Modality.VAE_NOISED: "n"}


def show(title, layout):
    mask = build_mask(layout)
    assert np.array_equal(mask.permitted, oracle_mask(layout).permitted)
    kinds = "".join(GLYPH[s.kind] * s.token_count for s in layout.splits)
    print(f"\n{title}\n{layout.describe()}\n   {kinds}")
    for k, row in zip(kinds, mask.permitted):
        print(f" {k} " + "".join("#" if x else "." for x in row))
    print(" ", mask_stats(mask))


show("text then an image under generation",
     build_sample_layout([TextBlock(3), ImageSpec(2, 4, "gen"), TextBlock(2)]))
show("conditioning image then a target",
     build_sample_layout([TextBlock(2), ImageSpec(2, 2, "cond"), ImageSpec(2, 2, "target")]))

layout = build_sample_layout([TextBlock(3), ImageSpec(2, 2, "gen")])
dropped = layout.with_images([dataclasses.replace(im, dropped=DropFlags(text_ctx=True)) for im in layout.images])
show("same layout with the caption dropped for the image", dropped)

show("diffusion forcing: noisy predecessors are the context",
     build_sample_layout([TextBlock(2), ImageSpec(2, 2, "target"), ImageSpec(2, 2, "target")],
                         "diffusion_forcing"))
