"""Hypothesis strategies for random interleaved layouts."""

import dataclasses

from hypothesis import strategies as st

from bagel_toy.layout import DropFlags, LayoutBuilder, PackedSequence, Regime


@st.composite
def sample_layouts(draw, max_tokens: int = 64, max_images: int = 4, regime=None, drops: bool = True):
    regime = draw(st.sampled_from(list(Regime))) if regime is None else regime
    n_img = draw(st.integers(0, max_images))
    n_txt = draw(st.integers(1 if n_img == 0 else 0, 4))
    order = draw(st.permutations(["image"] * n_img + ["text"] * n_txt))
    b = LayoutBuilder(regime)
    group, t = -1, 0.0
    for item in order:
        before = (list(b.splits), list(b.images), b.cursor)
        if item == "text":
            b.text(draw(st.integers(1, 6)))
        else:
            h, w = draw(st.sampled_from([(2, 2), (2, 4), (4, 2), (4, 4)]))
            vit, clean, noised = draw(st.sampled_from(
                [(True, True, True), (True, True, False), (False, False, True), (True, False, True),
                 (False, True, True), (False, True, False), (True, False, False)]))
            merge = b.images and draw(st.booleans())
            if not merge:
                group += 1
                t = draw(st.sampled_from([0.0, 0.25, 0.5, 1.0]))
            flags = DropFlags(*draw(st.tuples(st.booleans(), st.booleans(), st.booleans()))) if drops else DropFlags()
            b.image(h, w, vit, clean, noised, noise_level=t, group_id=group, dropped=flags)
        if sum(s.token_count for s in b.splits) > max_tokens:
            b.splits, b.images, b.cursor = before
            break
    if not b.splits:
        b.text(1)
    return b.build()


@st.composite
def packed_sequences(draw, max_tokens: int = 64, max_samples: int = 3, **kw):
    samples, total = [], 0
    for _ in range(draw(st.integers(1, max_samples))):
        s = draw(sample_layouts(max_tokens=max_tokens, **kw))
        if samples and total + s.n_tokens > max_tokens:
            break
        samples.append(s)
        total += s.n_tokens
    return PackedSequence(tuple(samples))


def without_drops(layout):
    return layout.with_images(dataclasses.replace(im, dropped=DropFlags()) for im in layout.images)
