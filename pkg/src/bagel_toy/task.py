"""Synthetic compositional task: coloured shapes on a 2 x 2 grid.

A caption names a (colour, shape) pair for each of the four cells in
reading order. Images are rendered on whole 8 x 8 pixel blocks with
values in {-1, +1}, so they lie exactly in the toy VAE's retained
subspace and can be decoded back to attributes without loss.
"""

from __future__ import annotations

import hashlib
from collections import OrderedDict
from dataclasses import dataclass, field
from itertools import product

import numpy as np

from .encoders import ToyVAE, frozen_vit
from .flow import noise_latents, sample_timestep
from .layout import (LayoutBuilder, Regime, SampleLayout, apply_cfg_dropout, assign_noise_levels)
from .model import ImageInputs, SampleInputs

COLORS = {
    "red": (1.0, -1.0, -1.0),
    "green": (-1.0, 1.0, -1.0),
    "blue": (-1.0, -1.0, 1.0),
    "yellow": (1.0, 1.0, -1.0),
}


def _shape_masks() -> dict[str, np.ndarray]:
    square = np.zeros((4, 4), bool)
    square[1:3, 1:3] = True
    frame = np.ones((4, 4), bool)
    frame[1:3, 1:3] = False
    cross = np.eye(4, dtype=bool) | np.eye(4, dtype=bool)[::-1]
    return {"square": square, "frame": frame, "cross": cross}


SHAPES = _shape_masks()
SPECIALS = ("<pad>", "<bos>", "<eos>")
VOCAB = SPECIALS + tuple(COLORS) + tuple(SHAPES)
TOKEN = {w: i for i, w in enumerate(VOCAB)}
PAD, BOS, EOS = 0, 1, 2
CELLS = 4
BLOCK = 8
LATENT_SCALE = 1.0 / 8.0

Caption = tuple  # ((color, shape), ...) per cell


def all_captions() -> list[Caption]:
    cell = list(product(COLORS, SHAPES))
    return [tuple(c) for c in product(cell, repeat=CELLS)]


def caption_tokens(caption: Caption) -> list[int]:
    return [TOKEN[w] for pair in caption for w in pair]


def caption_text(ids) -> str:
    return " ".join(VOCAB[i] if 0 <= i < len(VOCAB) else f"<{i}>" for i in ids)


def parse_caption(words: str | list[str]) -> Caption:
    words = words.split() if isinstance(words, str) else list(words)
    if len(words) != 2 * CELLS:
        raise ValueError(f"a caption needs {2 * CELLS} words, got {len(words)}")
    pairs = tuple(zip(words[0::2], words[1::2]))
    for c, s in pairs:
        if c not in COLORS or s not in SHAPES:
            raise ValueError(f"unknown attribute pair {c} {s}")
    return pairs


def render(caption: Caption, size: int = 64) -> np.ndarray:
    """Pixels in {-1, +1}, shape ``(size, size, 3)``."""
    half = size // 2
    blocks = half // BLOCK
    if blocks != 4:
        raise ValueError("shapes are defined on a 4 x 4 block grid per cell (size 64)")
    img = -np.ones((size, size, 3))
    for cell, (color, shape) in enumerate(caption):
        r0, c0 = (cell // 2) * half, (cell % 2) * half
        m = np.kron(SHAPES[shape], np.ones((BLOCK, BLOCK), bool))
        img[r0:r0 + half, c0:c0 + half][m] = COLORS[color]
    return img


def decode_attributes(image: np.ndarray) -> Caption:
    """Nearest (colour, shape) per cell of a rendered or generated image."""
    size = image.shape[0]
    half = size // 2
    colors = np.array(list(COLORS.values()))
    templates = {k: v.astype(float) for k, v in SHAPES.items()}
    out = []
    for cell in range(CELLS):
        r0, c0 = (cell // 2) * half, (cell % 2) * half
        patch = image[r0:r0 + half, c0:c0 + half]
        means = patch.reshape(4, BLOCK, 4, BLOCK, 3).mean(axis=(1, 3))
        on = means.max(axis=-1) > 0.0
        shape = min(templates, key=lambda k: np.abs(templates[k] - on).sum())
        sel = means[on] if on.any() else means.reshape(-1, 3)
        avg = sel.mean(axis=0)
        color = list(COLORS)[int(np.argmin(((colors - avg) ** 2).sum(axis=1)))]
        out.append((color, shape))
    return tuple(out)


def attribute_accuracy(pred: Caption, true: Caption) -> float:
    hits = sum((p[0] == t[0]) + (p[1] == t[1]) for p, t in zip(pred, true))
    return hits / (2 * len(true))


@dataclass
class Sample:
    kind: str
    layout: SampleLayout
    inputs: SampleInputs
    ce_targets: np.ndarray
    x0: dict[int, np.ndarray] = field(default_factory=dict)
    eps: dict[int, np.ndarray] = field(default_factory=dict)
    captions: tuple = ()

    def fingerprint(self, h) -> None:
        h.update(self.kind.encode())
        h.update(self.layout.describe().encode())
        h.update(np.asarray(self.inputs.text_ids, dtype=np.int64).tobytes())
        for im in self.layout.images:
            h.update(np.float64(im.noise_level).tobytes())
            h.update(repr(im.dropped).encode())
        for k in sorted(self.eps):
            h.update(self.eps[k].tobytes())


class ToyTask:
    """Caption/image pairs with a deterministic held-out split."""

    def __init__(self, seed: int = 1234, holdout: int = 512, h_lat: int = 8, w_lat: int = 8,
                 vit_patch: int = 16, vit_dim: int = 32, vit_seed: int = 0, cache_size: int = 4096):
        self.h_lat, self.w_lat = h_lat, w_lat
        self.vit_patch = vit_patch
        self.vae = ToyVAE(scale=LATENT_SCALE)
        self.vit = frozen_vit(vit_patch, vit_dim, vit_seed)
        caps = all_captions()
        perm = np.random.default_rng(seed).permutation(len(caps))
        self.heldout = [caps[i] for i in perm[:holdout]]
        self.train = [caps[i] for i in perm[holdout:]]
        self._cache: OrderedDict[Caption, tuple] = OrderedDict()
        self.cache_size = cache_size

    @property
    def vocab_size(self) -> int:
        return len(VOCAB)

    def assets(self, caption: Caption) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """(pixels, clean latent, frozen ViT features); the encodings are LRU-cached."""
        pixels = render(caption, self.h_lat * BLOCK)
        got = self._cache.get(caption)
        if got is None:
            got = (self.vae.encode(pixels), self.vit(pixels))
            self._cache[caption] = got
            if len(self._cache) > self.cache_size:
                self._cache.popitem(last=False)
        else:
            self._cache.move_to_end(caption)
        return (pixels,) + got

    def draw_caption(self, rng: np.random.Generator, heldout: bool = False) -> Caption:
        pool = self.heldout if heldout else self.train
        return pool[int(rng.integers(len(pool)))]

    def prompt_ids(self, caption: Caption) -> list[int]:
        return [BOS] + caption_tokens(caption) + [EOS]

    # sample builders --------------------------------------------------------

    def understanding(self, caption: Caption) -> Sample:
        pixels, clean, feats = self.assets(caption)
        b = LayoutBuilder(vit_patch=self.vit_patch)
        b.image(self.h_lat, self.w_lat, vit=True, clean=True, noised=False)
        ids = self.prompt_ids(caption)
        b.text(len(ids))
        targets = np.array(ids[1:] + [-1])
        return Sample("und", b.build(), SampleInputs(np.array(ids), {0: ImageInputs(pixels, clean, None, feats)}),
                      targets, captions=(caption,))

    def text_only(self, caption: Caption) -> Sample:
        ids = self.prompt_ids(caption)
        b = LayoutBuilder(vit_patch=self.vit_patch).text(len(ids))
        return Sample("text", b.build(), SampleInputs(np.array(ids)), np.array(ids[1:] + [-1]), captions=(caption,))

    def generation(self, captions: list[Caption], regime: Regime = Regime.INTERLEAVED_GEN) -> Sample:
        """Prompt-then-image sample; earlier images also carry ViT and clean sets.

        In the diffusion-forcing regime one prompt is followed by every
        image as a pure noised target.
        """
        b = LayoutBuilder(regime, vit_patch=self.vit_patch)
        ids: list[int] = []
        images = {}
        x0 = {}
        df = regime is Regime.DIFFUSION_FORCING
        for k, cap in enumerate(captions):
            if k == 0 or not df:
                p = self.prompt_ids(cap)
                b.text(len(p))
                ids += p
            last = k == len(captions) - 1
            ctx = not last and not df
            pixels, clean, feats = self.assets(cap)
            iid = b.image(self.h_lat, self.w_lat, vit=ctx, clean=ctx, noised=True)
            images[iid] = ImageInputs(pixels, clean, None, feats)
            x0[iid] = clean
        ids_arr = np.array(ids)
        return Sample("gen", b.build(), SampleInputs(ids_arr, images), np.full(len(ids), -1), x0,
                      captions=tuple(captions))


def noise_sample(sample: Sample, rng: np.random.Generator, shift: float = 1.0, grouping_prob: float = 0.5,
                 cfg_dropout: tuple[float, float, float] | None = (0.1, 0.5, 0.1),
                 fixed_t: float | None = None) -> Sample:
    """Draw noise levels, noise and condition dropout for a generation sample (in place)."""
    import dataclasses

    layout = sample.layout
    if layout.regime is Regime.DIFFUSION_FORCING and fixed_t is None:
        layout = assign_noise_levels(layout, grouping_prob, rng, shift)
    else:
        ims = []
        for im in layout.images:
            t = fixed_t if fixed_t is not None else float(sample_timestep(shift, rng)) if im.has_noised else 0.0
            ims.append(dataclasses.replace(im, noise_level=t if im.has_noised else 0.0))
        layout = layout.with_images(ims)
    if cfg_dropout is not None:
        layout = apply_cfg_dropout(layout, rng, *cfg_dropout)
    for im in layout.images:
        if not im.has_noised:
            continue
        x0 = sample.x0[im.image_id]
        eps = rng.standard_normal(x0.shape)
        sample.eps[im.image_id] = eps
        sample.inputs.images[im.image_id].noised = noise_latents(x0, eps, im.noise_level)
    sample.layout = layout
    return sample


def batch_fingerprint(samples) -> str:
    h = hashlib.sha1()
    for s in samples:
        s.fingerprint(h)
    return h.hexdigest()
