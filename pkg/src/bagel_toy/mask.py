"""Generalized causal attention masks for packed interleaved sequences.

``build_mask`` compiles a mask block by block from split-level decisions.
``oracle_mask`` re-states the same rules for every (query, key) token pair
without touching any of the compiler's helpers; the two are compared in
the test-suite.

Rules, for a query token q and key token k:

1. tokens of different samples never see each other;
2. a token sees tokens of preceding splits of its sample, subject to 4-7;
3. inside a split text is causal and vision tokens are bidirectional;
4. an image's noised VAE tokens and its ViT tokens see each other fully;
   its clean VAE tokens see its ViT tokens, nothing else of the image;
5. interleaved generation: other images' noised VAE tokens are never
   visible; their clean VAE and ViT tokens are;
6. diffusion forcing: other images' noised VAE tokens are visible instead
   of their clean ones, and the ViT/noised tokens of images in one group
   see each other fully;
7. dropped ViT / clean VAE splits are hidden from every query outside
   their image; a dropped text context hides all text from the vision
   queries of that image.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import LayoutError
from .layout import Modality, PackedSequence, Regime, SampleLayout

NONE, FULL, CAUSAL = 0, 1, 2


@dataclass
class MaskSpec:
    n: int
    permitted: np.ndarray
    intervals: list[tuple[int, int, int, int]] | None = None

    def __post_init__(self):
        self.permitted = np.asarray(self.permitted, dtype=bool)
        if self.permitted.shape != (self.n, self.n):
            raise LayoutError(f"mask shape {self.permitted.shape} != ({self.n}, {self.n})")
        if not np.all(np.diagonal(self.permitted)):
            raise LayoutError("every token must attend to itself")
        if self.intervals is not None and not np.array_equal(
                expand_intervals(self.intervals, self.n), self.permitted):
            raise LayoutError("interval form does not expand to the boolean mask")

    def __eq__(self, other):
        return isinstance(other, MaskSpec) and self.n == other.n and np.array_equal(self.permitted, other.permitted)


def _split_block_rule(layout: SampleLayout, a: int, b: int) -> int:
    """Permission of split ``a`` (queries) over split ``b`` (keys)."""
    sa, sb = layout.splits[a], layout.splits[b]
    if a == b:
        return CAUSAL if sa.kind is Modality.TEXT else FULL
    ia, ib = sa.image_id, sb.image_id
    if ia is not None and ia == ib:
        pair = {sa.kind, sb.kind}
        if pair == {Modality.VIT, Modality.VAE_NOISED}:
            return FULL
        return FULL if (b < a and sa.kind is Modality.VAE_CLEAN and sb.kind is Modality.VIT) else NONE

    df = layout.regime is Regime.DIFFUSION_FORCING
    vis = (Modality.VIT, Modality.VAE_NOISED)
    allowed = False
    if df and ia is not None and ib is not None and sa.kind in vis and sb.kind in vis \
            and layout.image(ia).group_id == layout.image(ib).group_id:
        allowed = True
    elif b < a:
        if sb.kind is Modality.TEXT or sb.kind is Modality.VIT:
            allowed = True
        elif sb.kind is Modality.VAE_CLEAN:
            allowed = not df
        else:
            allowed = df
    if not allowed:
        return NONE

    if ib is not None:
        d = layout.image(ib).dropped
        if (sb.kind is Modality.VIT and d.vit) or (sb.kind is Modality.VAE_CLEAN and d.vae_clean):
            return NONE
    if sb.kind is Modality.TEXT and ia is not None and layout.image(ia).dropped.text_ctx:
        return NONE
    return FULL


def _sample_mask(layout: SampleLayout) -> np.ndarray:
    n = layout.n_tokens
    off = layout.split_offsets()
    m = np.zeros((n, n), dtype=bool)
    ns = len(layout.splits)
    for a in range(ns):
        qa, qb = off[a], off[a + 1]
        for b in range(ns):
            rule = _split_block_rule(layout, a, b)
            if rule == FULL:
                m[qa:qb, off[b]:off[b + 1]] = True
            elif rule == CAUSAL:
                m[qa:qb, qa:qb] = np.tri(qb - qa, dtype=bool)
    return m


def build_mask(packed: PackedSequence | SampleLayout, with_intervals: bool = False) -> MaskSpec:
    """Compile the attention-permission matrix for a packed sequence."""
    packed = PackedSequence.of(packed)
    n = packed.length
    m = np.zeros((n, n), dtype=bool)
    off = packed.offsets
    for i, s in enumerate(packed.samples):
        m[off[i]:off[i + 1], off[i]:off[i + 1]] = _sample_mask(s)
    return MaskSpec(n, m, mask_to_intervals(m) if with_intervals else None)


def oracle_mask(packed: PackedSequence | SampleLayout) -> MaskSpec:
    """Reference mask: every rule evaluated directly for every token pair."""
    packed = PackedSequence.of(packed)
    toks = []
    for sid, layout in enumerate(packed.samples):
        imgs = {im.image_id: im for im in layout.images}
        df = layout.regime is Regime.DIFFUSION_FORCING
        for split_no, split in enumerate(layout.splits):
            im = imgs.get(split.image_id)
            for j in range(split.token_count):
                toks.append((sid, split_no, j, split.kind, split.image_id, im, df))
    n = len(toks)
    out = np.zeros((n, n), dtype=bool)
    T, V, C, N = Modality.TEXT, Modality.VIT, Modality.VAE_CLEAN, Modality.VAE_NOISED
    for qi, (qs, qsplit, qj, qkind, qimg, qrec, df) in enumerate(toks):
        for ki, (ks, ksplit, kj, kkind, kimg, krec, _) in enumerate(toks):
            if qs != ks:
                continue
            if qsplit == ksplit:
                ok = kj <= qj if qkind == T else True
            elif qimg is not None and qimg == kimg:
                # own image: noised<->ViT both ways, clean may read ViT
                ok = (qkind, kkind) in ((N, V), (V, N), (C, V))
            else:
                same_group = (df and qimg is not None and kimg is not None
                              and qrec.group_id == krec.group_id)
                if same_group and qkind in (V, N) and kkind in (V, N):
                    ok = True
                elif ksplit > qsplit:
                    ok = False
                elif kkind == T or kkind == V:
                    ok = True
                elif kkind == C:
                    ok = not df
                else:
                    ok = df
                if ok and kimg is not None:
                    if kkind == V and krec.dropped.vit:
                        ok = False
                    if kkind == C and krec.dropped.vae_clean:
                        ok = False
                if ok and kkind == T and qrec is not None and qrec.dropped.text_ctx:
                    ok = False
            out[qi, ki] = ok
    return MaskSpec(n, out)


def mask_to_intervals(mask) -> list[tuple[int, int, int, int]]:
    """Cover the permitted entries with rectangles ``(q0, q1, k0, k1)``, half-open.

    Consecutive query rows with identical key runs share one rectangle per run.
    """
    m = np.asarray(getattr(mask, "permitted", mask), dtype=bool)
    n_q = m.shape[0]
    rects: list[tuple[int, int, int, int]] = []

    def runs(row):
        padded = np.concatenate([[False], row, [False]])
        edges = np.flatnonzero(padded[1:] != padded[:-1])
        return tuple(zip(edges[0::2].tolist(), edges[1::2].tolist()))

    start = 0
    current = runs(m[0]) if n_q else ()
    for q in range(1, n_q + 1):
        nxt = runs(m[q]) if q < n_q else None
        if nxt != current:
            rects.extend((start, q, k0, k1) for k0, k1 in current)
            start, current = q, nxt
    return rects


def expand_intervals(intervals, n: int, n_keys: int | None = None) -> np.ndarray:
    m = np.zeros((n, n if n_keys is None else n_keys), dtype=bool)
    for q0, q1, k0, k1 in intervals:
        m[q0:q1, k0:k1] = True
    return m


def render_mask(mask: MaskSpec | np.ndarray) -> str:
    """Plain-PBM rendering: ``1`` marks a permitted (query, key) pair."""
    m = np.asarray(getattr(mask, "permitted", mask), dtype=bool)
    rows = ["".join("1" if v else "0" for v in row) for row in m]
    return "\n".join([f"P1\n{m.shape[1]} {m.shape[0]}"] + rows) + "\n"


def mask_stats(mask: MaskSpec | np.ndarray) -> dict:
    m = np.asarray(getattr(mask, "permitted", mask), dtype=bool)
    rects = mask_to_intervals(m)
    return {
        "tokens": int(m.shape[0]),
        "permitted": int(m.sum()),
        "density": float(m.mean()) if m.size else 0.0,
        "rectangles": len(rects),
    }
