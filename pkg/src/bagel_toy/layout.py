"""Token schema of interleaved samples and sequence packing.

A sample is an ordered list of single-modality splits. Each image
contributes up to three visual token sets, always serialised in the
order ViT, clean VAE, noised VAE, sharing one 2-D position origin.
"""

from __future__ import annotations

import dataclasses
import enum
from dataclasses import dataclass
from functools import cached_property
from typing import Iterable, Sequence

import numpy as np

from .errors import ConfigurationError, LayoutError, PackingError


class Modality(enum.IntEnum):
    TEXT = 0
    VIT = 1
    VAE_CLEAN = 2
    VAE_NOISED = 3

    @property
    def is_vision(self) -> bool:
        return self is not Modality.TEXT


class Regime(enum.Enum):
    INTERLEAVED_GEN = "interleaved"
    DIFFUSION_FORCING = "diffusion_forcing"

    @classmethod
    def parse(cls, value: "str | Regime") -> "Regime":
        if isinstance(value, Regime):
            return value
        for r in cls:
            if value in (r.value, r.name, r.name.lower()):
                return r
        raise ConfigurationError(f"unknown regime {value!r}")


@dataclass(frozen=True)
class DropFlags:
    text_ctx: bool = False
    vit: bool = False
    vae_clean: bool = False


@dataclass(frozen=True)
class Split:
    kind: Modality
    token_count: int
    image_id: int | None = None
    positions: tuple[tuple[int, int], ...] = ()

    def __post_init__(self):
        if self.token_count <= 0:
            raise LayoutError("split token_count must be positive")
        if (self.image_id is None) == self.kind.is_vision:
            raise LayoutError(f"{self.kind.name} split image_id={self.image_id} is inconsistent")
        if self.positions and len(self.positions) != self.token_count:
            raise LayoutError("one position per token required")


@dataclass(frozen=True)
class ImageRecord:
    image_id: int
    h_lat: int
    w_lat: int
    noise_level: float = 0.0
    group_id: int = 0
    has_vit: bool = True
    has_clean: bool = True
    has_noised: bool = True
    dropped: DropFlags = DropFlags()
    origin: int = 0

    def __post_init__(self):
        if not 0.0 <= self.noise_level <= 1.0:
            raise LayoutError(f"noise level {self.noise_level} outside [0, 1]")


# Role keyword -> (vit, clean, noised)
IMAGE_ROLES = {
    "gen": (True, True, True),
    "cond": (True, True, False),
    "target": (False, False, True),
}


@dataclass(frozen=True)
class TextBlock:
    n: int


@dataclass(frozen=True)
class ImageSpec:
    h_lat: int
    w_lat: int
    role: str = "gen"

    def __post_init__(self):
        if self.role not in IMAGE_ROLES:
            raise ConfigurationError(f"unknown image role {self.role!r}")


@dataclass(frozen=True)
class SampleLayout:
    splits: tuple[Split, ...]
    images: tuple[ImageRecord, ...] = ()
    regime: Regime = Regime.INTERLEAVED_GEN
    next_position: int = 0

    def __post_init__(self):
        if not self.splits:
            raise LayoutError("a sample needs at least one split")
        ids = [im.image_id for im in self.images]
        if len(set(ids)) != len(ids):
            raise LayoutError("duplicate image ids")
        known = set(ids)
        order = {Modality.VIT: 0, Modality.VAE_CLEAN: 1, Modality.VAE_NOISED: 2}
        seen: dict[int, list[int]] = {}
        closed: set[int] = set()
        prev_img = None
        for s in self.splits:
            if s.image_id is not None:
                if s.image_id not in known:
                    raise LayoutError(f"split references unknown image {s.image_id}")
                if s.image_id in closed:
                    raise LayoutError(f"token sets of image {s.image_id} are not contiguous")
                seen.setdefault(s.image_id, []).append(order[s.kind])
            if prev_img is not None and prev_img != s.image_id:
                closed.add(prev_img)
            prev_img = s.image_id
        group_t: dict[int, float] = {}
        for im in self.images:
            if group_t.setdefault(im.group_id, im.noise_level) != im.noise_level:
                raise LayoutError(f"images of group {im.group_id} have different noise levels")
            got = seen.get(im.image_id, [])
            want = [i for i, f in enumerate((im.has_vit, im.has_clean, im.has_noised)) if f]
            if got != want:
                raise LayoutError(f"image {im.image_id} splits out of order or mismatched: {got} != {want}")
            if im.h_lat <= 0 or im.w_lat <= 0:
                raise LayoutError("zero-size image")
            vae_tokens = (im.h_lat // 2) * (im.w_lat // 2)
            for s in self.splits:
                if s.image_id == im.image_id and s.kind in (Modality.VAE_CLEAN, Modality.VAE_NOISED):
                    if s.token_count != vae_tokens:
                        raise LayoutError(f"image {im.image_id} VAE split has {s.token_count} tokens, "
                                          f"expected {vae_tokens}")

    @property
    def n_tokens(self) -> int:
        return sum(s.token_count for s in self.splits)

    def image(self, image_id: int) -> ImageRecord:
        for im in self.images:
            if im.image_id == image_id:
                return im
        raise KeyError(image_id)

    @cached_property
    def token_kind(self) -> np.ndarray:
        return np.concatenate([np.full(s.token_count, int(s.kind)) for s in self.splits])

    @cached_property
    def token_image(self) -> np.ndarray:
        return np.concatenate([np.full(s.token_count, -1 if s.image_id is None else s.image_id)
                               for s in self.splits])

    @cached_property
    def token_split(self) -> np.ndarray:
        return np.concatenate([np.full(s.token_count, i) for i, s in enumerate(self.splits)])

    @cached_property
    def positions(self) -> np.ndarray:
        return np.asarray([p for s in self.splits for p in s.positions], dtype=np.int64).reshape(-1, 2)

    def split_offsets(self) -> np.ndarray:
        return np.concatenate([[0], np.cumsum([s.token_count for s in self.splits])])

    def with_images(self, images: Iterable[ImageRecord]) -> "SampleLayout":
        return dataclasses.replace(self, images=tuple(images))

    def describe(self) -> str:
        parts = []
        for s in self.splits:
            tag = s.kind.name if s.image_id is None else f"{s.kind.name}#{s.image_id}"
            parts.append(f"{tag}:{s.token_count}")
        return "[" + ", ".join(parts) + "]"


def vit_grid(h_lat: int, w_lat: int, vit_patch: int = 16, downsample: int = 8) -> tuple[int, int]:
    hp, wp = h_lat * downsample, w_lat * downsample
    if hp % vit_patch or wp % vit_patch:
        raise ConfigurationError(f"image {hp}x{wp} not divisible by ViT patch {vit_patch}")
    return hp // vit_patch, wp // vit_patch


def _grid_positions(origin: int, gh: int, gw: int) -> tuple[tuple[int, int], ...]:
    return tuple((origin + r, origin + c) for r in range(gh) for c in range(gw))


def _text_positions(start: int, n: int) -> tuple[tuple[int, int], ...]:
    return tuple((p, p) for p in range(start, start + n))


class LayoutBuilder:
    """Incremental construction of a SampleLayout with position bookkeeping."""

    def __init__(self, regime: Regime = Regime.INTERLEAVED_GEN, vit_patch: int = 16,
                 downsample: int = 8, start: int = 0):
        self.regime = Regime.parse(regime)
        self.vit_patch = vit_patch
        self.downsample = downsample
        self.splits: list[Split] = []
        self.images: list[ImageRecord] = []
        self.cursor = start

    @classmethod
    def from_layout(cls, layout: SampleLayout, vit_patch: int = 16, downsample: int = 8) -> "LayoutBuilder":
        b = cls(layout.regime, vit_patch, downsample, start=layout.next_position)
        b.splits = list(layout.splits)
        b.images = list(layout.images)
        return b

    def text(self, n: int, merge: bool = False) -> "LayoutBuilder":
        if n <= 0:
            raise LayoutError("text block must have at least one token")
        pos = _text_positions(self.cursor, n)
        if merge and self.splits and self.splits[-1].kind is Modality.TEXT:
            last = self.splits.pop()
            self.splits.append(Split(Modality.TEXT, last.token_count + n, None, last.positions + pos))
        else:
            self.splits.append(Split(Modality.TEXT, n, None, pos))
        self.cursor += n
        return self

    def image(self, h_lat: int, w_lat: int, vit: bool = True, clean: bool = True, noised: bool = True,
              noise_level: float = 0.0, group_id: int | None = None,
              dropped: DropFlags = DropFlags()) -> int:
        if h_lat <= 0 or w_lat <= 0:
            raise LayoutError(f"zero-size image {h_lat}x{w_lat}")
        if h_lat % 2 or w_lat % 2:
            raise LayoutError(f"latent extents {h_lat}x{w_lat} must be divisible by 2")
        if not (vit or clean or noised):
            raise LayoutError("an image needs at least one token set")
        image_id = len(self.images)
        while any(im.image_id == image_id for im in self.images):
            image_id += 1
        origin = self.cursor
        gh, gw = h_lat // 2, w_lat // 2
        extent = max(gh, gw)
        if vit:
            vh, vw = vit_grid(h_lat, w_lat, self.vit_patch, self.downsample)
            self.splits.append(Split(Modality.VIT, vh * vw, image_id, _grid_positions(origin, vh, vw)))
            extent = max(extent, vh, vw)
        if clean:
            self.splits.append(Split(Modality.VAE_CLEAN, gh * gw, image_id, _grid_positions(origin, gh, gw)))
        if noised:
            self.splits.append(Split(Modality.VAE_NOISED, gh * gw, image_id, _grid_positions(origin, gh, gw)))
        self.images.append(ImageRecord(image_id, h_lat, w_lat, noise_level,
                                       image_id if group_id is None else group_id,
                                       vit, clean, noised, dropped, origin))
        self.cursor += extent
        return image_id

    def build(self) -> SampleLayout:
        return SampleLayout(tuple(self.splits), tuple(self.images), self.regime, self.cursor)


def build_sample_layout(script: Sequence[TextBlock | ImageSpec], regime: Regime | str = Regime.INTERLEAVED_GEN,
                        groups: Sequence[int] | None = None, noise_levels: Sequence[float] | None = None,
                        vit_patch: int = 16, downsample: int = 8) -> SampleLayout:
    """Lay out an ordered script of text blocks and images.

    ``groups`` optionally gives one group id per image (in script order);
    images sharing a group must be consecutive and receive one shared
    noise level.
    """
    if not script:
        raise LayoutError("script must contain at least one item")
    n_images = sum(isinstance(it, ImageSpec) for it in script)
    levels = [0.0] * n_images if noise_levels is None else [float(t) for t in noise_levels]
    if groups is not None:
        groups = [int(g) for g in groups]
        first: dict[int, int] = {}
        for k, g in enumerate(groups):
            if g in first and groups[k - 1] != g:
                raise LayoutError("image groups must be runs of consecutive images")
            first.setdefault(g, k)
            levels[k] = levels[first[g]]
    b = LayoutBuilder(regime, vit_patch, downsample)
    k = 0
    for item in script:
        if isinstance(item, TextBlock):
            b.text(item.n)
        elif isinstance(item, ImageSpec):
            vit, clean, noised = IMAGE_ROLES[item.role]
            g = None if groups is None else groups[k]
            b.image(item.h_lat, item.w_lat, vit, clean, noised, noise_level=levels[k], group_id=g)
            k += 1
        else:
            raise LayoutError(f"unknown script item {item!r}")
    return b.build()


def group_partition(layout: SampleLayout) -> list[list[int]]:
    """Image ids grouped into runs of equal group id, in layout order."""
    out: list[list[int]] = []
    prev = None
    for im in layout.images:
        if out and im.group_id == prev:
            out[-1].append(im.image_id)
        else:
            out.append([im.image_id])
        prev = im.group_id
    return out


def assign_noise_levels(layout: SampleLayout, grouping_prob: float, rng: np.random.Generator,
                        shift: float = 1.0) -> SampleLayout:
    """Randomly merge consecutive images into groups and draw one t per group."""
    from .flow import sample_timestep

    if layout.regime is not Regime.DIFFUSION_FORCING:
        raise LayoutError("noise-level grouping applies to the diffusion-forcing regime only")
    if not 0.0 <= grouping_prob <= 1.0:
        raise ConfigurationError("grouping_prob must lie in [0, 1]")
    images = list(layout.images)
    if not images:
        return layout
    group_ids = [0]
    for _ in images[1:]:
        merge = rng.random() < grouping_prob
        group_ids.append(group_ids[-1] if merge else group_ids[-1] + 1)
    levels = [float(sample_timestep(shift, rng)) for _ in range(group_ids[-1] + 1)]
    out = [dataclasses.replace(im, group_id=g, noise_level=levels[g]) for im, g in zip(images, group_ids)]
    return layout.with_images(out)


def apply_cfg_dropout(layout: SampleLayout, rng: np.random.Generator, p_text: float = 0.1,
                      p_vit: float = 0.5, p_vae: float = 0.1) -> SampleLayout:
    """Flag condition dropout per image; token counts and split order are untouched.

    Three uniforms are drawn per image regardless of which token sets it
    has, so the random stream does not depend on the layout contents.
    """
    for p in (p_text, p_vit, p_vae):
        if not 0.0 <= p <= 1.0:
            raise ConfigurationError(f"dropout probability {p} outside [0, 1]")
    images = []
    for im in layout.images:
        u = rng.random(3)
        d = im.dropped
        flags = DropFlags(d.text_ctx or bool(u[0] < p_text),
                          d.vit or bool(u[1] < p_vit),
                          d.vae_clean or bool(u[2] < p_vae))
        images.append(dataclasses.replace(im, dropped=flags))
    return layout.with_images(images)


@dataclass(frozen=True)
class PackedSequence:
    samples: tuple[SampleLayout, ...]

    @property
    def length(self) -> int:
        return sum(s.n_tokens for s in self.samples)

    @cached_property
    def offsets(self) -> np.ndarray:
        return np.concatenate([[0], np.cumsum([s.n_tokens for s in self.samples])]).astype(np.int64)

    @cached_property
    def sample_id(self) -> np.ndarray:
        return np.concatenate([np.full(s.n_tokens, i) for i, s in enumerate(self.samples)])

    @classmethod
    def of(cls, layout: "SampleLayout | PackedSequence") -> "PackedSequence":
        return layout if isinstance(layout, PackedSequence) else cls((layout,))


def pack_sequences(samples: Sequence[SampleLayout], min_len: int, max_len: int) -> list[PackedSequence]:
    """Greedy first-fit packing into packs of ``min_len..max_len`` tokens.

    A pack is closed as soon as it reaches ``min_len``. Packs still open
    at the end are emitted last; when every sample is at most
    ``max_len - min_len`` long there is never more than one such pack.
    """
    if min_len > max_len or max_len <= 0:
        raise PackingError(f"invalid pack range ({min_len}, {max_len})")
    done: list[list[SampleLayout]] = []
    open_packs: list[list[SampleLayout]] = []
    sizes: list[int] = []
    for s in samples:
        n = s.n_tokens
        if n > max_len:
            raise PackingError(f"sample of {n} tokens exceeds max_len={max_len}")
        for i, size in enumerate(sizes):
            if size + n <= max_len:
                open_packs[i].append(s)
                sizes[i] += n
                break
        else:
            open_packs.append([s])
            sizes.append(n)
            i = len(sizes) - 1
        if sizes[i] >= min_len:
            done.append(open_packs.pop(i))
            sizes.pop(i)
    done.extend(open_packs)
    return [PackedSequence(tuple(p)) for p in done]


def parse_layout_script(text: str) -> tuple[list[TextBlock | ImageSpec], Regime]:
    """Parse the line format ``text <n>`` / ``image <h> <w> [gen|cond|target]``.

    An optional ``regime <interleaved|diffusion_forcing>`` line selects the
    attention regime; ``#`` starts a comment.
    """
    items: list[TextBlock | ImageSpec] = []
    regime = Regime.INTERLEAVED_GEN
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        word, *args = line.split()
        try:
            if word == "text" and len(args) == 1:
                items.append(TextBlock(int(args[0])))
            elif word == "image" and len(args) in (2, 3):
                items.append(ImageSpec(int(args[0]), int(args[1]), args[2] if len(args) == 3 else "gen"))
            elif word == "regime" and len(args) == 1:
                regime = Regime.parse(args[0])
            else:
                raise ConfigurationError(f"unrecognised directive {line!r}")
        except (ValueError, ConfigurationError) as exc:
            raise ConfigurationError(f"line {lineno}: {exc}") from None
    if not items:
        raise LayoutError("script is empty")
    return items, regime
