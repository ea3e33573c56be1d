"""KV-cached interleaved decoding of text and images.

Only text, ViT and clean-VAE keys/values are ever cached. While an image
is being denoised its noised tokens attend to the cache and to each other;
when it is finished, the decoded image is re-entered as ViT + clean VAE
context. ``RecomputeDecoder`` runs the same sessions without a cache,
recomputing the whole sequence for every query, and serves as the
reference implementation.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .encoders import ToyVAE, frozen_vit
from .errors import ConfigurationError, ContractError, LayoutError
from .flow import cfg_combine, euler_sample, make_schedule
from .layout import DropFlags, LayoutBuilder, Modality, Regime, SampleLayout
from .mask import build_mask
from .model import (HiddenState, ImageInputs, ModelParams, SampleInputs, embed_tokens, final_hidden,
                    forward_block, unpatchify)
from .task import BOS, EOS, LATENT_SCALE, TOKEN, caption_text
from .tensor import add, matmul, no_grad

CACHEABLE = (Modality.TEXT, Modality.VIT, Modality.VAE_CLEAN)


@dataclass(frozen=True)
class CacheEntry:
    kind: Modality
    image_id: int | None
    position: tuple[int, int]


@dataclass
class SamplingParams:
    temperature: float = 0.0
    steps: int = 20
    cfg_text: float = 1.0
    cfg_image: float = 1.0
    shift: float = 1.0


def inference_mask(layout: SampleLayout, rows: np.ndarray, uncond_image_id: int | None = None,
                   uncond_text: bool = False, uncond_image: bool = False) -> np.ndarray:
    """Mask rows for ``rows`` of ``layout``; unconditional drops touch only the in-flight image's queries."""
    base = build_mask(layout).permitted
    if uncond_image_id is None or not (uncond_text or uncond_image):
        return base[rows]
    images = []
    for im in layout.images:
        if im.image_id == uncond_image_id:
            im = dataclasses.replace(im, dropped=DropFlags(text_ctx=uncond_text))
        elif uncond_image:
            im = dataclasses.replace(im, dropped=DropFlags(vit=True, vae_clean=True))
        images.append(im)
    dropped = build_mask(layout.with_images(images)).permitted
    out = base.copy()
    own = layout.token_image == uncond_image_id
    out[own] = dropped[own]
    return out[rows]


class KVCache:
    """One decoding session: cached context plus the equivalent layout and inputs."""

    stores_kv = True

    def __init__(self, params: ModelParams, vae: ToyVAE | None = None,
                 regime: Regime | str = Regime.INTERLEAVED_GEN):
        cfg = params.config
        self.params = params
        self.vae = vae or ToyVAE(cfg.downsample, cfg.latent_channels, scale=LATENT_SCALE)
        self.builder = LayoutBuilder(regime, cfg.vit_patch, cfg.downsample)
        self.text_ids: list[int] = []
        self.images: dict[int, ImageInputs] = {}
        self.keys = [np.zeros((0, cfg.heads, cfg.head_dim)) for _ in range(cfg.layers)]
        self.values = [np.zeros((0, cfg.heads, cfg.head_dim)) for _ in range(cfg.layers)]
        self.entries: list[CacheEntry] = []
        self.last_logits: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def layout(self) -> SampleLayout | None:
        return self.builder.build() if self.builder.splits else None

    def inputs(self) -> SampleInputs:
        return SampleInputs(np.asarray(self.text_ids, dtype=np.int64), dict(self.images))

    def audit(self) -> None:
        """Check purity, monotone positions and per-layer sizes."""
        if any(e.kind not in CACHEABLE for e in self.entries):
            raise ContractError("noised VAE entries found in the cache")
        last_text, last_origin = -1, -1
        for e in self.entries:
            if e.kind is Modality.TEXT:
                if e.position[0] <= last_text or e.position[0] < last_origin:
                    raise ContractError("text positions are not strictly increasing")
                last_text = e.position[0]
        origins = [s.positions[0][0] for s in self.builder.splits]
        if any(b < a for a, b in zip(origins, origins[1:])):
            raise ContractError("split origins are not monotone")
        if self.stores_kv:
            for k, v in zip(self.keys, self.values):
                if len(k) != len(self.entries) or len(v) != len(self.entries):
                    raise ContractError("cache length does not match its entries")

    # core computation ----------------------------------------------------------

    def _run(self, layout: SampleLayout, inputs: SampleInputs, first_split: int, mask: np.ndarray,
             store: bool) -> tuple[HiddenState, np.ndarray]:
        """Hidden states of splits ``first_split..`` attending to the cached prefix."""
        params = self.params
        h = embed_tokens(layout, inputs, params, splits=range(first_split, len(layout.splits)))
        new_k, new_v = [], []
        for layer in range(params.config.layers):
            h, k, v = forward_block(h, mask, layer, params, (self.keys[layer], self.values[layer]))
            new_k.append(k.data)
            new_v.append(v.data)
        if store:
            for layer in range(params.config.layers):
                self.keys[layer] = np.concatenate([self.keys[layer], new_k[layer]])
                self.values[layer] = np.concatenate([self.values[layer], new_v[layer]])
        return h, np.arange(h.x.shape[0])

    def _commit(self, first_split: int) -> None:
        layout = self.builder.build()
        for s in layout.splits[first_split:]:
            if s.kind not in CACHEABLE:
                raise ContractError(f"refusing to cache {s.kind.name} tokens")
            self.entries.extend(CacheEntry(s.kind, s.image_id, p) for p in s.positions)

    # public operations ---------------------------------------------------------

    def append_text(self, ids) -> np.ndarray:
        """Append text tokens; returns next-token logits after the last one."""
        ids = [int(i) for i in ids]
        if not ids:
            raise LayoutError("cannot append an empty text split")
        first = len(self.builder.splits)
        self.builder.text(len(ids))
        self.text_ids.extend(ids)
        layout = self.builder.build()
        rows = np.arange(layout.n_tokens - len(ids), layout.n_tokens)
        with no_grad():
            h, sel = self._run(layout, self.inputs(), first, inference_mask(layout, rows), self.stores_kv)
            logits = matmul(final_hidden(h, sel[-1:], self.params), self.params["head.lm"]).data[0]
        self._commit(first)
        self.last_logits = logits
        return logits

    def append_image(self, pixels: np.ndarray | None = None, latent: np.ndarray | None = None,
                     vit: bool = True, clean: bool = True) -> int:
        """Append a finished image as ViT and/or clean VAE context; returns its image id."""
        cfg = self.params.config
        if pixels is None and latent is None:
            raise ConfigurationError("an image needs pixels or a latent")
        if latent is None:
            latent = self.vae.encode(pixels)
        if pixels is None:
            pixels = self.vae.decode(latent)
        h_lat, w_lat = latent.shape[:2]
        feats = frozen_vit(cfg.vit_patch, cfg.vit_dim, cfg.vit_seed)(pixels) if vit else None
        first = len(self.builder.splits)
        image_id = self.builder.image(h_lat, w_lat, vit=vit, clean=clean, noised=False)
        self.images[image_id] = ImageInputs(pixels, latent, None, feats)
        layout = self.builder.build()
        n_new = sum(s.token_count for s in layout.splits[first:])
        rows = np.arange(layout.n_tokens - n_new, layout.n_tokens)
        with no_grad():
            self._run(layout, self.inputs(), first, inference_mask(layout, rows), self.stores_kv)
        self._commit(first)
        self.last_logits = None
        return image_id

    def velocity(self, x: np.ndarray, t: float, uncond_text: bool = False, uncond_image: bool = False) -> np.ndarray:
        """Velocity for an in-flight image with latent ``x`` at noise level ``t``; nothing is cached."""
        cfg = self.params.config
        h_lat, w_lat = x.shape[:2]
        b = LayoutBuilder.from_layout(self.builder.build(), cfg.vit_patch, cfg.downsample) \
            if self.builder.splits else LayoutBuilder(self.builder.regime, cfg.vit_patch, cfg.downsample)
        first = len(b.splits)
        image_id = b.image(h_lat, w_lat, vit=False, clean=False, noised=True, noise_level=float(t))
        layout = b.build()
        inputs = self.inputs()
        inputs.images[image_id] = ImageInputs(noised=x)
        n_new = layout.splits[-1].token_count
        rows = np.arange(layout.n_tokens - n_new, layout.n_tokens)
        mask = inference_mask(layout, rows, image_id, uncond_text, uncond_image)
        with no_grad():
            h, sel = self._run(layout, inputs, first, mask, store=False)
            v = add(matmul(final_hidden(h, sel, self.params), self.params["head.velocity.w"]),
                    self.params["head.velocity.b"])
            return unpatchify(v, h_lat, w_lat, cfg.patch).data

    def generate_text(self, max_len: int, temperature: float = 0.0, rng: np.random.Generator | None = None,
                      eos: int = EOS) -> list[int]:
        """Greedy (temperature 0) or sampled continuation, stopping after ``eos`` or ``max_len`` tokens."""
        out: list[int] = []
        if max_len <= 0:
            return out
        if self.last_logits is None:
            self.append_text([BOS])
        rng = rng if rng is not None else np.random.default_rng(0)
        for _ in range(max_len):
            logits = self.last_logits
            if temperature <= 0:
                tok = int(np.argmax(logits))
            else:
                z = logits / temperature
                p = np.exp(z - z.max())
                tok = int(rng.choice(len(p), p=p / p.sum()))
            out.append(tok)
            self.append_text([tok])
            if tok == eos:
                break
        return out

    def generate_image(self, h_lat: int, w_lat: int, sampling: SamplingParams | None = None,
                       rng: np.random.Generator | None = None) -> tuple[np.ndarray, np.ndarray]:
        """Denoise a new image in context, then cache it as ViT + clean VAE tokens.

        Returns ``(latent, pixels)``.
        """
        sp = sampling or SamplingParams()
        cfg = self.params.config
        step = 2 * cfg.patch
        if h_lat <= 0 or w_lat <= 0 or h_lat % step or w_lat % step:
            raise ConfigurationError(f"latent extents {h_lat}x{w_lat} must be positive multiples of {step}")
        rng = rng if rng is not None else np.random.default_rng(0)
        x = rng.standard_normal((h_lat, w_lat, cfg.latent_channels))

        def model_fn(xt, t):
            v = self.velocity(xt, t)
            if sp.cfg_text != 1.0:
                v = cfg_combine(v, self.velocity(xt, t, uncond_text=True), sp.cfg_text)
            if sp.cfg_image != 1.0:
                v = cfg_combine(v, self.velocity(xt, t, uncond_image=True), sp.cfg_image)
            return v

        latent = euler_sample(model_fn, x, make_schedule(sp.steps, sp.shift))
        pixels = self.vae.decode(latent)
        self.append_image(pixels=pixels, latent=latent)
        return latent, pixels


class RecomputeDecoder(KVCache):
    """Same sessions with no cache: every query recomputes the full sequence."""

    stores_kv = False

    def _run(self, layout, inputs, first_split, mask, store):
        params = self.params
        off = layout.split_offsets()
        rows = np.arange(off[first_split], layout.n_tokens)
        full = build_mask(layout).permitted
        full[rows] = mask
        h = embed_tokens(layout, inputs, params)
        for layer in range(params.config.layers):
            h, _, _ = forward_block(h, full, layer, params)
        return h, rows


def append_context(cache: KVCache, kind: Modality, payload) -> None:
    """Append one context split: text ids, ViT pixels or a clean latent."""
    kind = Modality(kind)
    if kind is Modality.TEXT:
        cache.append_text(payload)
    elif kind is Modality.VIT:
        cache.append_image(pixels=payload, clean=False)
    elif kind is Modality.VAE_CLEAN:
        cache.append_image(latent=payload, vit=False)
    else:
        raise ContractError("noised VAE tokens are never cached")
    cache.audit()


def generate_text(cache: KVCache, max_len: int, temperature: float = 0.0, rng=None) -> list[int]:
    return cache.generate_text(max_len, temperature, rng)


def generate_image(cache: KVCache, h_lat: int, w_lat: int, sampling: SamplingParams | None = None, rng=None):
    return cache.generate_image(h_lat, w_lat, sampling, rng)


# -- scripts -------------------------------------------------------------------------

@dataclass(frozen=True)
class Directive:
    op: str  # prompt | text | image
    words: tuple[str, ...] = ()
    max_len: int = 0
    h_lat: int = 0
    w_lat: int = 0
    options: tuple[tuple[str, float], ...] = ()

    def option(self, key: str, default):
        return dict(self.options).get(key, default)


@dataclass
class DecodeScript:
    directives: list[Directive]

    def __post_init__(self):
        if not self.directives:
            raise ConfigurationError("decode script is empty")

    @classmethod
    def parse(cls, text: str) -> "DecodeScript":
        """Lines ``prompt <words>``, ``text <max_len> [k=v]``, ``image <h_lat> <w_lat> [k=v]``."""
        out = []
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            op, *args = line.split()
            try:
                if op == "prompt":
                    unknown = [w for w in args if w not in TOKEN]
                    if not args or unknown:
                        raise ConfigurationError(f"prompt needs known words, got {unknown or 'nothing'}")
                    out.append(Directive("prompt", tuple(args)))
                    continue
                pos = [a for a in args if "=" not in a]
                opts = tuple((k, float(v)) for k, v in (a.split("=", 1) for a in args if "=" in a))
                if op == "text" and len(pos) == 1:
                    out.append(Directive("text", max_len=int(pos[0]), options=opts))
                elif op == "image" and len(pos) == 2:
                    out.append(Directive("image", h_lat=int(pos[0]), w_lat=int(pos[1]), options=opts))
                else:
                    raise ConfigurationError(f"unrecognised directive {line!r}")
            except ValueError as exc:
                raise ConfigurationError(f"line {lineno}: {exc}") from None
        return cls(out)


@dataclass
class Transcript:
    segments: list[dict] = field(default_factory=list)
    images: list[np.ndarray] = field(default_factory=list)
    latents: list[np.ndarray] = field(default_factory=list)

    def save(self, out_dir: str | Path) -> Path:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        for seg, img in zip((s for s in self.segments if s["type"] == "image"), self.images):
            write_ppm(out / seg["file"], img)
        (out / "transcript.json").write_text(json.dumps(self.segments, indent=2))
        return out


def write_ppm(path: str | Path, pixels: np.ndarray) -> None:
    """Binary PPM of an image with values in [-1, 1]."""
    arr = np.clip(np.round((np.asarray(pixels) + 1.0) * 127.5), 0, 255).astype(np.uint8)
    h, w = arr.shape[:2]
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode())
        f.write(arr.tobytes())


def run_script(script: DecodeScript, params: ModelParams, sampling: SamplingParams | None = None,
               seed: int = 0, use_cache: bool = True) -> Transcript:
    """Execute ``script`` in one session; per-directive options override ``sampling``."""
    base = sampling or SamplingParams()
    session = (KVCache if use_cache else RecomputeDecoder)(params)
    rng = np.random.default_rng(seed)
    tr = Transcript()
    for d in script.directives:
        if d.op == "prompt":
            ids = [BOS] + [TOKEN[w] for w in d.words] + [EOS]
            session.append_text(ids)
            tr.segments.append({"type": "prompt", "tokens": ids, "text": " ".join(d.words)})
        elif d.op == "text":
            temp = float(d.option("temperature", base.temperature))
            toks = session.generate_text(d.max_len, temp, rng)
            tr.segments.append({"type": "text", "tokens": toks,
                                "text": caption_text(toks)})
        else:
            sp = SamplingParams(base.temperature, int(d.option("steps", base.steps)),
                                float(d.option("cfg_text", base.cfg_text)),
                                float(d.option("cfg_image", base.cfg_image)),
                                float(d.option("shift", base.shift)))
            latent, pixels = session.generate_image(d.h_lat, d.w_lat, sp, rng)
            k = len(tr.images)
            tr.images.append(pixels)
            tr.latents.append(latent)
            tr.segments.append({"type": "image", "file": f"image_{k}.ppm", "h_lat": d.h_lat, "w_lat": d.w_lat,
                                "steps": sp.steps, "cfg_text": sp.cfg_text, "cfg_image": sp.cfg_image})
        if use_cache:
            session.audit()
    return tr


def generation_accuracy(params: ModelParams, captions, sampling: SamplingParams | None = None,
                        seed: int = 0, h_lat: int = 8, w_lat: int = 8) -> float:
    """Mean attribute accuracy of images generated from ``captions`` and decoded by the toy oracle."""
    from .task import attribute_accuracy, caption_tokens, decode_attributes

    scores = []
    for i, cap in enumerate(captions):
        session = KVCache(params)
        session.append_text([BOS] + caption_tokens(cap) + [EOS])
        _, pixels = session.generate_image(h_lat, w_lat, sampling, np.random.default_rng([seed, i]))
        scores.append(attribute_accuracy(decode_attributes(pixels), cap))
    return float(np.mean(scores)) if scores else float("nan")
