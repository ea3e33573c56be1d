"""Unified transformer over interleaved text / ViT / VAE tokens.

Three block variants share one code path:

* ``dense``: a single set of weights for every token;
* ``moe``: the FFN is duplicated, VAE tokens use the generation copy;
* ``mot``: every block weight (norms, attention projections, QK norms,
  FFN) and the final norm are duplicated.

Routing is hard and depends only on token modality. All tokens meet in
one joint attention per block.
"""

from __future__ import annotations

import dataclasses
import enum
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .encoders import frozen_vit, sincos_2d
from .errors import ConfigurationError, InputError
from .layout import Modality, PackedSequence, SampleLayout, vit_grid
from .mask import MaskSpec, build_mask
from .tensor import (Tensor, add, attention_core, concat, embedding, gelu, matmul, parameter,
                     reshape, rms_norm, rope_2d, scatter_rows, silu, swiglu, take_rows, transpose)

UND, GEN = "und", "gen"
ATTN_KEYS = ("attn_norm", "wq", "wk", "wv", "wo", "q_norm", "k_norm")
FFN_KEYS = ("ffn_norm", "w_up", "w_down")


class Variant(enum.Enum):
    DENSE = "dense"
    MOE = "moe"
    MOT = "mot"

    @classmethod
    def parse(cls, value: "str | Variant") -> "Variant":
        if isinstance(value, Variant):
            return value
        try:
            return cls(str(value).lower())
        except ValueError:
            raise ConfigurationError(f"unknown variant {value!r} (expected dense, moe or mot)") from None


@dataclass
class ModelConfig:
    layers: int = 2
    d_model: int = 64
    heads: int = 4
    head_dim: int = 16
    ffn_hidden: int = 128
    vocab_size: int = 16
    variant: Variant = Variant.MOT
    latent_channels: int = 16
    patch: int = 2
    downsample: int = 8
    vit_patch: int = 16
    vit_dim: int = 32
    vit_seed: int = 0
    temb_dim: int = 256
    rope_base: float = 10000.0
    norm_eps: float = 1e-6

    def __post_init__(self):
        self.variant = Variant.parse(self.variant)
        if self.d_model != self.heads * self.head_dim:
            raise ConfigurationError(f"d_model={self.d_model} != heads*head_dim={self.heads * self.head_dim}")
        if self.ffn_hidden % 2:
            raise ConfigurationError("ffn_hidden must be even for SwiGLU")
        if self.head_dim % 4:
            raise ConfigurationError("head_dim must be divisible by 4 for 2-D rotary embedding")
        if self.d_model % 4:
            raise ConfigurationError("d_model must be divisible by 4")
        if min(self.layers, self.vocab_size, self.latent_channels, self.patch) <= 0:
            raise ConfigurationError("layers, vocab_size, latent_channels and patch must be positive")

    @property
    def patch_dim(self) -> int:
        return self.patch * self.patch * self.latent_channels

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["variant"] = self.variant.value
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "ModelConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})

    def with_variant(self, variant) -> "ModelConfig":
        return dataclasses.replace(self, variant=Variant.parse(variant))


def experts_owning(variant: Variant, key: str) -> tuple[str, ...]:
    """Experts holding a distinct copy of block weight ``key``."""
    if variant is Variant.MOT or (variant is Variant.MOE and key in ("w_up", "w_down")):
        return (UND, GEN)
    return (UND,)


def expert_of(kind: Modality, variant: Variant) -> str:
    if variant is Variant.DENSE:
        return UND
    return GEN if kind in (Modality.VAE_CLEAN, Modality.VAE_NOISED) else UND


def _block_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    d = cfg.d_model
    return {
        "attn_norm": (d,), "wq": (d, d), "wk": (d, d), "wv": (d, d), "wo": (d, d),
        "q_norm": (cfg.head_dim,), "k_norm": (cfg.head_dim,),
        "ffn_norm": (d,), "w_up": (d, cfg.ffn_hidden), "w_down": (cfg.ffn_hidden // 2, d),
    }


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Name -> shape for every distinct trainable tensor of ``cfg.variant``."""
    d = cfg.d_model
    shapes: dict[str, tuple[int, ...]] = {
        "embed.text": (cfg.vocab_size, d),
        "embed.patch.w": (cfg.patch_dim, d), "embed.patch.b": (d,),
        "embed.temb.w1": (cfg.temb_dim, d), "embed.temb.b1": (d,),
        "embed.temb.w2": (d, d), "embed.temb.b2": (d,),
        "connector.w1": (cfg.vit_dim, d), "connector.b1": (d,),
        "connector.w2": (d, d), "connector.b2": (d,),
    }
    block = _block_shapes(cfg)
    for layer in range(cfg.layers):
        for expert in (UND, GEN):
            for key, shape in block.items():
                if expert in experts_owning(cfg.variant, key):
                    shapes[f"layers.{layer}.{expert}.{key}"] = shape
    for expert in experts_owning(cfg.variant, "final_norm"):
        shapes[f"final_norm.{expert}"] = (d,)
    shapes["head.lm"] = (d, cfg.vocab_size)
    shapes["head.velocity.w"] = (d, cfg.patch_dim)
    shapes["head.velocity.b"] = (cfg.patch_dim,)
    return shapes


def _init_value(name: str, shape, rng: np.random.Generator, cfg: ModelConfig) -> np.ndarray:
    leaf = name.rsplit(".", 1)[-1]
    if leaf.endswith("norm") or name.startswith("final_norm"):
        return np.ones(shape)
    if leaf in ("b", "b1", "b2"):
        return np.zeros(shape)
    if name == "embed.text":
        return rng.standard_normal(shape)
    std = 1.0 / np.sqrt(shape[0])
    if leaf in ("wo", "w_down"):
        std /= np.sqrt(2.0 * cfg.layers)
    return rng.standard_normal(shape) * std


@dataclass
class ModelParams:
    config: ModelConfig
    tensors: dict[str, Tensor] = field(default_factory=dict)

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def resolve(self, layer: int, expert: str, key: str) -> Tensor:
        name = f"layers.{layer}.{expert}.{key}"
        if name in self.tensors:
            return self.tensors[name]
        return self.tensors[f"layers.{layer}.{UND}.{key}"]

    def final_norm(self, expert: str) -> Tensor:
        return self.tensors.get(f"final_norm.{expert}", self.tensors[f"final_norm.{UND}"])

    def parameters(self) -> list[Tensor]:
        return list(self.tensors.values())

    def zero_grad(self) -> None:
        for p in self.tensors.values():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.tensors.items()}

    def load_state_dict(self, state: Mapping[str, np.ndarray]) -> None:
        for k, v in state.items():
            self.tensors[k].data[...] = v

    def copy(self) -> "ModelParams":
        return ModelParams(self.config, {k: parameter(v.data.copy()) for k, v in self.tensors.items()})

    def num_parameters(self) -> int:
        return int(sum(p.data.size for p in self.tensors.values()))


def init_params(cfg: ModelConfig, seed: int = 0, tie_experts: bool = True) -> ModelParams:
    """Random initialisation; understanding weights are drawn identically for every variant.

    With ``tie_experts`` the generation expert starts as a copy of the
    understanding expert, so all three variants compute the same function
    at step 0.
    """
    rng = np.random.default_rng(seed)
    dense = param_shapes(cfg.with_variant(Variant.DENSE))
    values = {name: _init_value(name, shape, rng, cfg) for name, shape in dense.items()}
    tensors = {}
    for name, shape in param_shapes(cfg).items():
        if name in values:
            tensors[name] = parameter(values[name])
            continue
        und_name = name.replace(f".{GEN}.", f".{UND}.") if name.startswith("layers.") else f"final_norm.{UND}"
        if tie_experts:
            tensors[name] = parameter(values[und_name].copy())
        else:
            tensors[name] = parameter(_init_value(name, shape, rng, cfg))
    return ModelParams(cfg, tensors)


def tie_generation_expert(params: ModelParams) -> None:
    """Overwrite every generation-expert tensor with its understanding counterpart."""
    for name, t in params.tensors.items():
        if f".{GEN}." in name or name == f"final_norm.{GEN}":
            src = name.replace(f".{GEN}.", f".{UND}.") if name.startswith("layers.") else f"final_norm.{UND}"
            t.data[...] = params.tensors[src].data


# -- embedding ----------------------------------------------------------------

@dataclass
class ImageInputs:
    pixels: np.ndarray | None = None
    clean: np.ndarray | None = None
    noised: np.ndarray | None = None
    vit_features: np.ndarray | None = None


@dataclass
class SampleInputs:
    text_ids: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    images: dict[int, ImageInputs] = field(default_factory=dict)


@dataclass
class HiddenState:
    x: Tensor
    kinds: np.ndarray
    experts: np.ndarray
    positions: np.ndarray


def timestep_embedding(t: float, dim: int = 256, max_period: float = 10000.0) -> np.ndarray:
    """Sinusoidal features of ``1000 * t``."""
    half = dim // 2
    freqs = np.exp(-np.log(max_period) * np.arange(half) / half)
    a = 1000.0 * float(t) * freqs
    return np.concatenate([np.cos(a), np.sin(a)])


def patchify(latent: np.ndarray, p: int = 2) -> np.ndarray:
    h, w, c = latent.shape
    return latent.reshape(h // p, p, w // p, p, c).transpose(0, 2, 1, 3, 4).reshape((h // p) * (w // p), p * p * c)


def unpatchify(tokens: Tensor, h: int, w: int, p: int = 2) -> Tensor:
    c = tokens.shape[-1] // (p * p)
    x = reshape(tokens, (h // p, w // p, p, p, c))
    return reshape(transpose(x, (0, 2, 1, 3, 4)), (h, w, c))


def vit_tokens(pixels: np.ndarray | None, params: ModelParams, features: np.ndarray | None = None) -> Tensor:
    """Frozen ViT features passed through the trainable two-layer connector."""
    cfg = params.config
    if features is None:
        if pixels is None:
            raise InputError("ViT split needs pixels or precomputed features")
        features = frozen_vit(cfg.vit_patch, cfg.vit_dim, cfg.vit_seed)(pixels)
    hidden = gelu(add(matmul(Tensor(features), params["connector.w1"]), params["connector.b1"]))
    return add(matmul(hidden, params["connector.w2"]), params["connector.b2"])


def timestep_tokens(t: float, params: ModelParams) -> Tensor:
    cfg = params.config
    e = Tensor(timestep_embedding(t, cfg.temb_dim)[None, :])
    h = silu(add(matmul(e, params["embed.temb.w1"]), params["embed.temb.b1"]))
    return add(matmul(h, params["embed.temb.w2"]), params["embed.temb.b2"])


def _text_slices(layout: SampleLayout) -> list[int]:
    starts, n = [], 0
    for s in layout.splits:
        starts.append(n)
        if s.kind is Modality.TEXT:
            n += s.token_count
    return starts


def embed_split(layout: SampleLayout, idx: int, inputs: SampleInputs, params: ModelParams,
                text_start: int | None = None) -> Tensor:
    """Initial hidden states of split ``idx`` of ``layout``."""
    cfg = params.config
    split = layout.splits[idx]
    if split.kind is Modality.TEXT:
        start = _text_slices(layout)[idx] if text_start is None else text_start
        ids = np.asarray(inputs.text_ids, dtype=np.int64)[start:start + split.token_count]
        if len(ids) != split.token_count:
            raise InputError(f"text split {idx} needs {split.token_count} ids, got {len(ids)}")
        return embedding(params["embed.text"], ids)
    rec = layout.image(split.image_id)
    img = inputs.images.get(split.image_id)
    if img is None:
        raise InputError(f"no inputs for image {split.image_id}")
    if split.kind is Modality.VIT:
        tok = vit_tokens(img.pixels, params, img.vit_features)
        if tok.shape[0] != split.token_count:
            raise InputError(f"ViT produced {tok.shape[0]} tokens for a {split.token_count}-token split")
        gh, gw = vit_grid(rec.h_lat, rec.w_lat, cfg.vit_patch, cfg.downsample)
        return add(tok, sincos_2d(gh, gw, cfg.d_model))
    latent = img.clean if split.kind is Modality.VAE_CLEAN else img.noised
    if latent is None:
        raise InputError(f"missing {split.kind.name} latent for image {split.image_id}")
    latent = np.asarray(latent, dtype=np.float64)
    if latent.shape != (rec.h_lat, rec.w_lat, cfg.latent_channels):
        raise InputError(f"latent shape {latent.shape} does not match image record "
                         f"{(rec.h_lat, rec.w_lat, cfg.latent_channels)}")
    tok = add(matmul(Tensor(patchify(latent, cfg.patch)), params["embed.patch.w"]), params["embed.patch.b"])
    tok = add(tok, sincos_2d(rec.h_lat // cfg.patch, rec.w_lat // cfg.patch, cfg.d_model))
    if split.kind is Modality.VAE_NOISED:
        tok = add(tok, timestep_tokens(rec.noise_level, params))
    return tok


def embed_tokens(layout: SampleLayout, inputs: SampleInputs, params: ModelParams,
                 splits: Sequence[int] | None = None) -> HiddenState:
    """Embed all (or the listed) splits of one sample and attach routing metadata."""
    idx = range(len(layout.splits)) if splits is None else splits
    starts = _text_slices(layout)
    parts = [embed_split(layout, i, inputs, params, starts[i]) for i in idx]
    kinds = np.concatenate([np.full(layout.splits[i].token_count, int(layout.splits[i].kind)) for i in idx])
    pos = np.asarray([p for i in idx for p in layout.splits[i].positions], dtype=np.int64).reshape(-1, 2)
    variant = params.config.variant
    experts = np.array([expert_of(Modality(k), variant) for k in kinds])
    return HiddenState(concat(parts, axis=0), kinds, experts, pos)


# -- blocks ----------------------------------------------------------------------

def _expert_rows(experts: np.ndarray) -> list[tuple[str, np.ndarray]]:
    out = []
    for e in (UND, GEN):
        rows = np.flatnonzero(experts == e)
        if rows.size:
            out.append((e, rows))
    return out


def forward_block(h: HiddenState, mask, layer: int, params: ModelParams,
                  past_kv: tuple[np.ndarray, np.ndarray] | None = None):
    """One pre-norm block: per-expert projections, one joint attention, per-expert FFN.

    ``mask`` is ``(n_new, n_past + n_new)`` when ``past_kv`` holds cached
    keys/values of earlier tokens. Returns the new hidden state and the
    rotated keys and values of the block's own tokens.
    """
    cfg = params.config
    x = h.x
    n = x.shape[0]
    H, dh = cfg.heads, cfg.head_dim
    eps = cfg.norm_eps
    groups = _expert_rows(h.experts)
    whole = len(groups) == 1

    xs, qs, ks, vs = [], [], [], []
    for e, rows in groups:
        xe = x if whole else take_rows(x, rows)
        hn = rms_norm(xe, params.resolve(layer, e, "attn_norm"), eps)
        m = xe.shape[0]
        q = rms_norm(reshape(matmul(hn, params.resolve(layer, e, "wq")), (m, H, dh)),
                     params.resolve(layer, e, "q_norm"), eps)
        k = rms_norm(reshape(matmul(hn, params.resolve(layer, e, "wk")), (m, H, dh)),
                     params.resolve(layer, e, "k_norm"), eps)
        v = reshape(matmul(hn, params.resolve(layer, e, "wv")), (m, H, dh))
        xs.append(xe), qs.append(q), ks.append(k), vs.append(v)
    all_rows = [rows for _, rows in groups]
    q = qs[0] if whole else scatter_rows(qs, all_rows, n)
    k = ks[0] if whole else scatter_rows(ks, all_rows, n)
    v = vs[0] if whole else scatter_rows(vs, all_rows, n)
    q = rope_2d(q, h.positions, cfg.rope_base)
    k = rope_2d(k, h.positions, cfg.rope_base)
    if past_kv is not None and len(past_kv[0]):
        keys = concat([Tensor(past_kv[0]), k], axis=0)
        values = concat([Tensor(past_kv[1]), v], axis=0)
    else:
        keys, values = k, v
    attn = reshape(attention_core(q, keys, values, mask), (n, H * dh))

    outs = []
    for (e, rows), xe in zip(groups, xs):
        ae = attn if whole else take_rows(attn, rows)
        xe = add(xe, matmul(ae, params.resolve(layer, e, "wo")))
        hn = rms_norm(xe, params.resolve(layer, e, "ffn_norm"), eps)
        f = matmul(swiglu(matmul(hn, params.resolve(layer, e, "w_up"))), params.resolve(layer, e, "w_down"))
        outs.append(add(xe, f))
    x_out = outs[0] if whole else scatter_rows(outs, all_rows, n)
    return HiddenState(x_out, h.kinds, h.experts, h.positions), k, v


def final_hidden(h: HiddenState, rows: np.ndarray, params: ModelParams) -> Tensor:
    """Expert-specific final norm applied to the selected rows."""
    cfg = params.config
    parts, idx = [], []
    for e, sel in _expert_rows(h.experts[rows]):
        parts.append(rms_norm(take_rows(h.x, rows[sel]), params.final_norm(e), cfg.norm_eps))
        idx.append(sel)
    if len(parts) == 1:
        return parts[0]
    return scatter_rows(parts, idx, len(rows))


@dataclass
class ModelOutput:
    text_logits: Tensor | None
    text_rows: np.ndarray
    velocity: dict[tuple[int, int], Tensor]
    hidden: HiddenState


def forward_model(packed: PackedSequence | SampleLayout, inputs: SampleInputs | Sequence[SampleInputs],
                  params: ModelParams, mask: MaskSpec | None = None) -> ModelOutput:
    """Logits at every text token and velocities for every noised image.

    ``velocity`` is keyed by ``(sample index, image id)`` and holds the
    prediction un-patched back to the latent grid.
    """
    packed = PackedSequence.of(packed)
    if isinstance(inputs, SampleInputs):
        inputs = [inputs]
    if len(inputs) != len(packed.samples):
        raise InputError("one SampleInputs per packed sample required")
    if mask is None:
        mask = build_mask(packed)
    states = [embed_tokens(s, inp, params) for s, inp in zip(packed.samples, inputs)]
    h = HiddenState(concat([s.x for s in states], axis=0),
                    np.concatenate([s.kinds for s in states]),
                    np.concatenate([s.experts for s in states]),
                    np.concatenate([s.positions for s in states]))
    for layer in range(params.config.layers):
        h, _, _ = forward_block(h, mask, layer, params)
    return _heads(h, packed, params)


def _heads(h: HiddenState, packed: PackedSequence, params: ModelParams) -> ModelOutput:
    cfg = params.config
    text_rows = np.flatnonzero(h.kinds == Modality.TEXT)
    logits = None
    if text_rows.size:
        logits = matmul(final_hidden(h, text_rows, params), params["head.lm"])
    velocity = {}
    noised_rows = np.flatnonzero(h.kinds == Modality.VAE_NOISED)
    if noised_rows.size:
        v = add(matmul(final_hidden(h, noised_rows, params), params["head.velocity.w"]),
                params["head.velocity.b"])
        cursor = 0
        for si, layout in enumerate(packed.samples):
            for split in layout.splits:
                if split.kind is Modality.VAE_NOISED:
                    rec = layout.image(split.image_id)
                    part = take_rows(v, np.arange(cursor, cursor + split.token_count))
                    velocity[(si, split.image_id)] = unpatchify(part, rec.h_lat, rec.w_lat, cfg.patch)
                    cursor += split.token_count
    return ModelOutput(logits, text_rows, velocity, h)


# -- FLOPs ------------------------------------------------------------------------

def count_flops(cfg: ModelConfig, layout: PackedSequence | SampleLayout,
                variants: Sequence[Variant | str] = tuple(Variant)) -> dict[str, int]:
    """Multiply-adds of the block stack (projections, dense attention, FFN) per variant.

    Each token is charged for the weight shapes of the expert it is routed
    to, read from ``param_shapes`` of that variant; attention is charged
    for every (query, key) pair of the packed sequence.
    """
    packed = PackedSequence.of(layout)
    kinds = np.concatenate([s.token_kind for s in packed.samples])
    n = len(kinds)
    out = {}
    for var in variants:
        var = Variant.parse(var)
        vcfg = cfg.with_variant(var)
        shapes = param_shapes(vcfg)
        experts = [expert_of(Modality(k), var) for k in kinds]
        total = 0
        for layer in range(cfg.layers):
            for e in set(experts):
                n_e = experts.count(e)
                for key in ("wq", "wk", "wv", "wo", "w_up", "w_down"):
                    owner = e if e in experts_owning(var, key) else UND
                    rows, cols = shapes[f"layers.{layer}.{owner}.{key}"]
                    total += n_e * rows * cols
            total += 2 * n * n * cfg.heads * cfg.head_dim
        out[var.value] = int(total)
    return out
