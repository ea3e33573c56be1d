"""Mixed CE + MSE training on the toy task, plus the three ablation studies."""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterator, Mapping, Sequence

import numpy as np

from .errors import ConfigurationError, NonFiniteLossError
from .flow import flow_loss
from .layout import PackedSequence, Regime
from .mask import build_mask
from .model import ModelConfig, ModelParams, Variant, forward_model, init_params
from .task import Sample, ToyTask, batch_fingerprint, noise_sample
from .tensor import Tensor, add, concat, cross_entropy, mul, no_grad, reshape, take_rows

log = logging.getLogger(__name__)

KINDS = ("gen", "und", "text")


def parse_mixture(value) -> dict[str, float]:
    """Accept a mapping, ``"gen:0.8,und:0.2"`` or the ``"4g1u"`` shorthand."""
    if isinstance(value, Mapping):
        mix = {k: float(v) for k, v in value.items()}
    else:
        s = str(value).strip().lower()
        if s.endswith("u") and "g" in s and ":" not in s:
            g, u = s[:-1].split("g")
            total = float(g) + float(u)
            mix = {"gen": float(g) / total, "und": float(u) / total}
        else:
            mix = {}
            for part in s.split(","):
                k, _, v = part.partition(":")
                mix[k.strip()] = float(v)
    for k in mix:
        if k not in KINDS:
            raise ConfigurationError(f"unknown mixture component {k!r}")
    mix = {k: mix.get(k, 0.0) for k in KINDS}
    if min(mix.values()) < 0 or abs(sum(mix.values()) - 1.0) > 1e-9:
        raise ConfigurationError(f"mixture ratios must be non-negative and sum to 1, got {mix}")
    return mix


@dataclass
class TrainConfig:
    lr: float = 2e-3
    warmup_steps: int | None = None  # None -> 1% of total_steps
    total_steps: int = 1000
    ce_weight: float = 0.25
    mse_weight: float = 1.0
    betas: tuple[float, float] = (0.9, 0.95)
    eps: float = 1e-15
    weight_decay: float = 0.0
    grad_clip: float = 1.0
    ema: float = 0.9999
    mixture: dict = field(default_factory=lambda: {"gen": 0.8, "und": 0.2, "text": 0.0})
    pack_min: int = 192
    pack_max: int = 256
    seed: int = 0
    timestep_shift: float = 1.0
    cfg_dropout: tuple[float, float, float] = (0.1, 0.5, 0.1)
    regime: str = "interleaved"
    multi_image_prob: float = 0.0
    df_images: int = 3
    grouping_prob: float = 0.5
    eval_size: int = 48

    def __post_init__(self):
        self.mixture = parse_mixture(self.mixture)
        self.betas = tuple(float(b) for b in self.betas)
        self.cfg_dropout = tuple(float(p) for p in self.cfg_dropout)
        self.regime = Regime.parse(self.regime).value
        if self.ce_weight <= 0 or self.mse_weight <= 0:
            raise ConfigurationError("loss weights must be positive")
        if self.lr <= 0 or self.total_steps < 0:
            raise ConfigurationError("lr must be positive and total_steps non-negative")
        if not all(0.0 <= b < 1.0 for b in self.betas) or len(self.betas) != 2:
            raise ConfigurationError(f"invalid betas {self.betas}")
        if not 0.0 <= self.ema <= 1.0:
            raise ConfigurationError("ema ratio must lie in [0, 1]")
        if self.pack_min > self.pack_max:
            raise ConfigurationError("pack_min exceeds pack_max")

    @property
    def warmup(self) -> int:
        if self.warmup_steps is not None:
            return int(self.warmup_steps)
        return max(1, round(0.01 * self.total_steps))

    def lr_at(self, step: int) -> float:
        """Linear warmup to ``lr`` then constant; ``step`` counts from 1."""
        return self.lr * min(1.0, step / self.warmup)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["betas"], d["cfg_dropout"] = list(self.betas), list(self.cfg_dropout)
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "TrainConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


# -- data ------------------------------------------------------------------------

@dataclass
class Batch:
    samples: list[Sample]
    packed: PackedSequence
    fingerprint: str

    @property
    def inputs(self):
        return [s.inputs for s in self.samples]


def draw_sample(task: ToyTask, kind: str, rng: np.random.Generator, cfg: TrainConfig) -> Sample:
    cap = task.draw_caption(rng)
    if kind == "und":
        return task.understanding(cap)
    if kind == "text":
        return task.text_only(cap)
    regime = Regime.parse(cfg.regime)
    if regime is Regime.DIFFUSION_FORCING:
        caps = [cap] + [task.draw_caption(rng) for _ in range(cfg.df_images - 1)]
    elif rng.random() < cfg.multi_image_prob:
        caps = [cap, task.draw_caption(rng)]
    else:
        caps = [cap]
    sample = task.generation(caps, regime)
    return noise_sample(sample, rng, cfg.timestep_shift, cfg.grouping_prob, cfg.cfg_dropout)


def sample_batch(task: ToyTask, mixture, rng: np.random.Generator, n: int,
                 cfg: TrainConfig | None = None) -> list[Sample]:
    """``n`` samples with one categorical draw of the sample kind each."""
    cfg = cfg or TrainConfig()
    mix = parse_mixture(mixture)
    probs = np.array([mix[k] for k in KINDS])
    return [draw_sample(task, KINDS[int(rng.choice(len(KINDS), p=probs))], rng, cfg) for _ in range(n)]


def batch_stream(task: ToyTask, cfg: TrainConfig, rng: np.random.Generator | None = None) -> Iterator[Batch]:
    """Endless packs of ``pack_min..pack_max`` tokens; a sample that does not fit waits for the next pack."""
    rng = rng if rng is not None else np.random.default_rng([cfg.seed, 1])
    probs = np.array([cfg.mixture[k] for k in KINDS])
    carry: Sample | None = None
    while True:
        samples, size = [], 0
        while size < cfg.pack_min:
            s = carry if carry is not None else draw_sample(task, KINDS[int(rng.choice(3, p=probs))], rng, cfg)
            carry = None
            if s.layout.n_tokens > cfg.pack_max:
                raise ConfigurationError(f"sample of {s.layout.n_tokens} tokens exceeds pack_max")
            if size + s.layout.n_tokens > cfg.pack_max:
                carry = s
                break
            samples.append(s)
            size += s.layout.n_tokens
        yield Batch(samples, PackedSequence(tuple(s.layout for s in samples)), batch_fingerprint(samples))


# -- losses ----------------------------------------------------------------------

def batch_losses(params: ModelParams, batch: Batch) -> tuple[Tensor | None, Tensor | None]:
    """Token-averaged CE over text targets and element-averaged MSE over noised latents."""
    out = forward_model(batch.packed, batch.inputs, params, build_mask(batch.packed))
    ce = mse = None
    targets = np.concatenate([s.ce_targets for s in batch.samples]) if batch.samples else np.zeros(0)
    keep = np.flatnonzero(targets >= 0)
    if keep.size:
        ce = cross_entropy(take_rows(out.text_logits, keep), targets[keep])
    preds, x0s, epss = [], [], []
    for si, s in enumerate(batch.samples):
        for im in s.layout.images:
            if im.has_noised:
                v = out.velocity[(si, im.image_id)]
                preds.append(reshape(v, (-1, v.shape[-1])))
                x0s.append(s.x0[im.image_id].reshape(-1, v.shape[-1]))
                epss.append(s.eps[im.image_id].reshape(-1, v.shape[-1]))
    if preds:
        mse = flow_loss(concat(preds, 0), np.concatenate(x0s), np.concatenate(epss))
    return ce, mse


def total_loss(ce: Tensor | None, mse: Tensor | None, cfg: TrainConfig) -> Tensor | None:
    terms = []
    if ce is not None:
        terms.append(mul(ce, cfg.ce_weight))
    if mse is not None:
        terms.append(mul(mse, cfg.mse_weight))
    if not terms:
        return None
    return terms[0] if len(terms) == 1 else add(terms[0], terms[1])


# -- optimiser -------------------------------------------------------------------

@dataclass
class OptimizerState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    ema: dict[str, np.ndarray]
    step: int = 0

    @classmethod
    def create(cls, params: ModelParams) -> "OptimizerState":
        return cls({k: np.zeros_like(t.data) for k, t in params.tensors.items()},
                   {k: np.zeros_like(t.data) for k, t in params.tensors.items()},
                   params.state_dict())


def clip_gradients(grads: dict[str, np.ndarray], max_norm: float) -> float:
    """Scale ``grads`` in place to global norm at most ``max_norm``; returns the pre-clip norm."""
    norm = float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / norm
        for g in grads.values():
            g *= scale
    return norm


def adamw_update(params: ModelParams, grads: dict[str, np.ndarray], state: OptimizerState,
                 lr: float, cfg: TrainConfig) -> None:
    b1, b2 = cfg.betas
    t = state.step
    c1, c2 = 1.0 - b1 ** t, 1.0 - b2 ** t
    for name, p in params.tensors.items():
        g = grads[name]
        m, v = state.m[name], state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        if cfg.weight_decay:
            p.data *= 1.0 - lr * cfg.weight_decay
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + cfg.eps)


def update_ema(params: ModelParams, state: OptimizerState, ratio: float) -> None:
    for name, p in params.tensors.items():
        e = state.ema[name]
        e *= ratio
        e += (1.0 - ratio) * p.data


def train_step(params: ModelParams, batch: Batch, state: OptimizerState, cfg: TrainConfig) -> dict:
    """One optimisation step; returns the step's losses, learning rate and gradient norm."""
    params.zero_grad()
    ce, mse = batch_losses(params, batch)
    loss = total_loss(ce, mse, cfg)
    ce_v = float(ce.item()) if ce is not None else float("nan")
    mse_v = float(mse.item()) if mse is not None else float("nan")
    if loss is None or not np.isfinite(loss.item()):
        raise NonFiniteLossError(
            f"non-finite loss at step {state.step + 1}",
            dump={"step": state.step + 1, "ce": ce_v, "mse": mse_v, "batch": batch.fingerprint,
                  "layouts": [s.layout.describe() for s in batch.samples]})
    loss.backward()
    grads = {k: (t.grad.copy() if t.grad is not None else np.zeros_like(t.data))
             for k, t in params.tensors.items()}
    return apply_gradients(params, grads, state, cfg) | {"ce": ce_v, "mse": mse_v}


def apply_gradients(params: ModelParams, grads: dict[str, np.ndarray], state: OptimizerState,
                    cfg: TrainConfig) -> dict:
    state.step += 1
    norm = clip_gradients(grads, cfg.grad_clip)
    lr = cfg.lr_at(state.step)
    adamw_update(params, grads, state, lr, cfg)
    update_ema(params, state, cfg.ema)
    return {"step": state.step, "lr": lr, "grad_norm": norm}


# -- evaluation ------------------------------------------------------------------

def eval_batches(task: ToyTask, cfg: TrainConfig, seed: int = 10_007) -> tuple[list[Batch], list[Batch]]:
    """Fixed held-out understanding and generation sets.

    Generation samples use evenly spaced noise levels and fixed noise, so
    every arm is scored on the same regression problems.
    """
    rng = np.random.default_rng(seed)
    n = cfg.eval_size
    und = [task.understanding(task.draw_caption(rng, heldout=True)) for _ in range(n)]
    gen = []
    for t in (np.arange(n) + 0.5) / n:
        s = task.generation([task.draw_caption(rng, heldout=True)])
        gen.append(noise_sample(s, rng, cfg.timestep_shift, cfg_dropout=None, fixed_t=float(t)))

    def chunk(samples):
        out, cur, size = [], [], 0
        for s in samples:
            if cur and size + s.layout.n_tokens > cfg.pack_max:
                out.append(cur)
                cur, size = [], 0
            cur.append(s)
            size += s.layout.n_tokens
        out.append(cur)
        return [Batch(c, PackedSequence(tuple(x.layout for x in c)), batch_fingerprint(c)) for c in out]

    return chunk(und), chunk(gen)


def evaluate(params: ModelParams, evalset: tuple[list[Batch], list[Batch]]) -> dict:
    und, gen = evalset
    ce_sum = ce_n = mse_sum = mse_n = 0.0
    with no_grad():
        for b in und:
            ce, _ = batch_losses(params, b)
            k = int(sum((s.ce_targets >= 0).sum() for s in b.samples))
            ce_sum += ce.item() * k
            ce_n += k
        for b in gen:
            _, mse = batch_losses(params, b)
            k = sum(s.x0[i].size for s in b.samples for i in s.x0)
            mse_sum += mse.item() * k
            mse_n += k
    return {"ce": ce_sum / max(ce_n, 1), "mse": mse_sum / max(mse_n, 1)}


# -- training loops --------------------------------------------------------------

@dataclass
class TrainResult:
    params: ModelParams
    state: OptimizerState
    history: list[dict]
    final: dict
    fingerprints: list[str]

    def ema_params(self) -> ModelParams:
        p = self.params.copy()
        p.load_state_dict(self.state.ema)
        return p


def train(model_cfg: ModelConfig, cfg: TrainConfig, task: ToyTask | None = None, arm: str = "main",
          on_step: Callable[[dict], None] | None = None, evaluate_final: bool = True,
          params: ModelParams | None = None) -> TrainResult:
    task = task or ToyTask(vit_patch=model_cfg.vit_patch, vit_dim=model_cfg.vit_dim, vit_seed=model_cfg.vit_seed)
    params = params or init_params(model_cfg, seed=cfg.seed)
    state = OptimizerState.create(params)
    stream = batch_stream(task, cfg)
    history, prints = [], []
    for _ in range(cfg.total_steps):
        batch = next(stream)
        rec = train_step(params, batch, state, cfg)
        rec = {"step": rec["step"], "arm": arm, "ce": rec["ce"], "mse": rec["mse"],
               "lr": rec["lr"], "grad_norm": rec["grad_norm"]}
        history.append(rec)
        prints.append(batch.fingerprint)
        if on_step is not None:
            on_step(rec)
    final = evaluate(params, eval_batches(task, cfg)) if evaluate_final else {}
    return TrainResult(params, state, history, final, prints)


ARMS = {
    "arch": lambda base: {v.value: {"variant": v.value} for v in Variant},
    "ratio": lambda base: {r: {"mixture": r} for r in ("1g1u", "2g1u", "4g1u")},
    "lr": lambda base: {"lr_low": {"lr": base / 4.0}, "lr_high": {"lr": base}},
}


def ablation_arms(axis: str, cfg: TrainConfig) -> dict[str, dict]:
    """Arm name -> the single setting it overrides."""
    if axis not in ARMS:
        raise ConfigurationError(f"unknown ablation axis {axis!r} (expected arch, ratio or lr)")
    return ARMS[axis](cfg.lr)


def run_ablation(axis: str, model_cfg: ModelConfig, cfg: TrainConfig, seeds=(0,),
                 out_dir: str | Path | None = None, task: ToyTask | None = None,
                 only: Sequence[str] | None = None) -> dict:
    """Train every arm of ``axis`` for every seed; arms differ only in the ablated setting.

    Returns ``{seed: {arm: TrainResult}}``. With ``out_dir`` the per-step
    records go to ``curves.jsonl`` and ``curves.csv`` and the final
    held-out losses to ``final.json``. ``only`` restricts the run to some arms.
    """
    task = task or ToyTask(vit_patch=model_cfg.vit_patch, vit_dim=model_cfg.vit_dim, vit_seed=model_cfg.vit_seed)
    arms = ablation_arms(axis, cfg)
    if only is not None:
        unknown = set(only) - set(arms)
        if unknown:
            raise ConfigurationError(f"unknown arms {sorted(unknown)} for axis {axis!r}")
        arms = {k: v for k, v in arms.items() if k in only}
    results: dict[int, dict[str, TrainResult]] = {}
    out = Path(out_dir) if out_dir is not None else None
    jsonl = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        jsonl = open(out / "curves.jsonl", "w")
    try:
        for seed in seeds:
            results[seed] = {}
            for arm, override in arms.items():
                mcfg = model_cfg.with_variant(override["variant"]) if "variant" in override else model_cfg
                tcfg = dataclasses.replace(cfg, seed=seed, **{k: v for k, v in override.items() if k != "variant"})
                name = arm if len(seeds) == 1 else f"{arm}@{seed}"
                writer = (lambda r: jsonl.write(json.dumps(r) + "\n")) if jsonl else None
                log.info("ablation %s arm %s seed %d", axis, arm, seed)
                results[seed][arm] = train(mcfg, tcfg, task, arm=name, on_step=writer)
    finally:
        if jsonl is not None:
            jsonl.close()
    if out is not None:
        with open(out / "curves.csv", "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["step", "arm", "ce", "mse", "lr", "grad_norm"])
            for per_seed in results.values():
                for res in per_seed.values():
                    for r in res.history:
                        w.writerow([r["step"], r["arm"], r["ce"], r["mse"], r["lr"], r["grad_norm"]])
        final = {str(s): {a: r.final for a, r in per.items()} for s, per in results.items()}
        (out / "final.json").write_text(json.dumps(final, indent=2))
    return results
