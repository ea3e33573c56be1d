"""The twelve acceptance gates, each at its pinned tolerance.

Every test prints one ``[acceptance N] PASS|FAIL`` line to the terminal
before asserting, so ``pytest -v -k acceptance`` doubles as a report.
The training-based gates (9 to 12) take roughly a quarter of an hour on
one CPU core.
"""

import time
from collections import Counter

import numpy as np
import pytest
from scipy import stats

from bagel_toy.flow import euler_sample, make_schedule, noise_latents, sample_timestep, shifted_cdf, velocity_target
from bagel_toy.inference import DecodeScript, SamplingParams, generation_accuracy, run_script
from bagel_toy.layout import ImageSpec, TextBlock, build_sample_layout
from bagel_toy.mask import build_mask, oracle_mask
from bagel_toy.model import ModelConfig, Variant, count_flops, forward_model, init_params
from bagel_toy.task import ToyTask, noise_sample
from bagel_toy.tensor import add, cross_entropy, mse, mul, numerical_grad, relative_error
from bagel_toy.trainer import TrainConfig, run_ablation, train
from helpers import random_inputs, random_layout, small_config

# Ablation budget: 800 steps per arm, three seeds, default toy model.
ABLATION_STEPS = 800
ABLATION_SEEDS = (0, 1, 2)
ABLATION_LR = 3e-3
LR_AXIS_HIGH = 4e-3
# End-to-end fidelity run.
FIDELITY_STEPS = 5000
FIDELITY_LR = 3e-3
FIDELITY_CAPTIONS = 48


def verdict(report, n: int, ok: bool, detail: str) -> None:
    report(f"[acceptance {n:2d}] {'PASS' if ok else 'FAIL'}: {detail}")
    assert ok, detail


@pytest.fixture(scope="module")
def task():
    return ToyTask()


def test_acceptance_01_mask_oracle(report):
    rng = np.random.default_rng(2024)
    layouts = [random_layout(rng) for _ in range(1000)]
    t0 = time.perf_counter()
    bad = sum(not np.array_equal(build_mask(l).permitted, oracle_mask(l).permitted) for l in layouts)
    elapsed = time.perf_counter() - t0
    regimes = Counter(l.regime.value for l in layouts)
    verdict(report, 1, bad == 0 and elapsed < 10.0,
            f"{len(layouts) - bad}/{len(layouts)} layouts match {dict(regimes)} in {elapsed:.2f}s")


def test_acceptance_02_gradients(report):
    cfg = small_config("mot", vocab_size=16)
    rng = np.random.default_rng(7)
    params = init_params(cfg, seed=7, tie_experts=False)
    # perturb norms so their gradients are not degenerate at unit init
    for name, p in params.tensors.items():
        if "norm" in name:
            p.data[...] += rng.normal(0, 0.1, p.data.shape)
    layout = build_sample_layout([TextBlock(5), ImageSpec(4, 4, "gen")])
    inputs = random_inputs(layout, cfg, rng)
    targets = rng.integers(0, cfg.vocab_size, 5)
    v_target = rng.standard_normal((4, 4, cfg.latent_channels))

    def loss():
        out = forward_model(layout, inputs, params)
        return add(cross_entropy(out.text_logits, targets), mul(mse(out.velocity[(0, 0)], v_target), 1.0))

    t0 = time.perf_counter()
    params.zero_grad()
    loss().backward()
    worst, worst_name = 0.0, ""
    for name, p in params.tensors.items():
        coords = rng.choice(p.data.size, size=min(50, p.data.size), replace=False)
        analytic = p.grad.reshape(-1)[coords] if p.grad is not None else np.zeros(len(coords))
        numeric = numerical_grad(lambda: loss().item(), p.data, coords)
        err = relative_error(analytic, numeric)
        if err > worst:
            worst, worst_name = err, name
    elapsed = time.perf_counter() - t0
    verdict(report, 2, worst < 1e-3 and elapsed < 120,
            f"{len(params.tensors)} tensors, worst relative error {worst:.2e} ({worst_name}), {elapsed:.1f}s")


def test_acceptance_03_kv_cache(report):
    params = init_params(small_config("mot"), seed=11, tie_experts=False)
    script = DecodeScript.parse("prompt red square green frame blue cross yellow square\n"
                                "image 8 8 steps=10 cfg_text=2 cfg_image=1.5\n"
                                "text 6\n")
    t0 = time.perf_counter()
    cached = run_script(script, params, SamplingParams(temperature=0.0), seed=5)
    full = run_script(script, params, SamplingParams(temperature=0.0), seed=5, use_cache=False)
    elapsed = time.perf_counter() - t0
    same_text = [s.get("tokens") for s in cached.segments] == [s.get("tokens") for s in full.segments]
    diff = float(np.abs(cached.latents[0] - full.latents[0]).max())
    verdict(report, 3, same_text and diff < 1e-10 and elapsed < 60,
            f"text identical={same_text}, latent max diff {diff:.1e}, {elapsed:.1f}s")


def test_acceptance_04_flops_parity(report):
    rng = np.random.default_rng(4)
    cfg = ModelConfig()
    counts = [count_flops(cfg, random_layout(rng)) for _ in range(20)]
    equal = all(len(set(c.values())) == 1 and all(isinstance(v, int) for v in c.values()) for c in counts)
    verdict(report, 4, equal, f"20 layouts, equal integer counts per variant: {equal}")


def test_acceptance_05_tied_mot_equals_dense(report):
    rng = np.random.default_rng(5)
    cfg = ModelConfig(variant="mot")
    layout = build_sample_layout([TextBlock(4), ImageSpec(4, 4, "cond"), TextBlock(3), ImageSpec(4, 4, "gen")])
    inputs = random_inputs(layout, cfg, rng)
    a = forward_model(layout, inputs, init_params(cfg, seed=1))
    b = forward_model(layout, inputs, init_params(cfg.with_variant(Variant.DENSE), seed=1))
    diff = max(float(np.abs(a.text_logits.data - b.text_logits.data).max()),
               max(float(np.abs(a.velocity[k].data - b.velocity[k].data).max()) for k in a.velocity))
    verdict(report, 5, diff < 1e-12, f"max abs diff {diff:.1e}")


def test_acceptance_06_rectified_flow(report):
    rng = np.random.default_rng(6)
    x0, eps = rng.standard_normal((8, 8, 16)), rng.standard_normal((8, 8, 16))
    v = velocity_target(x0, eps)
    errs = {n: float(np.abs(euler_sample(lambda x, t: v, eps, make_schedule(n)) - x0).max()) for n in (1, 3, 50)}
    ends = np.array_equal(noise_latents(x0, eps, 0.0), x0) and np.array_equal(noise_latents(x0, eps, 1.0), eps)
    ok = ends and max(errs.values()) < 1e-12
    verdict(report, 6, ok, f"Euler errors {', '.join(f'{n}:{e:.0e}' for n, e in errs.items())}; endpoints exact={ends}")


def test_acceptance_07_timestep_shift(report):
    ds = {}
    for s in (1.0, 4.0):
        draws = sample_timestep(s, np.random.default_rng(int(s)), size=100_000)
        ds[s] = stats.kstest(draws, lambda t: shifted_cdf(t, s)).statistic
    verdict(report, 7, max(ds.values()) < 0.01, f"KS distance s=1 {ds[1.0]:.4f}, s=4 {ds[4.0]:.4f}")


def test_acceptance_08_dropout_frequencies(task, report):
    rng = np.random.default_rng(8)
    caps = task.train[:16]
    n, hits = 10_000, np.zeros(3)
    for i in range(n):
        s = noise_sample(task.generation([caps[i % len(caps)]]), rng)
        d = s.layout.images[0].dropped
        hits += (d.text_ctx, d.vit, d.vae_clean)
    freq = hits / n
    ok = bool(np.all(np.abs(freq - (0.1, 0.5, 0.1)) <= 0.02))
    verdict(report, 8, ok, f"text {freq[0]:.4f}, vit {freq[1]:.4f}, vae {freq[2]:.4f} over {n} samples")


def _ablate(axis, task, lr, only=None):
    cfg = TrainConfig(total_steps=ABLATION_STEPS, lr=lr)
    t0 = time.perf_counter()
    res = run_ablation(axis, ModelConfig(), cfg, ABLATION_SEEDS, task=task, only=only)
    per_arm = (time.perf_counter() - t0) / sum(len(v) for v in res.values())
    return {s: {a: r.final for a, r in arms.items()} for s, arms in res.items()}, per_arm


@pytest.mark.slow
def test_acceptance_09_mot_vs_dense(task, report):
    finals, per_arm = _ablate("arch", task, ABLATION_LR, only=("dense", "mot"))
    mot = np.mean([f["mot"]["mse"] for f in finals.values()])
    dense = np.mean([f["dense"]["mse"] for f in finals.values()])
    verdict(report, 9, mot <= dense and per_arm < 1800,
            f"mean final MSE mot {mot:.4f} vs dense {dense:.4f} over {len(finals)} seeds, {per_arm:.0f}s per arm")


@pytest.mark.slow
def test_acceptance_10_ratio(task, report):
    finals, _ = _ablate("ratio", task, ABLATION_LR, only=("1g1u", "4g1u"))
    mse4 = np.mean([f["4g1u"]["mse"] for f in finals.values()])
    mse1 = np.mean([f["1g1u"]["mse"] for f in finals.values()])
    dce = np.mean([f["4g1u"]["ce"] - f["1g1u"]["ce"] for f in finals.values()])
    verdict(report, 10, mse4 < mse1,
            f"mean final MSE 4:1 {mse4:.4f} vs 1:1 {mse1:.4f}; CE(4:1) - CE(1:1) = {dce:+.4f} (not gated)")


@pytest.mark.slow
def test_acceptance_11_lr_tradeoff(task, report):
    finals, _ = _ablate("lr", task, LR_AXIS_HIGH)
    wins = [f["lr_high"]["mse"] < f["lr_low"]["mse"] and f["lr_low"]["ce"] < f["lr_high"]["ce"]
            for f in finals.values()]
    detail = "; ".join(f"seed {s}: mse {f['lr_high']['mse']:.4f}/{f['lr_low']['mse']:.4f} "
                       f"ce {f['lr_high']['ce']:.4f}/{f['lr_low']['ce']:.4f}" for s, f in finals.items())
    verdict(report, 11, sum(wins) * 2 > len(wins), f"{sum(wins)}/{len(wins)} seeds (high/low) {detail}")


@pytest.mark.slow
def test_acceptance_12_generation_fidelity(task, report):
    t0 = time.perf_counter()
    res = train(ModelConfig(), TrainConfig(total_steps=FIDELITY_STEPS, lr=FIDELITY_LR), task, evaluate_final=False)
    caps = task.heldout[:FIDELITY_CAPTIONS]
    acc = generation_accuracy(res.params, caps, SamplingParams(steps=20), seed=12)
    elapsed = time.perf_counter() - t0
    verdict(report, 12, acc >= 0.8,
            f"attribute accuracy {acc:.3f} on {len(caps)} held-out captions after {FIDELITY_STEPS} steps, "
            f"{elapsed:.0f}s")
