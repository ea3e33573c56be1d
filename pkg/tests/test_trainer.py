import csv
import json
from collections import Counter

import numpy as np
import pytest

from bagel_toy.errors import ConfigurationError, NonFiniteLossError
from bagel_toy.model import ModelConfig, ModelParams, init_params
from bagel_toy.task import ToyTask
from bagel_toy.tensor import parameter
from bagel_toy.trainer import (OptimizerState, TrainConfig, apply_gradients, batch_losses, batch_stream,
                               clip_gradients, parse_mixture, run_ablation, sample_batch, train, train_step,
                               update_ema)
from helpers import SMALL

TINY = ModelConfig(**{**SMALL, "vocab_size": 16, "layers": 1})


@pytest.fixture(scope="module")
def task():
    return ToyTask()


def scalar_params(value=0.5):
    return ModelParams(TINY, {"w": parameter(np.array([value]))})


def test_adamw_single_step_closed_form():
    params = scalar_params(0.5)
    state = OptimizerState.create(params)
    cfg = TrainConfig(lr=0.1, warmup_steps=1, grad_clip=0.0)
    apply_gradients(params, {"w": np.array([0.2])}, state, cfg)
    # m_hat = g, v_hat = g^2, so the step is lr * g / (|g| + eps)
    assert params["w"].data[0] == pytest.approx(0.5 - 0.1 * 0.2 / (0.2 + 1e-15), abs=1e-15)
    np.testing.assert_allclose(state.m["w"], 0.1 * 0.2)
    np.testing.assert_allclose(state.v["w"], 0.05 * 0.04)


def test_zero_gradient_leaves_parameters():
    params = scalar_params(0.5)
    state = OptimizerState.create(params)
    apply_gradients(params, {"w": np.zeros(1)}, state, TrainConfig())
    assert params["w"].data[0] == 0.5 and state.step == 1


def test_clip_to_exact_norm(rng):
    g = {"a": rng.standard_normal(5), "b": rng.standard_normal((2, 3))}
    norm = np.sqrt(sum((x ** 2).sum() for x in g.values()))
    for x in g.values():
        x *= 10.0 / norm
    assert clip_gradients(g, 1.0) == pytest.approx(10.0)
    assert np.sqrt(sum((x ** 2).sum() for x in g.values())) == pytest.approx(1.0, abs=1e-14)


def test_clip_leaves_small_gradients(rng):
    g = {"a": rng.standard_normal(4) * 0.01}
    before = g["a"].copy()
    clip_gradients(g, 1.0)
    np.testing.assert_array_equal(g["a"], before)


@pytest.mark.parametrize("ratio", [0.0, 1.0])
def test_ema_degenerate_ratios(ratio):
    params = scalar_params(0.5)
    state = OptimizerState.create(params)
    params["w"].data[...] = 2.0
    update_ema(params, state, ratio)
    assert state.ema["w"][0] == (2.0 if ratio == 0.0 else 0.5)


def test_warmup_is_one_percent():
    cfg = TrainConfig(lr=1.0, total_steps=1000)
    assert cfg.warmup == 10
    assert cfg.lr_at(5) == 0.5 and cfg.lr_at(10) == 1.0 and cfg.lr_at(500) == 1.0


def test_config_validation():
    with pytest.raises(ConfigurationError):
        TrainConfig(mixture={"gen": 0.5, "und": 0.4})
    with pytest.raises(ConfigurationError):
        TrainConfig(ce_weight=0.0)
    with pytest.raises(ConfigurationError):
        TrainConfig(mixture="gen:0.5,video:0.5")


def test_mixture_shorthand():
    assert parse_mixture("4g1u") == {"gen": 0.8, "und": 0.2, "text": 0.0}
    assert parse_mixture("gen:0.5,und:0.5") == {"gen": 0.5, "und": 0.5, "text": 0.0}


def test_generation_only_mixture(task, rng):
    assert {s.kind for s in sample_batch(task, {"gen": 1.0}, rng, 50)} == {"gen"}


def test_mixture_frequencies(task, rng):
    counts = Counter(s.kind for s in sample_batch(task, "4g1u", rng, 10_000))
    assert counts["gen"] / 10_000 == pytest.approx(0.8, abs=0.02)


def test_stream_is_reproducible(task):
    cfg = TrainConfig(seed=3)
    a = [next(s).fingerprint for s in [batch_stream(task, cfg)] for _ in range(3)]
    b = [next(s).fingerprint for s in [batch_stream(task, cfg)] for _ in range(3)]
    assert a == b
    c = [next(s).fingerprint for s in [batch_stream(task, TrainConfig(seed=4))] for _ in range(3)]
    assert a != c


def test_packs_respect_bounds(task):
    cfg = TrainConfig(pack_min=100, pack_max=128)
    stream = batch_stream(task, cfg)
    for _ in range(20):
        b = next(stream)
        assert b.packed.length <= 128


def test_losses_are_positionally_separated(task):
    params = init_params(TINY)
    batch = next(batch_stream(task, TrainConfig(mixture="1g1u")))
    ce, mse = batch_losses(params, batch)
    ce.backward()
    assert not np.any(params["head.velocity.w"].grad)
    params.zero_grad()
    ce2, mse2 = batch_losses(params, batch)
    mse2.backward()
    assert params["head.lm"].grad is None or not np.any(params["head.lm"].grad)


def test_training_is_bitwise_reproducible(task):
    cfg = TrainConfig(total_steps=3)
    a = train(TINY, cfg, task, evaluate_final=False)
    b = train(TINY, cfg, task, evaluate_final=False)
    assert a.history == b.history
    for k in a.params.tensors:
        np.testing.assert_array_equal(a.params[k].data, b.params[k].data)


def test_non_finite_loss_aborts_with_dump(task):
    params = init_params(TINY)
    params["head.velocity.w"].data[0, 0] = np.nan
    batch = next(batch_stream(task, TrainConfig(mixture={"gen": 1.0})))
    with pytest.raises(NonFiniteLossError) as err:
        train_step(params, batch, OptimizerState.create(params), TrainConfig())
    assert err.value.dump["batch"] == batch.fingerprint


def test_ablation_arms_share_streams(task, tmp_path):
    cfg = TrainConfig(total_steps=2, eval_size=4)
    res = run_ablation("arch", TINY, cfg, seeds=(0,), out_dir=tmp_path, task=task)[0]
    prints = {arm: r.fingerprints for arm, r in res.items()}
    assert prints["dense"] == prints["moe"] == prints["mot"]
    lines = (tmp_path / "curves.jsonl").read_text().splitlines()
    assert len(lines) == 2 * 3
    assert set(json.loads(lines[0])) == {"step", "arm", "ce", "mse", "lr", "grad_norm"}
    with open(tmp_path / "curves.csv") as f:
        assert len(list(csv.reader(f))) == 1 + 2 * 3


def test_ratio_and_lr_arms(task):
    cfg = TrainConfig(total_steps=1, eval_size=2, lr=4e-3)
    res = run_ablation("lr", TINY, cfg, task=task)[0]
    assert res["lr_low"].history[0]["lr"] * 4 == res["lr_high"].history[0]["lr"]
    with pytest.raises(ConfigurationError):
        run_ablation("depth", TINY, cfg, task=task)
