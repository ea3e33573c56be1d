"""Command-line entry point: ``bagel-toy {train,ablate,generate,mask-dump,flops}``.

Exit status is 0 on success, 2 for configuration, layout or checkpoint
errors and 3 for numerical failures during training or sampling.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig, load_config, parse_overrides
from .errors import BagelError, ConfigurationError, NonFiniteLossError, SamplingError
from .inference import DecodeScript, SamplingParams, run_script
from .layout import PackedSequence, build_sample_layout, parse_layout_script
from .mask import build_mask, mask_stats, oracle_mask, render_mask
from .model import count_flops, init_params
from .task import ToyTask
from .trainer import OptimizerState, batch_stream, eval_batches, evaluate, run_ablation, train_step

EXIT_CONFIG, EXIT_NUMERIC = 2, 3
log = logging.getLogger("bagel_toy")


def _run_config(args, extra) -> RunConfig:
    overrides = parse_overrides(extra)
    if getattr(args, "out", None):
        overrides["run.out_dir"] = args.out
    return load_config(args.config, overrides)


def _task(cfg: RunConfig) -> ToyTask:
    m = cfg.model
    return ToyTask(vit_patch=m.vit_patch, vit_dim=m.vit_dim, vit_seed=m.vit_seed)


def cmd_train(args, extra) -> int:
    cfg = _run_config(args, extra)
    out = Path(cfg.run.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cfg.save(out / "config.ini")
    task = _task(cfg)
    params = init_params(cfg.model, seed=cfg.train.seed)
    state = OptimizerState.create(params)
    stream = batch_stream(task, cfg.train)
    with open(out / "metrics.jsonl", "w") as f:
        for _ in range(cfg.train.total_steps):
            try:
                rec = train_step(params, next(stream), state, cfg.train)
            except NonFiniteLossError as exc:
                (out / "nonfinite_dump.json").write_text(json.dumps(exc.dump, indent=2))
                raise
            rec = {"step": rec["step"], "arm": "main", "ce": rec["ce"], "mse": rec["mse"],
                   "lr": rec["lr"], "grad_norm": rec["grad_norm"]}
            f.write(json.dumps(rec) + "\n")
            if cfg.run.ema_every and state.step % cfg.run.ema_every == 0:
                save_checkpoint(out / f"ema_{state.step:06d}.ckpt", params, {"step": state.step, "ema": True},
                                state=state.ema)
    meta = {"step": state.step, "seed": cfg.train.seed}
    if cfg.run.eval:
        meta["eval"] = evaluate(params, eval_batches(task, cfg.train))
        log.info("held-out ce=%.4f mse=%.4f", meta["eval"]["ce"], meta["eval"]["mse"])
    save_checkpoint(out / "final.ckpt", params, meta)
    save_checkpoint(out / "ema.ckpt", params, meta | {"ema": True}, state=state.ema)
    print(out)
    return 0


def cmd_ablate(args, extra) -> int:
    cfg = _run_config(args, extra)
    out = Path(cfg.run.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cfg.save(out / "config.ini")
    seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else [cfg.train.seed]
    results = run_ablation(args.axis, cfg.model, cfg.train, seeds, out, _task(cfg))
    for seed, arms in results.items():
        for arm, res in arms.items():
            print(f"seed={seed} arm={arm} ce={res.final['ce']:.4f} mse={res.final['mse']:.4f}")
    return 0


def cmd_generate(args, extra) -> int:
    if extra:
        raise ConfigurationError(f"unexpected arguments {' '.join(extra)}")
    params, _ = load_checkpoint(args.checkpoint, args.variant)
    script = DecodeScript.parse(Path(args.script).read_text())
    sp = SamplingParams(args.temperature, args.steps, args.cfg_text, args.cfg_image, args.shift)
    tr = run_script(script, params, sp, seed=args.seed)
    out = tr.save(args.out)
    for seg in tr.segments:
        print(seg["type"], seg.get("text", seg.get("file", "")))
    print(out)
    return 0


def _layout_from_file(path):
    items, regime = parse_layout_script(Path(path).read_text())
    return build_sample_layout(items, regime)


def cmd_mask_dump(args, extra) -> int:
    layout = _layout_from_file(args.script)
    mask = (oracle_mask if args.oracle else build_mask)(PackedSequence.of(layout))
    stats = mask_stats(mask)
    text = render_mask(mask)
    head, rest = text.split("\n", 1)
    body = f"{head}\n# {layout.describe()}\n# " + " ".join(f"{k}={v}" for k, v in stats.items()) + "\n" + rest
    if args.out:
        Path(args.out).write_text(body)
    else:
        sys.stdout.write(body)
    return 0


def cmd_flops(args, extra) -> int:
    cfg = _run_config(args, extra)
    layout = _layout_from_file(args.script)
    print(json.dumps(count_flops(cfg.model, layout), sort_keys=True))
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="bagel-toy", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train one model; extra --key value pairs override the config")
    t.add_argument("--config")
    t.add_argument("--out")
    t.set_defaults(func=cmd_train)

    a = sub.add_parser("ablate", help="run one ablation study")
    a.add_argument("--axis", required=True, choices=("arch", "ratio", "lr"))
    a.add_argument("--config")
    a.add_argument("--out")
    a.add_argument("--seeds", help="comma-separated seeds (default: the configured seed)")
    a.set_defaults(func=cmd_ablate)

    g = sub.add_parser("generate", help="decode a script with a trained checkpoint")
    g.add_argument("--checkpoint", required=True)
    g.add_argument("--script", required=True)
    g.add_argument("--out", required=True)
    g.add_argument("--variant", help="expected model variant; mismatch is a load error")
    g.add_argument("--steps", type=int, default=20)
    g.add_argument("--cfg-text", type=float, default=1.0)
    g.add_argument("--cfg-image", type=float, default=1.0)
    g.add_argument("--shift", type=float, default=1.0)
    g.add_argument("--temperature", type=float, default=0.0)
    g.add_argument("--seed", type=int, default=0)
    g.set_defaults(func=cmd_generate)

    m = sub.add_parser("mask-dump", help="render the attention mask of a layout script")
    m.add_argument("script")
    m.add_argument("--out")
    m.add_argument("--oracle", action="store_true", help="use the per-pair reference evaluator")
    m.set_defaults(func=cmd_mask_dump)

    f = sub.add_parser("flops", help="block FLOPs of a layout script per variant")
    f.add_argument("script")
    f.add_argument("--config")
    f.set_defaults(func=cmd_flops)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args, extra = parser.parse_known_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args, extra)
    except (NonFiniteLossError, SamplingError, FloatingPointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (BagelError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
