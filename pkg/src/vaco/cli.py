"""Command-line entry point: ``vaco <subcommand> ...``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from vaco import artifacts
from vaco.config import ConfigError, FlopsConfig, RunConfig, dump_config, load_config
from vaco.decoder import extract_last_token_attention
from vaco.experiment import build_model, build_world, make_data, sweep_rows, train_pipeline
from vaco.flops import flops_estimate, table_layout
from vaco.gateway_mask import build_tgm, dump_mask
from vaco.gradcheck import run_gradcheck
from vaco.model import Batch
from vaco.numerics import no_grad
from vaco.sequence import build_layout
from vaco.teachers import ANSWER_LEN, PROMPT_TEMPLATES
from vaco.training import dataset_batch, evaluate

log = logging.getLogger("vaco")
PROMPT_LEN = len(PROMPT_TEMPLATES[0])


def _out_dir(cfg, args) -> Path:
    out = Path(args.out or cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_train(args) -> int:
    cfg: RunConfig = load_config(args.config)
    out = _out_dir(cfg, args)
    seed = cfg.seeds[0]
    h = cfg.config_hash()
    result = train_pipeline(cfg, seed, after_pt=lambda m: artifacts.save_checkpoint(out / "ckpt_pt.npz", m.params, h))
    n_tasks = len(result.model.cfg.tasks) if result.model.plan.aligns else 0
    (out / "config.json").write_text(dump_config(cfg))
    (out / "losses_pt.csv").write_text(artifacts.curve_csv(result.pt, n_tasks, h))
    (out / "losses_sft.csv").write_text(artifacts.curve_csv(result.sft, n_tasks, h))
    artifacts.save_checkpoint(out / "ckpt_sft.npz", result.model.params, h)
    if result.model.plan.aligns:
        world = result.model.world
        _, heldout = make_data(cfg, world, seed)
        with no_grad():
            model_out = result.model.forward(dataset_batch(result.model, heldout.subset([0])))
        for name, aligned in zip(result.model.task_names, model_out.aligned):
            artifacts.write_aligned_features(out / f"aligned_{name}.bin", aligned.data[0])
    summary = {"seed": seed, "heldout_text_loss": result.heldout.text_loss,
               "heldout_accuracy": result.heldout.accuracy, "task_cosine": result.heldout.task_cosine}
    print(json.dumps(summary, sort_keys=True))
    return 0


def _load_model(cfg: RunConfig, checkpoint: str):
    world = build_world(cfg)
    model = build_model(cfg, world, cfg.seeds[0])
    stored = artifacts.load_checkpoint(Path(checkpoint), model.params)
    if stored and stored != cfg.config_hash():
        log.warning("checkpoint config hash %s differs from config %s", stored, cfg.config_hash())
    return model


def cmd_eval(args) -> int:
    cfg: RunConfig = load_config(args.config)
    model = _load_model(cfg, args.checkpoint)
    _, heldout = make_data(cfg, model.world, cfg.seeds[0])
    result = evaluate(model, heldout)
    print(json.dumps({"accuracy": result.accuracy, "text_loss": result.text_loss,
                      "task_cosine": result.task_cosine}, sort_keys=True))
    return 0


def cmd_dump_mask(args) -> int:
    cfg: RunConfig = load_config(args.config)
    out = _out_dir(cfg, args)
    if cfg.mask_layout is not None:
        ml = cfg.mask_layout
        layout = build_layout(ml.vision, ml.groups, ml.text)
    else:
        world = build_world(cfg)
        model = build_model(cfg, world, cfg.seeds[0])
        layout = model.layout(PROMPT_LEN + ANSWER_LEN)
    text = dump_mask(build_tgm(layout, cfg.intra_group))
    (out / "mask.txt").write_text(f"# config_hash={cfg.config_hash()}\n" + text)
    sys.stdout.write(text)
    return 0


def cmd_dump_attn(args) -> int:
    cfg: RunConfig = load_config(args.config)
    out = _out_dir(cfg, args)
    model = _load_model(cfg, args.checkpoint)
    _, heldout = make_data(cfg, model.world, cfg.seeds[0])
    full = dataset_batch(model, heldout)
    prompt_only = Batch(full.vision, full.teachers, full.text[:, :PROMPT_LEN])
    with no_grad():
        rec = model.forward(prompt_only, retain_attention=True, align=False)
    k = model.cfg.image.num_patches
    per_layer = np.stack([a[:, :, -1, :k] for a in rec.record.attention], axis=1)  # N x L x h x K
    (out / "attn.csv").write_text(artifacts.attention_csv(per_layer, cfg.config_hash()))
    scores = extract_last_token_attention(rec.record, rec.layout)
    print(json.dumps({"samples": int(per_layer.shape[0]), "mean_vision_mass": float(scores.sum(axis=1).mean())}))
    return 0


def cmd_gradcheck(args) -> int:
    cfg: RunConfig = load_config(args.config)
    report = run_gradcheck(cfg)
    worst = max(report.values())
    for name, err in sorted(report.items()):
        log.debug("%s %.3e", name, err)
    print(f"max relative error: {worst:.3e} over {len(report)} parameters")
    return 0 if worst < 1e-4 else 1


def cmd_flops(args) -> int:
    cfg: FlopsConfig = load_config(args.config, FlopsConfig)
    out = _out_dir(cfg, args)
    blocks = []
    for q in cfg.queries:
        layout = table_layout(q, cfg.tasks, cfg.vision_tokens, cfg.text_tokens)
        report = flops_estimate(cfg.dims, layout)
        blocks.append(f"[queries per task = {q}]\n{report.format()}")
    text = "\n".join(blocks)
    (out / "flops.txt").write_text(f"# config_hash={cfg.config_hash()}\n" + text)
    sys.stdout.write(text)
    return 0


def cmd_sweep(args) -> int:
    cfg: RunConfig = load_config(args.config)
    out = _out_dir(cfg, args)
    rows = sweep_rows(cfg)
    (out / "sweep.csv").write_text(artifacts.sweep_csv(rows, cfg.config_hash()))
    for r in rows:
        print(f"{r['setting']:>12} seed={r['seed']} text_loss={r['final_text_loss']:.4f} acc={r['accuracy']:.3f}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="vaco", description="Task-query visual activation experiments")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")

    def add(name, func, help_text, checkpoint=False):
        p = sub.add_parser(name, help=help_text, description=help_text)
        p.add_argument("config", help="JSON config file")
        if checkpoint:
            p.add_argument("checkpoint", help="checkpoint .npz written by train")
        p.add_argument("--out", help="output directory (overrides output_dir)")
        p.set_defaults(func=func)

    add("train", cmd_train, "run PT then SFT; write loss curves and checkpoints")
    add("eval", cmd_eval, "greedy-decode held-out answers and report accuracy", checkpoint=True)
    add("dump-mask", cmd_dump_mask, "write the gateway mask as a 0/1 grid")
    add("dump-attn", cmd_dump_attn, "write last-token attention over vision tokens as CSV", checkpoint=True)
    add("gradcheck", cmd_gradcheck, "compare analytic and finite-difference gradients on a tiny model")
    add("flops", cmd_flops, "print the analytic FLOPs estimate")
    add("sweep", cmd_sweep, "run a strategy or query-count sweep")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - reported as a runtime failure
        log.debug("failure", exc_info=True)
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
