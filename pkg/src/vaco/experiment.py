"""End-to-end runs: build world and model, train both stages, evaluate, sweep."""

from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass
from typing import Callable

import numpy as np

from vaco.config import RunConfig
from vaco.model import VacoModel
from vaco.teachers import Dataset, SyntheticWorld, generate_dataset
from vaco.training import EvalResult, StageResult, evaluate, run_stage

log = logging.getLogger(__name__)


def build_world(cfg: RunConfig) -> SyntheticWorld:
    specs = [t.teacher(cfg.teacher.gain, cfg.teacher.hidden) for t in cfg.tasks]
    return SyntheticWorld(cfg.image, specs, seed=cfg.teacher.world_seed)


def make_data(cfg: RunConfig, world: SyntheticWorld, seed: int) -> tuple[Dataset, Dataset]:
    link = cfg.data.task_link
    return (
        generate_dataset(world, seed, cfg.data.train, link, "train"),
        generate_dataset(world, seed, cfg.data.heldout, link, "heldout"),
    )


def build_model(cfg: RunConfig, world: SyntheticWorld, seed: int, strategy: str | None = None, queries: int | None = None) -> VacoModel:
    return VacoModel(cfg.model_config(strategy, queries), world, seed=seed)


@dataclass
class RunOutcome:
    model: VacoModel
    pt: StageResult
    sft: StageResult
    heldout: EvalResult
    world_fingerprint_before: str
    world_fingerprint_after: str
    decoder_unchanged_in_pt: bool


def train_pipeline(
    cfg: RunConfig,
    seed: int,
    strategy: str | None = None,
    queries: int | None = None,
    world: SyntheticWorld | None = None,
    data: tuple[Dataset, Dataset] | None = None,
    after_pt: Callable[[VacoModel], None] | None = None,
) -> RunOutcome:
    """PT then SFT on the synthetic quadrant data, then held-out evaluation.

    ``after_pt`` is called with the model between the two stages (used to
    write the end-of-PT checkpoint).
    """
    world = world or build_world(cfg)
    train, heldout = data or make_data(cfg, world, seed)
    model = build_model(cfg, world, seed, strategy, queries)
    before = world.fingerprint()
    decoder_before = {k: v for k, v in model.params.snapshot().items() if k.startswith("decoder.")}
    pt = run_stage(dataclasses.replace(cfg.pt, seed=seed), model, train)
    decoder_after = {k: v for k, v in model.params.snapshot().items() if k.startswith("decoder.")}
    unchanged = all(np.array_equal(decoder_before[k], decoder_after[k]) for k in decoder_before)
    if after_pt is not None:
        after_pt(model)
    sft = run_stage(dataclasses.replace(cfg.sft, seed=seed), model, train)
    result = evaluate(model, heldout)
    log.info("seed=%d strategy=%s queries=%s text_loss=%.4f acc=%.3f",
             seed, model.cfg.strategy, queries, result.text_loss, result.accuracy)
    return RunOutcome(model, pt, sft, result, before, world.fingerprint(), unchanged)


def sweep_rows(cfg: RunConfig, kind: str | None = None, seeds=None) -> list[dict]:
    """One row per (setting, seed) for a strategy or query-count sweep."""
    kind = kind or cfg.sweep.kind
    seeds = list(seeds if seeds is not None else cfg.seeds)
    world = build_world(cfg)
    settings: list[tuple[str, str | None, int | None]]
    if kind == "strategy":
        settings = [(s, s, None) for s in cfg.sweep.strategies]
    elif kind == "queries":
        settings = [(f"Q={q}", None, q) for q in cfg.sweep.queries]
    else:
        raise ValueError(f"unknown sweep kind {kind!r}")
    rows = []
    for seed in seeds:
        data = make_data(cfg, world, seed)
        for label, strategy, queries in settings:
            out = train_pipeline(cfg, seed, strategy, queries, world=world, data=data)
            rows.append(sweep_row(label, seed, out))
    return rows


def sweep_row(label: str, seed: int, out: RunOutcome) -> dict:
    last = out.sft.curve[-1]
    task_loss = None
    if last.tasks:
        task_loss = float(np.mean([mse + out.model.cfg.lam * nce for mse, nce in last.tasks]))
    return {
        "setting": label,
        "seed": seed,
        "final_text_loss": out.heldout.text_loss,
        "final_task_loss": task_loss,
        "accuracy": out.heldout.accuracy,
        "task_cosine": out.heldout.task_cosine,
    }
