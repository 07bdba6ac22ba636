"""Finite-difference check of the full training objective on a tiny model."""

from __future__ import annotations

import dataclasses

from vaco.decoder import DecoderConfig
from vaco.model import VacoModel
from vaco.numerics import finite_difference_check
from vaco.teachers import ImageConfig, SyntheticWorld, TeacherSpec, generate_dataset
from vaco.training import dataset_batch, model_loss

TINY_DECODER = DecoderConfig(layers=2, d_model=16, heads=2, ffn_dim=32, vocab_size=16, max_positions=16)
TINY_IMAGE = ImageConfig(height=4, width=4, channels=3, patch=2, encoder_dim=8)


def tiny_setup(cfg, seed: int = 0, batch_size: int = 3, strategy: str | None = None):
    """Shrink ``cfg`` (a RunConfig) to a model small enough for per-entry differencing.

    Keeps the strategy, task names, loss weights and temperature settings;
    replaces every size with a tiny one. Returns ``(model, batch)``.
    """
    tasks = tuple(dataclasses.replace(t, queries=2, tokens=4, dim=6) for t in cfg.tasks)
    specs = [TeacherSpec(t.name, t.tokens, t.dim, t.seed, hidden=8, gain=cfg.teacher.gain) for t in tasks]
    world = SyntheticWorld(TINY_IMAGE, specs, seed=cfg.teacher.world_seed)
    mcfg = dataclasses.replace(
        cfg.model_config(strategy), decoder=TINY_DECODER, image=TINY_IMAGE, tasks=tasks, val_layers=1, val_heads=2,
    )
    model = VacoModel(mcfg, world, seed=seed)
    model.freeze_for_stage("SFT")
    link = tasks[0].name if tasks else cfg.data.task_link
    data = generate_dataset(world, seed, batch_size, link)
    return model, dataset_batch(model, data)


def run_gradcheck(cfg, seed: int = 0, epsilon: float = 1e-5, strategy: str | None = None) -> dict[str, float]:
    """Per-parameter max relative error of the combined loss gradient."""
    model, batch = tiny_setup(cfg, seed, strategy=strategy)
    return finite_difference_check(lambda: model_loss(model, batch)[0].total, model.params, epsilon)
