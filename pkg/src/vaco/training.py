"""Combined objective, warmup+cosine schedule, AdamW and the stage loop."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from vaco import numerics as nx
from vaco.decoder import loss_mllm
from vaco.model import VAL, Batch, ModelOutput, VacoModel
from vaco.numerics import NonFiniteError, ParamSet, Tensor
from vaco.teachers import ANSWER_BASE, Dataset
from vaco.val_align import AlignmentLossParts, clamp_temperature, loss_task, pooled_cosine

STAGES = ("PT", "SFT")


class TrainingDiverged(RuntimeError):
    def __init__(self, step: int, term: str, detail: str = ""):
        super().__init__(f"non-finite loss at step {step} in term {term!r} {detail}".strip())
        self.step = step
        self.term = term


@dataclass
class LossBreakdown:
    text: Tensor
    per_task: list[AlignmentLossParts]
    alphas: list[float]
    total: Tensor

    def recomputed_total(self) -> float:
        return float(self.text.data) + sum(a * float(p.total.data) for a, p in zip(self.alphas, self.per_task))


def combined_loss(
    output: ModelOutput,
    targets: np.ndarray,
    teacher_batches: Sequence[np.ndarray],
    alphas: Sequence[float],
    taus: Sequence,
    lam: float = 0.1,
    contrastive: bool = True,
    sim_mode: str = "pooled",
) -> LossBreakdown:
    """Text cross-entropy plus ``sum_i alpha_i * L_task_i``."""
    if len(alphas) != len(output.aligned):
        raise ValueError(f"{len(alphas)} alphas for {len(output.aligned)} active tasks")
    if len(teacher_batches) != len(output.aligned) or len(taus) != len(output.aligned):
        raise ValueError("need one teacher batch and one temperature per active task")
    text = loss_mllm(output.record, output.layout, targets)
    total = text
    parts = []
    for aligned, teacher, tau, alpha in zip(output.aligned, teacher_batches, taus, alphas):
        p = loss_task(aligned, teacher, tau, lam, contrastive, sim_mode)
        parts.append(p)
        total = nx.add(total, nx.mul(p.total, float(alpha)))
    return LossBreakdown(text, parts, list(alphas), total)


def model_loss(model: VacoModel, batch: Batch, step: int = -1) -> tuple[LossBreakdown, ModelOutput]:
    try:
        out = model.forward(batch)
    except NonFiniteError as exc:
        raise TrainingDiverged(step, "forward", str(exc)) from exc
    names = model.task_names if out.aligned else []
    alphas = [t.alpha for t in model.cfg.tasks] if out.aligned else []
    try:
        text = loss_mllm(out.record, out.layout, batch.targets)
    except NonFiniteError as exc:
        raise TrainingDiverged(step, "text", str(exc)) from exc
    total = text
    parts = []
    for name, aligned, tau, alpha in zip(names, out.aligned, model.temperatures(), alphas):
        try:
            p = loss_task(aligned, batch.teachers[name], tau, model.cfg.lam, model.plan.contrastive, model.cfg.sim_mode)
        except NonFiniteError as exc:
            raise TrainingDiverged(step, f"task:{name}", str(exc)) from exc
        parts.append(p)
        total = nx.add(total, nx.mul(p.total, float(alpha)))
    return LossBreakdown(text, parts, alphas, total), out


# ---------------------------------------------------------------- schedule


def lr_at(step: int, total_steps: int, warmup_ratio: float, base_lr: float) -> float:
    """Linear warmup to ``base_lr`` then cosine decay to 0 at ``total_steps``."""
    if total_steps <= 0:
        raise ValueError("total_steps must be positive")
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    warm = math.ceil(warmup_ratio * total_steps)
    if step < warm:
        return base_lr * step / warm
    if total_steps == warm:
        return base_lr
    progress = (step - warm) / (total_steps - warm)
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


class AdamW:
    def __init__(self, params: ParamSet, betas=(0.9, 0.999), eps: float = 1e-8, weight_decay: float = 0.0):
        self.params = params
        self.b1, self.b2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, grads: dict[str, np.ndarray], lr: float) -> None:
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for name, g in grads.items():
            p = self.params[name]
            m = self.m.setdefault(name, np.zeros_like(g))
            v = self.v.setdefault(name, np.zeros_like(g))
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            if self.weight_decay:
                p.data -= lr * self.weight_decay * p.data
            p.data -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


# ---------------------------------------------------------------- stages


@dataclass
class StageConfig:
    stage: str = "SFT"
    epochs: int = 1
    batch_size: int = 16
    lr: float = 1e-3
    warmup_ratio: float = 0.03
    weight_decay: float = 0.0
    seed: int = 0
    grad_clip: float | None = 1.0
    mtq_trainable_in_pt: bool = True
    max_steps: int | None = None

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ValueError(f"stage must be one of {STAGES}")
        if not 0 <= self.warmup_ratio < 1:
            raise ValueError("warmup_ratio must be in [0, 1)")
        if self.batch_size < 1 or self.epochs < 1:
            raise ValueError("batch_size and epochs must be >= 1")


@dataclass
class CurveRow:
    step: int
    lr: float
    text: float
    tasks: list[tuple[float, float]]
    total: float


@dataclass
class StageResult:
    curve: list[CurveRow] = field(default_factory=list)

    @property
    def text_losses(self) -> np.ndarray:
        return np.array([r.text for r in self.curve])


def dataset_batch(model: VacoModel, data: Dataset) -> Batch:
    return model.make_batch(data.images, data.text, data.targets())


def _clip(grads: dict[str, np.ndarray], max_norm: float | None) -> None:
    if not max_norm:
        return
    norm = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
    if norm > max_norm:
        scale = max_norm / norm
        for g in grads.values():
            g *= scale


def run_stage(cfg: StageConfig, model: VacoModel, data: Batch | Dataset) -> StageResult:
    """Train ``model`` in place for one stage; returns the per-step loss curve."""
    batch = dataset_batch(model, data) if isinstance(data, Dataset) else data
    model.freeze_for_stage(cfg.stage, cfg.mtq_trainable_in_pt)
    n = len(batch)
    per_epoch = n // cfg.batch_size
    if per_epoch == 0:
        raise ValueError(f"dataset of {n} samples is smaller than one batch of {cfg.batch_size}")
    total_steps = per_epoch * cfg.epochs
    if cfg.max_steps is not None:
        total_steps = min(total_steps, cfg.max_steps)
    opt = AdamW(model.params, weight_decay=cfg.weight_decay)
    rng = np.random.default_rng([cfg.seed, 4, STAGES.index(cfg.stage)])
    val_prefixes = [f"{VAL}{t}" for t in model.task_names] if model.plan.aligns else []
    result = StageResult()
    step = 0
    while step < total_steps:
        order = rng.permutation(n)
        for b in range(per_epoch):
            if step >= total_steps:
                break
            mb = batch.take(order[b * cfg.batch_size : (b + 1) * cfg.batch_size])
            losses, _ = model_loss(model, mb, step)
            grads = nx.backward(losses.total, model.params)
            if not all(np.isfinite(g).all() for g in grads.values()):
                raise TrainingDiverged(step, "gradient")
            _clip(grads, cfg.grad_clip)
            lr = lr_at(step, total_steps, cfg.warmup_ratio, cfg.lr)
            opt.step(grads, lr)
            for prefix in val_prefixes:
                clamp_temperature(model.params, prefix)
            result.curve.append(CurveRow(
                step, lr, float(losses.text.data),
                [(float(p.mse.data), float(p.contrastive.data)) for p in losses.per_task],
                float(losses.total.data),
            ))
            step += 1
    return result


# ---------------------------------------------------------------- evaluation


@dataclass
class EvalResult:
    text_loss: float
    accuracy: float
    task_cosine: dict[str, float]
    predictions: np.ndarray


def greedy_decode(model: VacoModel, batch: Batch, prompt_len: int, answer_len: int) -> np.ndarray:
    """Greedily extend the prompt by ``answer_len`` tokens; returns ``B x answer_len``."""
    text = batch.text[:, :prompt_len].copy()
    out = []
    with nx.no_grad():
        for _ in range(answer_len):
            step_batch = Batch(batch.vision, batch.teachers, text)
            rec = model.forward(step_batch, align=False).record
            nxt = np.argmax(rec.logits.data[:, -1, :], axis=-1)
            out.append(nxt)
            text = np.concatenate([text, nxt[:, None]], axis=1)
    return np.stack(out, axis=1)


def evaluate(model: VacoModel, data: Dataset, chunk: int = 250) -> EvalResult:
    """Teacher-forced text loss, greedy answer accuracy and per-task pooled cosine."""
    full = dataset_batch(model, data)
    p, a = data.prompts.shape[1], data.answers.shape[1]
    loss_sum, preds = 0.0, []
    cos: dict[str, list[np.ndarray]] = {n: [] for n in model.task_names} if model.plan.aligns else {}
    with nx.no_grad():
        for s in range(0, len(full), chunk):
            mb = full.take(np.arange(s, min(s + chunk, len(full))))
            out = model.forward(mb)
            loss_sum += float(loss_mllm(out.record, out.layout, mb.targets).data) * len(mb)
            for name, aligned in zip(model.task_names, out.aligned):
                cos[name].append(pooled_cosine(aligned, mb.teachers[name]).data)
            preds.append(greedy_decode(model, mb, p, a))
    pred = np.concatenate(preds)
    acc = float(np.mean(np.all(pred == data.answers, axis=1)))
    return EvalResult(loss_sum / len(full), acc, {k: float(np.mean(np.concatenate(v))) for k, v in cos.items()}, pred)


def predicted_quadrants(pred: np.ndarray) -> np.ndarray:
    return pred[:, 0] - ANSWER_BASE

