"""The multimodal model: projector, decoder, task query banks and VAL heads.

Which pieces take part in a forward pass is decided by the activation
strategy (see :func:`apply_strategy`).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from vaco import numerics as nx
from vaco.decoder import DecoderConfig, ForwardRecord, forward, init_decoder, mtq_hidden_states
from vaco.gateway_mask import CAUSAL, GatewayMask, build_tgm, to_additive
from vaco.numerics import ParamSet, Tensor
from vaco.sequence import SequenceLayout, assemble_inputs, build_layout
from vaco.teachers import ImageConfig, SyntheticWorld, TeacherSpec, init_projector, project
from vaco.val_align import ValConfig, init_val, temperature, val_forward

STRATEGIES = ("baseline", "token_input", "token_gen", "token_dis", "query_gen", "query_dis")

# parameter-name prefixes of the trainable groups
DECODER, PROJECTOR, MTQ, VAL, AUX_IN = "decoder.", "projector.", "mtq.", "val.", "aux_in."


@dataclass(frozen=True)
class Plan:
    """What a strategy switches on when assembling the loss."""

    strategy: str
    query_groups: bool  # task query banks sit in the sequence
    tgm: bool  # gateway mask instead of plain causal
    input_tokens: bool  # teacher features enter as extra vision-side tokens
    aux_tap: str | None  # "query" or "vision": hidden states fed to the VAL heads
    contrastive: bool  # alignment loss includes the InfoNCE term

    @property
    def aligns(self) -> bool:
        return self.aux_tap is not None


def apply_strategy(strategy: str, num_tasks: int) -> Plan:
    if strategy not in STRATEGIES:
        raise ValueError(f"unknown strategy {strategy!r}; expected one of {STRATEGIES}")
    if strategy.startswith("query") and num_tasks == 0:
        raise ValueError(f"{strategy} needs at least one task query group")
    if strategy != "baseline" and num_tasks == 0:
        raise ValueError(f"{strategy} needs at least one teacher task")
    return {
        "baseline": Plan(strategy, False, False, False, None, False),
        "token_input": Plan(strategy, False, False, True, None, False),
        "token_gen": Plan(strategy, False, False, False, "vision", False),
        "token_dis": Plan(strategy, False, False, False, "vision", True),
        "query_gen": Plan(strategy, True, True, False, "query", False),
        "query_dis": Plan(strategy, True, True, False, "query", True),
    }[strategy]


@dataclass(frozen=True)
class TaskConfig:
    name: str
    queries: int = 4  # Q_i
    tokens: int = 16  # M_t
    dim: int = 24  # D_t
    seed: int = 11
    alpha: float = 1.0

    def teacher(self, gain: float, hidden: int) -> TeacherSpec:
        return TeacherSpec(self.name, self.tokens, self.dim, self.seed, hidden=hidden, gain=gain)


@dataclass(frozen=True)
class ModelConfig:
    decoder: DecoderConfig = field(default_factory=DecoderConfig)
    image: ImageConfig = field(default_factory=ImageConfig)
    tasks: tuple[TaskConfig, ...] = ()
    strategy: str = "query_dis"
    intra_group: str = CAUSAL
    val_layers: int = 3
    val_heads: int = 2
    lam: float = 0.1
    sim_mode: str = "pooled"
    embed_std: float = 0.1

    def val_config(self, task: TaskConfig) -> ValConfig:
        return ValConfig(task.tokens, task.dim, self.val_layers, self.val_heads)


@dataclass
class Batch:
    """Precomputed, frozen-side inputs for a batch of samples."""

    vision: np.ndarray  # B x K x d_v encoder features
    teachers: dict[str, np.ndarray]  # name -> B x M x D
    text: np.ndarray  # B x T token ids
    targets: np.ndarray | None = None  # B x T next-token targets

    def __len__(self) -> int:
        return self.text.shape[0]

    def take(self, idx) -> "Batch":
        idx = np.asarray(idx)
        return Batch(
            self.vision[idx],
            {k: v[idx] for k, v in self.teachers.items()},
            self.text[idx],
            None if self.targets is None else self.targets[idx],
        )


@dataclass
class ModelOutput:
    record: ForwardRecord
    layout: SequenceLayout
    mask: GatewayMask
    aligned: list[Tensor]  # per task, B x M x D (empty when the plan does not align)


class VacoModel:
    def __init__(self, cfg: ModelConfig, world: SyntheticWorld, seed: int = 0):
        self.cfg = cfg
        self.world = world
        self.plan = apply_strategy(cfg.strategy, len(cfg.tasks))
        for t in cfg.tasks:
            spec = world.specs.get(t.name)
            if spec is None or (spec.tokens, spec.dim) != (t.tokens, t.dim):
                raise ValueError(f"task {t.name!r} does not match a teacher in the world")
        self.params = ParamSet()
        rng = np.random.default_rng([seed, 3])
        d = cfg.decoder.d_model
        init_decoder(self.params, cfg.decoder, rng, embed_std=cfg.embed_std)
        init_projector(self.params, cfg.image.encoder_dim, d, rng)
        for t in cfg.tasks:
            if self.plan.query_groups:
                self.params.add(f"{MTQ}{t.name}", rng.normal(0.0, cfg.embed_std, (t.queries, d)))
            if self.plan.input_tokens:
                self.params.add(f"{AUX_IN}{t.name}.w", rng.normal(0.0, 1.0 / np.sqrt(t.dim), (t.dim, d)))
                self.params.add(f"{AUX_IN}{t.name}.b", np.zeros(d))
            if self.plan.aligns:
                init_val(self.params, f"{VAL}{t.name}", cfg.val_config(t), d, rng)
        self._masks: dict[int, GatewayMask] = {}

    # -- layout ------------------------------------------------------------

    @property
    def task_names(self) -> list[str]:
        return [t.name for t in self.cfg.tasks]

    def layout(self, text_len: int) -> SequenceLayout:
        k = self.cfg.image.num_patches
        if self.plan.input_tokens:
            k += sum(t.tokens for t in self.cfg.tasks)
        groups = [t.queries for t in self.cfg.tasks] if self.plan.query_groups else []
        return build_layout(k, groups, text_len)

    def mask(self, layout: SequenceLayout) -> GatewayMask:
        key = layout.text_len
        if key not in self._masks:
            self._masks[key] = build_tgm(layout, self.cfg.intra_group)
        return self._masks[key]

    # -- forward -----------------------------------------------------------

    def vision_tokens(self, batch: Batch) -> Tensor:
        v = project(batch.vision, self.params)
        if not self.plan.input_tokens:
            return v
        extra = [
            nx.add(nx.matmul(nx.Tensor(batch.teachers[t.name]), self.params[f"{AUX_IN}{t.name}.w"]),
                   self.params[f"{AUX_IN}{t.name}.b"])
            for t in self.cfg.tasks
        ]
        return nx.concat([v, *extra], axis=1)

    def forward(self, batch: Batch, retain_attention: bool = False, align: bool = True) -> ModelOutput:
        layout = self.layout(batch.text.shape[1])
        mask = self.mask(layout)
        banks = [self.params[f"{MTQ}{n}"] for n in self.task_names] if self.plan.query_groups else []
        x = assemble_inputs(layout, self.vision_tokens(batch), banks, batch.text,
                            self.params[f"{DECODER}tok_emb"], self.params[f"{DECODER}pos_emb"])
        record = forward(self.params, self.cfg.decoder, x, to_additive(mask), retain_attention)
        aligned: list[Tensor] = []
        if align and self.plan.aligns:
            for i, t in enumerate(self.cfg.tasks):
                if self.plan.aux_tap == "query":
                    source = mtq_hidden_states(record, layout, i)
                else:
                    source = nx.slice_(record.hidden, np.s_[:, : self.cfg.image.num_patches, :])
                aligned.append(val_forward(self.params, f"{VAL}{t.name}", self.cfg.val_config(t), source))
        return ModelOutput(record, layout, mask, aligned)

    def temperatures(self) -> list[Tensor]:
        return [temperature(self.params, f"{VAL}{n}") for n in self.task_names] if self.plan.aligns else []

    # -- freezing ----------------------------------------------------------

    def freeze_for_stage(self, stage: str, mtq_trainable_in_pt: bool = True) -> None:
        if stage == "PT":
            self.params.set_frozen(lambda n: n.startswith(DECODER) or (not mtq_trainable_in_pt and n.startswith(MTQ)))
        elif stage == "SFT":
            self.params.set_frozen(lambda n: False)
        else:
            raise ValueError(f"unknown stage {stage!r}")

    # -- data --------------------------------------------------------------

    def make_batch(self, images: np.ndarray, text: np.ndarray, targets: np.ndarray | None = None) -> Batch:
        vision = self.world.encode_image(images)
        teachers = {n: self.world.teacher_features(n, images) for n in self.task_names}
        return Batch(vision, teachers, np.asarray(text), targets)
