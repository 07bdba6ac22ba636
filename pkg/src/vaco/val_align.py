"""Visual alignment layer and the regression + contrastive alignment loss.

A VAL owns a learnable query matrix (M x D) that cross-attends to the
projected task-query hidden states through a short stack of pre-norm blocks;
its output lives in the teacher's feature space.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from vaco import numerics as nx
from vaco.decoder import attention, init_layer_norm, init_linear, layer_norm, linear
from vaco.numerics import ParamSet, Tensor

TAU_MIN, TAU_MAX = 0.01, 10.0
TAU_INIT = 0.07
SIM_MODES = ("pooled", "flat")


@dataclass(frozen=True)
class ValConfig:
    tokens: int  # M
    dim: int  # D
    layers: int = 3
    heads: int = 2
    ffn_mult: int = 2

    def __post_init__(self):
        if self.tokens < 1 or self.dim < 1:
            raise ValueError("VAL needs M >= 1 and D >= 1")
        if self.layers < 0:
            raise ValueError("layers must be >= 0")
        if self.dim % self.heads:
            raise ValueError(f"VAL dim {self.dim} not divisible by heads {self.heads}")


@dataclass
class AlignmentLossParts:
    mse: Tensor
    contrastive: Tensor
    total: Tensor
    lam: float

    def values(self) -> tuple[float, float, float]:
        return float(self.mse.data), float(self.contrastive.data), float(self.total.data)


def init_val(params: ParamSet, prefix: str, cfg: ValConfig, d_model: int, rng: np.random.Generator, vaq_std: float = 1.0) -> None:
    params.add(f"{prefix}.vaq", rng.normal(0.0, vaq_std, size=(cfg.tokens, cfg.dim)))
    init_linear(params, f"{prefix}.in_proj", d_model, cfg.dim, rng)
    out_scale = 1.0 / math.sqrt(2 * max(cfg.layers, 1))
    for i in range(cfg.layers):
        p = f"{prefix}.blocks.{i}"
        init_layer_norm(params, f"{p}.ln_q", cfg.dim)
        for proj in ("q", "k", "v"):
            init_linear(params, f"{p}.attn.{proj}", cfg.dim, cfg.dim, rng, bias=proj != "k")
        init_linear(params, f"{p}.attn.o", cfg.dim, cfg.dim, rng, out_scale)
        init_layer_norm(params, f"{p}.ln_ff", cfg.dim)
        init_linear(params, f"{p}.ffn.up", cfg.dim, cfg.ffn_mult * cfg.dim, rng)
        init_linear(params, f"{p}.ffn.down", cfg.ffn_mult * cfg.dim, cfg.dim, rng, out_scale)
    params.add(f"{prefix}.log_tau", np.array(math.log(TAU_INIT)))


def val_forward(params: ParamSet, prefix: str, cfg: ValConfig, source: Tensor, keep_attention: list | None = None) -> Tensor:
    """Map ``B x Q x d`` hidden states to ``B x M x D`` aligned features."""
    w = params[f"{prefix}.in_proj.w"]
    if source.ndim != 3 or source.shape[2] != w.shape[0]:
        raise ValueError(f"source must be B x Q x {w.shape[0]}, got {source.shape}")
    batch = source.shape[0]
    stream = nx.broadcast_to(params[f"{prefix}.vaq"], (batch, cfg.tokens, cfg.dim))
    if cfg.layers == 0:
        return stream
    kv = linear(params, f"{prefix}.in_proj", source)
    for i in range(cfg.layers):
        p = f"{prefix}.blocks.{i}"
        h = layer_norm(params, f"{p}.ln_q", stream)
        out, weights = attention(
            linear(params, f"{p}.attn.q", h),
            linear(params, f"{p}.attn.k", kv),
            linear(params, f"{p}.attn.v", kv),
            cfg.heads,
            None,
        )
        if keep_attention is not None:
            keep_attention.append(weights.data)
        stream = nx.add(stream, linear(params, f"{p}.attn.o", out))
        h = layer_norm(params, f"{p}.ln_ff", stream)
        stream = nx.add(stream, linear(params, f"{p}.ffn.down", nx.gelu(linear(params, f"{p}.ffn.up", h))))
    return stream


def temperature(params: ParamSet, prefix: str) -> Tensor:
    return nx.exp(params[f"{prefix}.log_tau"])


def clamp_temperature(params: ParamSet, prefix: str) -> None:
    t = params[f"{prefix}.log_tau"]
    t.data = np.clip(t.data, math.log(TAU_MIN), math.log(TAU_MAX))


def _unit_rows(x: Tensor) -> Tensor:
    norm = nx.sqrt(nx.sum_(nx.mul(x, x), axis=-1, keepdims=True))
    if np.any(norm.data == 0):
        raise ValueError("zero-norm feature vector in cosine similarity")
    return nx.div(x, norm)


def _summaries(x: Tensor, sim_mode: str) -> Tensor:
    if sim_mode == "pooled":
        return nx.mean(x, axis=-2)
    if sim_mode == "flat":
        return nx.reshape(x, x.shape[:-2] + (x.shape[-2] * x.shape[-1],))
    raise ValueError(f"sim_mode must be one of {SIM_MODES}, got {sim_mode!r}")


def pooled_cosine(a, b, sim_mode: str = "pooled") -> Tensor:
    """Cosine similarity of the token-averaged ``M x D`` feature maps."""
    a, b = nx.as_tensor(a), nx.as_tensor(b)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    ua = _unit_rows(_summaries(a, sim_mode))
    ub = _unit_rows(_summaries(b, sim_mode))
    return nx.sum_(nx.mul(ua, ub), axis=-1)


def similarity_matrix(aligned: Tensor, teacher, sim_mode: str = "pooled") -> Tensor:
    """``B x B`` matrix of sim(aligned_i, teacher_j)."""
    ua = _unit_rows(_summaries(aligned, sim_mode))
    ub = _unit_rows(_summaries(nx.as_tensor(teacher), sim_mode))
    return nx.matmul(ua, nx.transpose(ub))


def loss_task(
    aligned: Tensor,
    teacher,
    tau,
    lam: float = 0.1,
    contrastive: bool = True,
    sim_mode: str = "pooled",
) -> AlignmentLossParts:
    """MSE over all elements plus ``lam`` times the one-sided InfoNCE term."""
    teacher = nx.as_tensor(teacher)
    if aligned.shape != teacher.shape or aligned.ndim != 3:
        raise ValueError(f"aligned {aligned.shape} and teacher {teacher.shape} must both be B x M x D")
    tau = nx.as_tensor(tau)
    if np.any(tau.data <= 0):
        raise ValueError("temperature must be positive")
    diff = nx.sub(aligned, teacher)
    mse = nx.mean(nx.mul(diff, diff))
    if not contrastive:
        zero = nx.Tensor(0.0)
        return AlignmentLossParts(mse, zero, mse, lam)
    batch = aligned.shape[0]
    logits = nx.div(similarity_matrix(aligned, teacher, sim_mode), tau)
    logp = nx.log_softmax(logits)
    nce = nx.mul(nx.sum_(nx.mul(logp, np.eye(batch))), -1.0 / batch)
    total = nx.add(mse, nx.mul(nce, lam))
    return AlignmentLossParts(mse, nce, total, lam)
