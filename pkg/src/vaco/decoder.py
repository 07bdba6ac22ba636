"""Pre-norm causal decoder driven by an arbitrary attention mask."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from vaco import numerics as nx
from vaco.numerics import ParamSet, Tensor
from vaco.sequence import SequenceLayout


@dataclass(frozen=True)
class DecoderConfig:
    layers: int = 4
    d_model: int = 64
    heads: int = 4
    ffn_dim: int = 256
    vocab_size: int = 64
    max_positions: int = 128

    def __post_init__(self):
        for name in ("layers", "d_model", "heads", "ffn_dim", "vocab_size", "max_positions"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.d_model % self.heads:
            raise ValueError(f"d_model {self.d_model} not divisible by heads {self.heads}")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.heads


@dataclass
class ForwardRecord:
    hidden: Tensor  # B x S x d, after the final layer norm
    logits: Tensor  # B x S x V
    attention: list[np.ndarray] = field(default_factory=list)  # per layer, B x h x S x S


def _normal(rng: np.random.Generator, shape, std: float) -> np.ndarray:
    return rng.normal(0.0, std, size=shape)


def init_linear(
    params: ParamSet, name: str, fan_in: int, fan_out: int, rng: np.random.Generator, scale: float = 1.0, bias: bool = True
) -> None:
    params.add(f"{name}.w", _normal(rng, (fan_in, fan_out), scale / math.sqrt(fan_in)))
    if bias:
        params.add(f"{name}.b", np.zeros(fan_out))


def init_layer_norm(params: ParamSet, name: str, width: int) -> None:
    params.add(f"{name}.g", np.ones(width))
    params.add(f"{name}.b", np.zeros(width))


def linear(params: ParamSet, name: str, x: Tensor) -> Tensor:
    y = nx.matmul(x, params[f"{name}.w"])
    return nx.add(y, params[f"{name}.b"]) if f"{name}.b" in params else y


def layer_norm(params: ParamSet, name: str, x: Tensor) -> Tensor:
    return nx.layer_norm(x, params[f"{name}.g"], params[f"{name}.b"])


def init_decoder(params: ParamSet, cfg: DecoderConfig, rng: np.random.Generator, prefix: str = "decoder", embed_std: float = 0.1) -> None:
    d = cfg.d_model
    params.add(f"{prefix}.tok_emb", _normal(rng, (cfg.vocab_size, d), embed_std))
    params.add(f"{prefix}.pos_emb", _normal(rng, (cfg.max_positions, d), embed_std))
    out_scale = 1.0 / math.sqrt(2 * cfg.layers)
    for i in range(cfg.layers):
        p = f"{prefix}.layers.{i}"
        init_layer_norm(params, f"{p}.ln1", d)
        for proj in ("q", "k", "v"):
            # a key bias shifts every score in a row equally, so softmax ignores it
            init_linear(params, f"{p}.attn.{proj}", d, d, rng, bias=proj != "k")
        init_linear(params, f"{p}.attn.o", d, d, rng, out_scale)
        init_layer_norm(params, f"{p}.ln2", d)
        init_linear(params, f"{p}.ffn.up", d, cfg.ffn_dim, rng)
        init_linear(params, f"{p}.ffn.down", cfg.ffn_dim, d, rng, out_scale)
    init_layer_norm(params, f"{prefix}.ln_f", d)
    init_linear(params, f"{prefix}.unembed", d, cfg.vocab_size, rng)


def split_heads(x: Tensor, heads: int) -> Tensor:
    b, s, d = x.shape
    return nx.transpose(nx.reshape(x, (b, s, heads, d // heads)), (0, 2, 1, 3))


def merge_heads(x: Tensor) -> Tensor:
    b, h, s, dh = x.shape
    return nx.reshape(nx.transpose(x, (0, 2, 1, 3)), (b, s, h * dh))


def attention(q: Tensor, k: Tensor, v: Tensor, heads: int, additive_mask: np.ndarray | None) -> tuple[Tensor, Tensor]:
    """Multi-head scaled dot-product attention. Returns (output, weights)."""
    qh, kh, vh = split_heads(q, heads), split_heads(k, heads), split_heads(v, heads)
    scale = 1.0 / math.sqrt(qh.shape[-1])
    scores = nx.mul(nx.matmul(qh, nx.transpose(kh)), scale)
    weights = nx.softmax(scores, additive_mask)
    return merge_heads(nx.matmul(weights, vh)), weights


def decoder_block(params: ParamSet, prefix: str, x: Tensor, heads: int, additive_mask: np.ndarray) -> tuple[Tensor, Tensor]:
    h = layer_norm(params, f"{prefix}.ln1", x)
    q = linear(params, f"{prefix}.attn.q", h)
    k = linear(params, f"{prefix}.attn.k", h)
    v = linear(params, f"{prefix}.attn.v", h)
    att, weights = attention(q, k, v, heads, additive_mask)
    x = nx.add(x, linear(params, f"{prefix}.attn.o", att))
    h = layer_norm(params, f"{prefix}.ln2", x)
    h = linear(params, f"{prefix}.ffn.down", nx.gelu(linear(params, f"{prefix}.ffn.up", h)))
    return nx.add(x, h), weights


def forward(
    params: ParamSet,
    cfg: DecoderConfig,
    inputs: Tensor,
    additive_mask: np.ndarray,
    retain_attention: bool = False,
    prefix: str = "decoder",
) -> ForwardRecord:
    """Run the decoder on ``B x S x d`` inputs under an ``S x S`` additive mask."""
    if inputs.ndim != 3 or inputs.shape[2] != cfg.d_model:
        raise ValueError(f"inputs must be B x S x {cfg.d_model}, got {inputs.shape}")
    s = inputs.shape[1]
    if additive_mask.shape != (s, s):
        raise ValueError(f"mask shape {additive_mask.shape} != {(s, s)}")
    x = inputs
    kept: list[np.ndarray] = []
    for i in range(cfg.layers):
        x, weights = decoder_block(params, f"{prefix}.layers.{i}", x, cfg.heads, additive_mask)
        if retain_attention:
            kept.append(weights.data)
    hidden = layer_norm(params, f"{prefix}.ln_f", x)
    logits = linear(params, f"{prefix}.unembed", hidden)
    return ForwardRecord(hidden, logits, kept)


def loss_mllm(record: ForwardRecord, layout: SequenceLayout, answer_targets: np.ndarray) -> Tensor:
    """Mean next-token cross-entropy over supervised text positions.

    ``answer_targets`` is ``B x T`` aligned with the text block: entry ``t``
    is the token to predict from text position ``t``, or ``-1`` when that
    position is unsupervised (prompt, last token).
    """
    targets = np.asarray(answer_targets)
    a, b = layout.text
    batch = record.logits.shape[0]
    if targets.shape != (batch, layout.text_len):
        raise ValueError(f"targets must be {batch} x {layout.text_len}, got {targets.shape}")
    supervised = targets >= 0
    count = int(supervised.sum())
    if count == 0:
        raise ValueError("no supervised answer positions")
    vocab = record.logits.shape[2]
    if targets.max() >= vocab:
        raise ValueError("target id outside vocabulary")
    onehot = np.zeros((batch, layout.text_len, vocab))
    bi, ti = np.nonzero(supervised)
    onehot[bi, ti, targets[bi, ti]] = 1.0
    logp = nx.log_softmax(nx.slice_(record.logits, np.s_[:, a:b, :]))
    return nx.mul(nx.sum_(nx.mul(logp, onehot)), -1.0 / count)


def extract_last_token_attention(
    record: ForwardRecord,
    layout: SequenceLayout,
    layer_select: int | str = "mean",
    head_reduce: str = "mean",
    renormalize: bool = False,
) -> np.ndarray:
    """Attention from the final position onto the vision tokens, ``B x K``."""
    if not record.attention:
        raise ValueError("attention was not retained in this forward pass")
    if layout.vision_len < 1:
        raise ValueError("layout has no vision tokens")
    if head_reduce not in ("mean", "max"):
        raise ValueError(f"head_reduce must be 'mean' or 'max', got {head_reduce!r}")
    stack = np.stack(record.attention)  # L x B x h x S x S
    rows = stack[:, :, :, -1, : layout.vision_len]  # L x B x h x K
    rows = rows.mean(axis=2) if head_reduce == "mean" else rows.max(axis=2)
    if layer_select == "mean":
        scores = rows.mean(axis=0)
    else:
        scores = rows[int(layer_select)]
    if renormalize:
        total = scores.sum(axis=-1, keepdims=True)
        scores = np.divide(scores, total, out=np.zeros_like(scores), where=total > 0)
    return scores


def mtq_hidden_states(record: ForwardRecord, layout: SequenceLayout, task_index: int) -> Tensor:
    a, b = layout.group(task_index)
    return nx.slice_(record.hidden, np.s_[:, a:b, :])
