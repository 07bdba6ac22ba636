"""Analytic forward-pass FLOPs for a decoder-only transformer.

A multiply-accumulate counts as 2 FLOPs. Dense matmuls cost
``2 * params * S``; attention score and mixing products cost
``4 * layers * S^2 * d``. Norms, softmax and activations are ignored.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

from vaco.sequence import SequenceLayout


@dataclass(frozen=True)
class FlopsDims:
    layers: int = 32
    d_model: int = 4096
    ffn_dim: int = 11008
    vocab_size: int = 32000
    gated_ffn: bool = True  # SwiGLU-style FFN with three projections
    count_lm_head: bool = True  # include the vocabulary projection

    def non_embedding_params(self) -> int:
        ffn_mats = 3 if self.gated_ffn else 2
        per_layer = 4 * self.d_model * self.d_model + ffn_mats * self.d_model * self.ffn_dim
        total = self.layers * per_layer
        if self.count_lm_head:
            total += self.vocab_size * self.d_model
        return total


@dataclass(frozen=True)
class FlopsReport:
    seq_len: int
    dense: float
    attention: float
    total: float
    assumptions: dict

    def format(self) -> str:
        lines = [
            f"sequence length: {self.seq_len}",
            f"dense FLOPs:     {self.dense:.4e}",
            f"attention FLOPs: {self.attention:.4e}",
            f"total FLOPs:     {self.total:.4e} ({self.total / 1e12:.3f} T)",
            "assumptions:",
        ]
        lines += [f"  {k}: {v}" for k, v in self.assumptions.items()]
        return "\n".join(lines) + "\n"


def flops_estimate(dims: FlopsDims, layout: SequenceLayout | int) -> FlopsReport:
    s = layout if isinstance(layout, int) else layout.total
    params = dims.non_embedding_params()
    dense = 2.0 * params * s
    attention = 4.0 * dims.layers * s * s * dims.d_model
    assumptions = {
        **asdict(dims),
        "non_embedding_params": params,
        "mac_flops": 2,
        "excluded": "layer norms, softmax, activations, token/position embeddings",
    }
    if not isinstance(layout, int):
        assumptions.update(vision_tokens=layout.vision_len, query_tokens=sum(layout.group_lens),
                           text_tokens=layout.text_len)
    return FlopsReport(s, dense, attention, dense + attention, assumptions)


DEFAULT_TEXT_LEN = 8  # text tokens assumed when reproducing the 576-vision-token table


def table_layout(queries_per_task: int, tasks: int = 4, vision: int = 576, text: int = DEFAULT_TEXT_LEN) -> SequenceLayout:
    groups = [queries_per_task] * tasks if queries_per_task > 0 else []
    return SequenceLayout(vision, tuple(groups), text)
