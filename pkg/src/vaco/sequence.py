"""Token layout {vision, query groups, text} and input assembly."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from vaco import numerics as nx
from vaco.numerics import Tensor

VISION = "vision"
QUERY = "query"
TEXT = "text"


@dataclass(frozen=True)
class SegmentId:
    kind: str
    offset: int
    task: int | None = None

    def __post_init__(self):
        if self.kind not in (VISION, QUERY, TEXT):
            raise ValueError(f"unknown segment kind {self.kind!r}")
        if (self.kind == QUERY) != (self.task is not None):
            raise ValueError("task index is set exactly for query segments")


@dataclass(frozen=True)
class SequenceLayout:
    vision_len: int
    group_lens: tuple[int, ...]
    text_len: int

    def __post_init__(self):
        if self.vision_len < 0:
            raise ValueError("vision_len must be >= 0")
        if any(q < 1 for q in self.group_lens):
            raise ValueError(f"every query group needs length >= 1, got {list(self.group_lens)}")
        if self.text_len < 1:
            raise ValueError("text_len must be >= 1")

    @property
    def num_groups(self) -> int:
        return len(self.group_lens)

    @property
    def total(self) -> int:
        return self.vision_len + sum(self.group_lens) + self.text_len

    @property
    def vision(self) -> tuple[int, int]:
        return (0, self.vision_len)

    def group(self, i: int) -> tuple[int, int]:
        if not 0 <= i < self.num_groups:
            raise IndexError(f"task index {i} out of range for {self.num_groups} groups")
        start = self.vision_len + sum(self.group_lens[:i])
        return (start, start + self.group_lens[i])

    @property
    def text(self) -> tuple[int, int]:
        start = self.vision_len + sum(self.group_lens)
        return (start, start + self.text_len)

    def kinds(self) -> np.ndarray:
        """Per-position group code: -1 vision, -2 text, task index for queries."""
        codes = np.full(self.total, -2, dtype=np.int64)
        codes[: self.vision_len] = -1
        for i in range(self.num_groups):
            a, b = self.group(i)
            codes[a:b] = i
        return codes

    def header(self) -> str:
        return f"S={self.total} K={self.vision_len} groups={','.join(map(str, self.group_lens))} T={self.text_len}"


def build_layout(vision_len: int, group_lens: Sequence[int], text_len: int) -> SequenceLayout:
    return SequenceLayout(int(vision_len), tuple(int(q) for q in group_lens), int(text_len))


def segment_of(layout: SequenceLayout, position: int) -> SegmentId:
    if not 0 <= position < layout.total:
        raise IndexError(f"position {position} outside [0, {layout.total})")
    if position < layout.vision_len:
        return SegmentId(VISION, position)
    for i in range(layout.num_groups):
        a, b = layout.group(i)
        if a <= position < b:
            return SegmentId(QUERY, position - a, task=i)
    return SegmentId(TEXT, position - layout.text[0])


def assemble_inputs(
    layout: SequenceLayout,
    vision_embeds: Tensor,
    mtq_banks: Sequence[Tensor],
    text_ids: np.ndarray,
    embed_table: Tensor,
    pos_table: Tensor,
) -> Tensor:
    """Stack vision rows, query banks and text embeddings, then add positions.

    ``vision_embeds`` is ``B x K x d``; banks are ``Q_i x d`` and are shared
    across the batch; ``text_ids`` is ``B x T``. Returns ``B x S x d``.
    """
    text_ids = np.asarray(text_ids)
    if text_ids.ndim != 2 or text_ids.shape[1] != layout.text_len:
        raise ValueError(f"text_ids must be B x {layout.text_len}, got {text_ids.shape}")
    batch = text_ids.shape[0]
    d = embed_table.shape[1]
    if vision_embeds.ndim != 3 or vision_embeds.shape[0] != batch or vision_embeds.shape[1] != layout.vision_len:
        raise ValueError(f"vision_embeds must be {batch} x {layout.vision_len} x d, got {vision_embeds.shape}")
    if vision_embeds.shape[2] != d:
        raise ValueError(f"vision width {vision_embeds.shape[2]} != model dim {d}")
    if len(mtq_banks) != layout.num_groups:
        raise ValueError(f"expected {layout.num_groups} query banks, got {len(mtq_banks)}")
    if layout.total > pos_table.shape[0]:
        raise ValueError(f"sequence length {layout.total} exceeds {pos_table.shape[0]} positions")

    parts = [vision_embeds]
    for bank, q in zip(mtq_banks, layout.group_lens):
        if bank.shape != (q, d):
            raise ValueError(f"query bank shape {bank.shape} != {(q, d)}")
        parts.append(nx.broadcast_to(bank, (batch, q, d)))
    parts.append(nx.take_rows(embed_table, text_ids))
    x = nx.concat(parts, axis=1)
    return nx.add(x, nx.slice_(pos_table, np.s_[: layout.total]))
