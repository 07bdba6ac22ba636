"""Token Gateway Mask: causal attention with mutually invisible query groups."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from vaco.numerics import MASK_NEG
from vaco.sequence import QUERY, TEXT, VISION, SequenceLayout, segment_of

CAUSAL = "causal"
SELF_ONLY = "self_only"
INTRA_MODES = (CAUSAL, SELF_ONLY)


@dataclass(frozen=True)
class GatewayMask:
    allowed: np.ndarray  # S x S bool, row attends to column
    layout: SequenceLayout
    intra_group: str = CAUSAL

    @property
    def size(self) -> int:
        return self.allowed.shape[0]


@dataclass(frozen=True)
class Violation:
    row: int
    col: int
    expected: bool
    actual: bool
    reason: str


def build_tgm(layout: SequenceLayout, intra_group: str = CAUSAL) -> GatewayMask:
    if intra_group not in INTRA_MODES:
        raise ValueError(f"intra_group must be one of {INTRA_MODES}, got {intra_group!r}")
    s = layout.total
    causal = np.tril(np.ones((s, s), dtype=bool))
    codes = layout.kinds()
    row = codes[:, None]
    col = codes[None, :]
    is_query_row = row >= 0
    same_group = (row == col) & is_query_row
    if intra_group == SELF_ONLY:
        same_group = same_group & np.eye(s, dtype=bool)
    allowed = np.where(is_query_row, (col == -1) | same_group, True) & causal
    # vision rows only ever see vision columns; with causality that is already true
    np.fill_diagonal(allowed, True)
    allowed.setflags(write=False)
    return GatewayMask(allowed, layout, intra_group)


def _rule(layout: SequenceLayout, intra_group: str, r: int, c: int) -> tuple[bool, str]:
    if c > r:
        return False, "causality"
    rs, cs = segment_of(layout, r), segment_of(layout, c)
    if rs.kind == VISION:
        return cs.kind == VISION, "vision row"
    if rs.kind == QUERY:
        if cs.kind == VISION or r == c:
            return True, "query row"
        if cs.kind == QUERY and cs.task == rs.task:
            return intra_group == CAUSAL, "intra-group"
        if cs.kind == QUERY:
            return False, "cross-group"
        return False, "query row sees text"
    assert rs.kind == TEXT
    return True, "text row"


def validate_mask(mask: GatewayMask) -> list[Violation]:
    """Re-derive every entry from the rules, one (row, col) pair at a time."""
    layout = mask.layout
    s = layout.total
    report: list[Violation] = []
    if mask.allowed.shape != (s, s):
        return [Violation(-1, -1, True, False, f"shape {mask.allowed.shape} != {(s, s)}")]
    for r in range(s):
        for c in range(s):
            expected, reason = _rule(layout, mask.intra_group, r, c)
            actual = bool(mask.allowed[r, c])
            if actual != expected:
                report.append(Violation(r, c, expected, actual, reason))
    return report


def to_additive(mask: GatewayMask) -> np.ndarray:
    return np.where(mask.allowed, 0.0, MASK_NEG)


def dump_mask(mask: GatewayMask) -> str:
    header = f"{mask.layout.header()} intra={mask.intra_group}"
    rows = ["".join("1" if v else "0" for v in row) for row in mask.allowed]
    return "\n".join([header, *rows]) + "\n"


def parse_mask(text: str) -> GatewayMask:
    """Inverse of :func:`dump_mask`."""
    lines = [ln for ln in text.strip("\n").split("\n") if not ln.startswith("#")]
    fields = dict(tok.split("=", 1) for tok in lines[0].split())
    groups = tuple(int(q) for q in fields["groups"].split(",") if q)
    layout = SequenceLayout(int(fields["K"]), groups, int(fields["T"]))
    grid = np.array([[ch == "1" for ch in line] for line in lines[1:]], dtype=bool).reshape(layout.total, layout.total)
    if int(fields["S"]) != layout.total:
        raise ValueError("header S does not match layout")
    return GatewayMask(grid, layout, fields["intra"])
