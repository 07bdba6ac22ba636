import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vaco.numerics import Tensor
from vaco.sequence import QUERY, TEXT, VISION, SegmentId, assemble_inputs, build_layout, segment_of


def test_small_layout_ranges():
    lay = build_layout(2, [1, 1], 1)
    assert lay.total == 5
    assert lay.vision == (0, 2)
    assert lay.group(0) == (2, 3)
    assert lay.group(1) == (3, 4)
    assert lay.text == (4, 5)


def test_table_layout_length():
    assert build_layout(576, [8, 8, 8, 8], 32).total == 640


def test_pure_text_layout():
    lay = build_layout(0, [], 3)
    assert lay.total == 3
    assert lay.text == (0, 3)


@pytest.mark.parametrize("args", [(2, [0], 1), (2, [1], 0), (-1, [], 2)])
def test_invalid_layouts(args):
    with pytest.raises(ValueError):
        build_layout(*args)


def test_segment_of_examples():
    lay = build_layout(2, [1, 1], 1)
    assert segment_of(lay, 3) == SegmentId(QUERY, 0, task=1)
    assert segment_of(lay, 0) == SegmentId(VISION, 0)
    assert segment_of(lay, 4) == SegmentId(TEXT, 0)
    with pytest.raises(IndexError):
        segment_of(lay, 5)
    with pytest.raises(IndexError):
        segment_of(lay, -1)


layouts = st.builds(
    build_layout,
    st.integers(0, 16),
    st.lists(st.integers(1, 8), max_size=4),
    st.integers(1, 8),
)


@settings(max_examples=100, deadline=None)
@given(lay=layouts)
def test_segment_of_partitions_positions(lay):
    counts = {VISION: 0, TEXT: 0}
    per_group = [0] * lay.num_groups
    for p in range(lay.total):
        seg = segment_of(lay, p)
        if seg.kind == QUERY:
            assert seg.offset == per_group[seg.task]
            per_group[seg.task] += 1
        else:
            assert seg.offset == counts[seg.kind]
            counts[seg.kind] += 1
    assert counts[VISION] == lay.vision_len
    assert counts[TEXT] == lay.text_len
    assert per_group == list(lay.group_lens)


def _tables(d=6, vocab=10, positions=32, seed=0):
    rng = np.random.default_rng(seed)
    return Tensor(rng.normal(size=(vocab, d))), Tensor(rng.normal(size=(positions, d)))


def test_assemble_zero_inputs_text_row():
    emb, pos = _tables()
    lay = build_layout(2, [1, 1], 1)
    zeros = Tensor(np.zeros((1, 2, 6)))
    banks = [Tensor(np.zeros((1, 6))), Tensor(np.zeros((1, 6)))]
    x = assemble_inputs(lay, zeros, banks, np.array([[7]]), emb, pos).data
    assert np.array_equal(x[0, 4], emb.data[7] + pos.data[4])
    assert np.array_equal(x[0, :4], pos.data[:4])


def test_assemble_table_layout_row_count():
    d = 4
    emb, pos = _tables(d=d, positions=640)
    lay = build_layout(576, [8, 8, 8, 8], 32)
    vis = Tensor(np.zeros((1, 576, d)))
    banks = [Tensor(np.zeros((8, d))) for _ in range(4)]
    x = assemble_inputs(lay, vis, banks, np.zeros((1, 32), dtype=int), emb, pos)
    assert x.shape == (1, 640, d)


def test_assemble_swapping_banks_swaps_rows_only():
    emb, _ = _tables()
    pos = Tensor(np.zeros((32, 6)))
    rng = np.random.default_rng(1)
    lay = build_layout(3, [2, 2], 2)
    vis = Tensor(rng.normal(size=(2, 3, 6)))
    a, b = rng.normal(size=(2, 6)), rng.normal(size=(2, 6))
    ids = np.array([[1, 2], [3, 4]])
    x1 = assemble_inputs(lay, vis, [Tensor(a), Tensor(b)], ids, emb, pos).data
    x2 = assemble_inputs(lay, vis, [Tensor(b), Tensor(a)], ids, emb, pos).data
    g0, g1 = slice(*lay.group(0)), slice(*lay.group(1))
    assert np.array_equal(x1[:, g0], x2[:, g1])
    assert np.array_equal(x1[:, g1], x2[:, g0])
    rest = np.r_[0:3, 7:9]
    assert np.array_equal(x1[:, rest], x2[:, rest])


@settings(max_examples=30, deadline=None)
@given(groups=st.lists(st.integers(1, 4), min_size=2, max_size=4), seed=st.integers(0, 10_000))
def test_assemble_group_permutation_equivariance(groups, seed):
    rng = np.random.default_rng(seed)
    d = 5
    emb = Tensor(rng.normal(size=(10, d)))
    pos = Tensor(np.zeros((64, d)))  # no positions so rows can be compared directly
    banks = [rng.normal(size=(q, d)) for q in groups]
    perm = rng.permutation(len(groups))
    vis = Tensor(rng.normal(size=(1, 2, d)))
    ids = np.array([[3, 4]])
    lay = build_layout(2, groups, 2)
    lay_p = build_layout(2, [groups[i] for i in perm], 2)
    x = assemble_inputs(lay, vis, [Tensor(b) for b in banks], ids, emb, pos).data
    xp = assemble_inputs(lay_p, vis, [Tensor(banks[i]) for i in perm], ids, emb, pos).data
    for new, old in enumerate(perm):
        assert np.array_equal(xp[:, slice(*lay_p.group(new))], x[:, slice(*lay.group(old))])


def test_assemble_rejects_mismatches():
    emb, pos = _tables()
    lay = build_layout(2, [1], 1)
    vis = Tensor(np.zeros((1, 2, 6)))
    with pytest.raises(ValueError):
        assemble_inputs(lay, Tensor(np.zeros((1, 2, 5))), [Tensor(np.zeros((1, 6)))], np.array([[1]]), emb, pos)
    with pytest.raises(ValueError):
        assemble_inputs(lay, vis, [Tensor(np.zeros((2, 6)))], np.array([[1]]), emb, pos)
    with pytest.raises((ValueError, IndexError)):
        assemble_inputs(lay, vis, [Tensor(np.zeros((1, 6)))], np.array([[99]]), emb, pos)


def test_bank_gradients_flow():
    from vaco import numerics as nx
    from vaco.numerics import ParamSet, backward

    emb, pos = _tables()
    ps = ParamSet()
    bank = ps.add("bank", np.ones((2, 6)))
    lay = build_layout(1, [2], 1)
    x = assemble_inputs(lay, Tensor(np.zeros((3, 1, 6))), [bank], np.ones((3, 1), dtype=int), emb, pos)
    g = backward(nx.sum_(x), ps)
    assert np.array_equal(g["bank"], np.full((2, 6), 3.0))
