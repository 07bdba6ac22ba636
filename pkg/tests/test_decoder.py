import math

import numpy as np
import pytest

from vaco.decoder import (
    DecoderConfig,
    ForwardRecord,
    attention,
    extract_last_token_attention,
    forward,
    init_decoder,
    loss_mllm,
    mtq_hidden_states,
)
from vaco.gateway_mask import build_tgm, to_additive
from vaco.numerics import MASK_NEG, ParamSet, Tensor, finite_difference_check
from vaco.sequence import assemble_inputs, build_layout

TINY = DecoderConfig(layers=2, d_model=16, heads=2, ffn_dim=32, vocab_size=12, max_positions=16)


def _model(seed=0, cfg=TINY):
    ps = ParamSet()
    init_decoder(ps, cfg, np.random.default_rng(seed))
    return ps


def _inputs(ps, layout, seed=0, batch=2, banks=None):
    rng = np.random.default_rng(seed + 100)
    d = ps["decoder.tok_emb"].shape[1]
    vision = Tensor(rng.normal(size=(batch, layout.vision_len, d)))
    if banks is None:
        banks = [Tensor(rng.normal(size=(q, d))) for q in layout.group_lens]
    ids = rng.integers(0, 12, size=(batch, layout.text_len))
    return assemble_inputs(layout, vision, banks, ids, ps["decoder.tok_emb"], ps["decoder.pos_emb"])


def test_config_validation():
    with pytest.raises(ValueError):
        DecoderConfig(d_model=10, heads=4)
    with pytest.raises(ValueError):
        DecoderConfig(layers=0)


def test_delta_attention_returns_value_row():
    rng = np.random.default_rng(0)
    q, k, v = (Tensor(rng.normal(size=(1, 3, 4))) for _ in range(3))
    mask = np.full((3, 3), MASK_NEG)
    mask[:, 1] = 0.0
    out, weights = attention(q, k, v, 1, mask)
    assert np.array_equal(weights.data[0, 0, :, 1], np.ones(3))
    np.testing.assert_array_equal(out.data[0], np.repeat(v.data[0, 1:2], 3, axis=0))


def test_blocked_column_perturbation_leaves_other_rows_unchanged():
    ps = _model()
    layout = build_layout(0, [], 6)
    allowed = np.tril(np.ones((6, 6), dtype=bool))
    allowed[3:, 2] = False  # nobody after position 2 may read it
    mask = np.where(allowed, 0.0, MASK_NEG)
    x = _inputs(ps, layout)
    y = x.data.copy()
    y[:, 2] += 5.0
    a = forward(ps, TINY, x, mask).hidden.data
    b = forward(ps, TINY, Tensor(y), mask).hidden.data
    rows = [0, 1, 3, 4, 5]
    assert np.array_equal(a[:, rows], b[:, rows])
    assert not np.array_equal(a[:, 2], b[:, 2])


def test_forward_deterministic():
    ps = _model(1)
    layout = build_layout(4, [2, 2], 4)
    x = _inputs(ps, layout)
    mask = to_additive(build_tgm(layout))
    l1 = forward(ps, TINY, x, mask).logits.data
    l2 = forward(ps, TINY, x, mask).logits.data
    assert l1.shape == (2, 12, 12)
    assert l1.tobytes() == l2.tobytes()


def test_forward_rejects_bad_shapes():
    ps = _model()
    with pytest.raises(ValueError):
        forward(ps, TINY, Tensor(np.zeros((1, 3, 8))), np.zeros((3, 3)))
    with pytest.raises(ValueError):
        forward(ps, TINY, Tensor(np.zeros((1, 3, 16))), np.zeros((4, 4)))


def test_attention_rows_are_distributions_on_allowed_columns():
    ps = _model(2)
    layout = build_layout(4, [2, 3], 3)
    gm = build_tgm(layout)
    rec = forward(ps, TINY, _inputs(ps, layout), to_additive(gm), retain_attention=True)
    assert len(rec.attention) == TINY.layers
    for w in rec.attention:
        np.testing.assert_allclose(w.sum(axis=-1), 1.0, atol=1e-12)
        assert np.all(w[..., ~gm.allowed] < 1e-12)


def _record(logits):
    logits = np.asarray(logits, dtype=float)
    return ForwardRecord(Tensor(np.zeros(logits.shape[:2] + (1,))), Tensor(logits))


def test_loss_uniform_logits():
    layout = build_layout(0, [], 3)
    rec = _record(np.zeros((1, 3, 8)))
    loss = loss_mllm(rec, layout, np.array([[-1, 4, 2]]))
    assert abs(loss.item() - math.log(8)) < 1e-12


def test_loss_confident_logits_near_zero():
    layout = build_layout(1, [], 2)
    logits = np.full((1, 3, 5), -50.0)
    logits[0, 2, 3] = 50.0
    loss = loss_mllm(_record(logits), layout, np.array([[-1, 3]]))
    assert loss.item() < 1e-30


def test_loss_two_way_hand_value():
    layout = build_layout(0, [], 1)
    loss = loss_mllm(_record([[[1.0, -1.0]]]), layout, np.array([[0]]))
    assert abs(loss.item() - math.log1p(math.exp(-2.0))) < 1e-15
    assert abs(loss.item() - 0.1269) < 1e-4


def test_loss_ignores_vision_and_query_positions():
    layout = build_layout(2, [1], 2)
    logits = np.zeros((1, 5, 4))
    base = loss_mllm(_record(logits), layout, np.array([[1, 2]])).item()
    logits[0, :3] = np.random.default_rng(0).normal(size=(3, 4))
    assert loss_mllm(_record(logits), layout, np.array([[1, 2]])).item() == base


def test_loss_requires_supervision():
    layout = build_layout(0, [], 2)
    with pytest.raises(ValueError):
        loss_mllm(_record(np.zeros((1, 2, 4))), layout, np.array([[-1, -1]]))


def test_loss_mllm_gradient_matches_finite_differences():
    ps = _model(3)
    layout = build_layout(3, [2], 4)
    mask = to_additive(build_tgm(layout))
    rng = np.random.default_rng(5)
    vision = Tensor(rng.normal(size=(2, 3, 16)))
    bank = ps.add("bank", rng.normal(size=(2, 16)))
    ids = rng.integers(0, 12, size=(2, 4))
    targets = np.array([[-1, 3, 4, -1], [-1, -1, 7, 2]])

    def loss():
        x = assemble_inputs(layout, vision, [bank], ids, ps["decoder.tok_emb"], ps["decoder.pos_emb"])
        return loss_mllm(forward(ps, TINY, x, mask), layout, targets)

    report = finite_difference_check(loss, ps)
    assert max(report.values()) <= 1e-4


def test_causality_token_change_only_affects_later_logits():
    ps = _model(4)
    layout = build_layout(0, [], 8)
    mask = to_additive(build_tgm(layout))
    ids = np.random.default_rng(0).integers(0, 12, size=(1, 8))
    zero_v = Tensor(np.zeros((1, 0, 16)))

    def logits(tokens):
        x = assemble_inputs(layout, zero_v, [], tokens, ps["decoder.tok_emb"], ps["decoder.pos_emb"])
        return forward(ps, TINY, x, mask).logits.data

    base = logits(ids)
    for p in range(8):
        alt = ids.copy()
        alt[0, p] = (alt[0, p] + 1) % 12
        out = logits(alt)
        assert np.array_equal(out[:, :p], base[:, :p])
        assert not np.array_equal(out[:, p], base[:, p])


def test_group_isolation_hidden_and_logits():
    ps = _model(6)
    layout = build_layout(3, [2, 3], 2)
    mask = to_additive(build_tgm(layout))
    rng = np.random.default_rng(7)
    banks = [rng.normal(size=(2, 16)), rng.normal(size=(3, 16))]
    x1 = _inputs(ps, layout, banks=[Tensor(b) for b in banks])
    r1 = forward(ps, TINY, x1, mask)
    banks[0] = banks[0] + rng.normal(size=(2, 16))
    r2 = forward(ps, TINY, _inputs(ps, layout, banks=[Tensor(b) for b in banks]), mask)
    g1 = slice(*layout.group(1))
    assert np.array_equal(r1.hidden.data[:, g1], r2.hidden.data[:, g1])
    assert np.array_equal(r1.logits.data[:, g1], r2.logits.data[:, g1])
    t = slice(*layout.text)
    assert not np.array_equal(r1.logits.data[:, t], r2.logits.data[:, t])


def test_extract_uniform_attention():
    layout = build_layout(4, [], 2)
    w = np.full((1, 2, 6, 6), 1 / 6)
    rec = ForwardRecord(Tensor(np.zeros((1, 6, 1))), Tensor(np.zeros((1, 6, 1))), [w])
    scores = extract_last_token_attention(rec, layout)
    np.testing.assert_allclose(scores, np.full((1, 4), 1 / 6))
    np.testing.assert_allclose(extract_last_token_attention(rec, layout, renormalize=True), np.full((1, 4), 0.25))


def test_extract_blocked_vision_column_scores_zero():
    ps = _model(8)
    layout = build_layout(4, [], 2)
    allowed = np.tril(np.ones((6, 6), dtype=bool))
    allowed[5, 2] = False
    rec = forward(ps, TINY, _inputs(ps, layout), np.where(allowed, 0.0, MASK_NEG), retain_attention=True)
    for layer in ("mean", 0, 1):
        for reduce in ("mean", "max"):
            scores = extract_last_token_attention(rec, layout, layer, reduce)
            assert scores.shape == (2, 4)
            assert np.all(scores[:, 2] == 0.0)


def test_extract_requires_retained_attention():
    ps = _model()
    layout = build_layout(2, [], 2)
    rec = forward(ps, TINY, _inputs(ps, layout), to_additive(build_tgm(layout)))
    with pytest.raises(ValueError):
        extract_last_token_attention(rec, layout)


def test_mtq_hidden_states_indexing():
    layout = build_layout(2, [1, 1], 1)
    hidden = np.arange(2 * 5 * 3, dtype=float).reshape(2, 5, 3)
    rec = ForwardRecord(Tensor(hidden), Tensor(np.zeros((2, 5, 2))))
    assert np.array_equal(mtq_hidden_states(rec, layout, 1).data, hidden[:, 3:4])
    with pytest.raises(IndexError):
        mtq_hidden_states(rec, layout, 2)


def test_mtq_hidden_states_shape():
    layout = build_layout(4, [8, 8], 2)
    rec = ForwardRecord(Tensor(np.zeros((1, 22, 32))), Tensor(np.zeros((1, 22, 3))))
    assert mtq_hidden_states(rec, layout, 1).shape == (1, 8, 32)


def test_key_projection_has_no_bias():
    ps = _model()
    assert "decoder.layers.0.attn.k.b" not in ps
    assert "decoder.layers.0.attn.q.b" in ps


def test_softmax_shift_invariance_motivates_no_key_bias():
    rng = np.random.default_rng(0)
    q, k, v = (rng.normal(size=(1, 4, 6)) for _ in range(3))
    shift = rng.normal(size=6)
    a, _ = attention(Tensor(q), Tensor(k), Tensor(v), 2, None)
    b, _ = attention(Tensor(q), Tensor(k + shift), Tensor(v), 2, None)
    np.testing.assert_allclose(a.data, b.data, atol=1e-12)
