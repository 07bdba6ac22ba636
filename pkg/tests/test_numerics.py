import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vaco import numerics as nx
from vaco.numerics import MASK_NEG, NonFiniteError, ParamSet, ShapeError, Tensor, backward, finite_difference_check


def test_matmul_shape():
    a = Tensor(np.ones((2, 3)))
    b = Tensor(np.ones((3, 4)))
    assert nx.matmul(a, b).shape == (2, 4)


def test_matmul_shape_mismatch():
    with pytest.raises(ShapeError):
        nx.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 4))))


def test_add_broadcast_mismatch():
    with pytest.raises(ShapeError):
        nx.add(Tensor(np.ones((2, 3))), Tensor(np.ones((4,))))


def test_softmax_equal_row_is_uniform():
    out = nx.softmax(Tensor(np.full((1, 5), 3.7))).data
    np.testing.assert_allclose(out, np.full((1, 5), 0.2), rtol=0, atol=1e-15)
    assert abs(out.sum() - 1.0) < 1e-12


def test_layer_norm_constant_vector_is_zero():
    out = nx.layer_norm(Tensor(np.full((3, 6), 2.5))).data
    assert np.array_equal(out, np.zeros((3, 6)))


def test_nonfinite_input_rejected():
    with pytest.raises(NonFiniteError):
        Tensor(np.array([1.0, np.nan]))


def test_nonfinite_intermediate_rejected():
    with pytest.raises(NonFiniteError):
        nx.exp(Tensor(np.array([1000.0])))
    with pytest.raises(NonFiniteError):
        nx.log(Tensor(np.array([0.0])))


def test_backward_sum_gives_ones():
    ps = ParamSet()
    p = ps.add("p", np.arange(6.0).reshape(2, 3))
    g = backward(nx.sum_(p), ps)
    assert np.array_equal(g["p"], np.ones((2, 3)))


def test_backward_unused_param_zero():
    ps = ParamSet()
    p = ps.add("p", np.ones(3))
    ps.add("q", np.ones(4))
    g = backward(nx.sum_(nx.mul(p, p)), ps)
    assert np.array_equal(g["q"], np.zeros(4))


def test_backward_quadratic():
    ps = ParamSet()
    p = ps.add("p", np.array([3.0, -4.0]))
    g = backward(nx.mul(nx.sum_(nx.mul(p, p)), 0.5), ps)
    assert np.array_equal(g["p"], np.array([3.0, -4.0]))


def test_backward_requires_scalar():
    ps = ParamSet()
    p = ps.add("p", np.ones(3))
    with pytest.raises(ShapeError):
        backward(nx.mul(p, 2.0), ps)


def test_frozen_param_has_no_gradient_entry():
    ps = ParamSet()
    p = ps.add("p", np.ones(3))
    q = ps.add("q", np.ones(3), frozen=True)
    g = backward(nx.sum_(nx.mul(p, q)), ps)
    assert set(g) == {"p"}


def test_no_grad_builds_no_graph():
    ps = ParamSet()
    p = ps.add("p", np.ones(3))
    with nx.no_grad():
        out = nx.mul(p, 2.0)
    assert not out.requires_grad


def test_fd_half_square():
    ps = ParamSet()
    x = ps.add("x", np.array([2.0]))
    report = finite_difference_check(lambda: nx.mul(nx.sum_(nx.mul(x, x)), 0.5), ps, 1e-5)
    assert report["x"] < 1e-8


def test_fd_excludes_frozen():
    ps = ParamSet()
    x = ps.add("x", np.array([2.0]))
    y = ps.add("y", np.array([1.5]), frozen=True)
    report = finite_difference_check(lambda: nx.sum_(nx.mul(x, y)), ps)
    assert set(report) == {"x"}


def test_fd_rejects_bad_epsilon():
    ps = ParamSet()
    x = ps.add("x", np.array([2.0]))
    with pytest.raises(ValueError):
        finite_difference_check(lambda: nx.sum_(x), ps, 0.0)


def test_fd_nonfinite_perturbation_raises():
    ps = ParamSet()
    x = ps.add("x", np.array([1e-6]))
    with pytest.raises(NonFiniteError):
        finite_difference_check(lambda: nx.sum_(nx.log(x)), ps, 1e-5)


def _composed_graph(seed: int):
    """A random graph touching every differentiable op."""
    rng = np.random.default_rng(seed)
    ps = ParamSet()
    w = ps.add("w", rng.normal(size=(5, 4)))
    b = ps.add("b", rng.normal(size=(4,)))
    g = ps.add("g", 1.0 + 0.1 * rng.normal(size=(4,)))
    beta = ps.add("beta", 0.1 * rng.normal(size=(4,)))
    emb = ps.add("emb", rng.normal(size=(7, 4)))
    x = Tensor(rng.normal(size=(2, 3, 5)))
    ids = rng.integers(0, 7, size=(2, 2))
    mask = np.where(np.tril(np.ones((5, 5))) > 0, 0.0, MASK_NEG)

    def loss():
        h = nx.add(nx.matmul(x, w), b)  # 2x3x4
        h = nx.concat([h, nx.take_rows(emb, ids)], axis=1)  # 2x5x4
        h = nx.layer_norm(h, g, beta)
        h = nx.gelu(h)
        scores = nx.div(nx.matmul(h, nx.transpose(h, (0, 2, 1))), 2.0)
        att = nx.softmax(scores, mask)
        h = nx.matmul(att, h)
        h = nx.add(h, nx.broadcast_to(nx.reshape(b, (1, 1, 4)), (2, 5, 4)))
        h = nx.tanh(nx.slice_(h, np.s_[:, 1:, :]))
        lp = nx.log_softmax(h)
        pos = nx.add(nx.exp(nx.mul(h, 0.5)), 1.0)
        extra = nx.mean(nx.log(pos)) - nx.mean(nx.sqrt(pos))
        return nx.add(nx.neg(nx.mean(lp)), nx.sub(extra, nx.sum_(nx.mul(b, b), axis=0)))

    return loss, ps


@pytest.mark.parametrize("seed", range(20))
def test_composed_graph_matches_finite_differences(seed):
    loss, ps = _composed_graph(seed)
    report = finite_difference_check(loss, ps, 1e-5)
    assert max(report.values()) <= 1e-4, report


def test_forward_is_deterministic():
    loss, _ = _composed_graph(3)
    assert loss().data.tobytes() == loss().data.tobytes()


@settings(max_examples=50, deadline=None)
@given(
    rows=st.integers(1, 6),
    cols=st.integers(1, 9),
    seed=st.integers(0, 2**31 - 1),
)
def test_softmax_rows_normalised_and_masked_exactly_zero(rows, cols, seed):
    rng = np.random.default_rng(seed)
    logits = rng.normal(scale=5.0, size=(rows, cols))
    blocked = rng.random((rows, cols)) < 0.4
    blocked[:, rng.integers(cols)] = False  # at least one column open per row
    mask = np.where(blocked, MASK_NEG, 0.0)
    out = nx.softmax(Tensor(logits), mask).data
    np.testing.assert_allclose(out.sum(axis=-1), 1.0, atol=1e-9)
    assert np.all(out[blocked] == 0.0)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), n=st.integers(2, 12))
def test_layer_norm_output_standardised(seed, n):
    x = np.random.default_rng(seed).normal(scale=3.0, size=(4, n))
    out = nx.layer_norm(Tensor(x)).data
    np.testing.assert_allclose(out.mean(axis=-1), 0.0, atol=1e-12)
    var = x.var(axis=-1)
    np.testing.assert_allclose(out.var(axis=-1), var / (var + 1e-5), rtol=1e-10)


def test_gelu_matches_tanh_formula():
    x = np.linspace(-4, 4, 17)
    expected = 0.5 * x * (1 + np.tanh(math.sqrt(2 / math.pi) * (x + 0.044715 * x**3)))
    np.testing.assert_allclose(nx.gelu(Tensor(x)).data, expected, rtol=1e-14)


def test_paramset_unique_names_and_snapshot_roundtrip():
    ps = ParamSet()
    ps.add("a", np.ones(2))
    with pytest.raises(KeyError):
        ps.add("a", np.ones(2))
    snap = ps.snapshot()
    ps["a"].data[:] = 5.0
    ps.load(snap)
    assert np.array_equal(ps["a"].data, np.ones(2))


def test_paramset_set_frozen_predicate():
    ps = ParamSet()
    ps.add("decoder.w", np.ones(2))
    ps.add("val.w", np.ones(2))
    ps.set_frozen(lambda n: n.startswith("decoder."))
    assert [p.name for p in ps.active()] == ["val.w"]
    assert not ps["decoder.w"].requires_grad
