import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from ompn import autodiff as ad
from ompn.autodiff import Tensor


def T(x, grad=False):
    return Tensor(np.array(x, dtype=float), requires_grad=grad)


def test_matmul_examples():
    assert np.array_equal(ad.matmul(T([[1, 0], [0, 1]]), T([[3], [4]])).data, [[3], [4]])
    assert ad.matmul(T([[1, 2]]), T([[3], [4]])).data.tolist() == [[11.0]]
    assert np.all(ad.matmul(T([[0.0]]), T([[5.0, -2.0]])).data == 0)


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(ad.ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
        ad.matmul(T(np.ones((2, 3))), T(np.ones((2, 3))))


def test_matmul_gradients():
    a = T([[1.0, 2.0], [3.0, 4.0]], grad=True)
    b = T([[5.0], [6.0]], grad=True)
    ad.reduce_sum(ad.matmul(a, b)).backward()
    dc = np.ones((2, 1))
    np.testing.assert_array_equal(a.grad, dc @ b.data.T)
    np.testing.assert_array_equal(b.grad, a.data.T @ dc)


def test_elementwise_values():
    assert ad.elementwise("sigmoid", T(0.0)).item() == 0.5
    assert ad.elementwise("tanh", T(0.0)).item() == 0.0
    assert ad.elementwise("sigmoid", T(math.log(3))).item() == pytest.approx(0.75, abs=1e-15)
    assert ad.elementwise("relu", T([-1.0, 2.0])).data.tolist() == [0.0, 2.0]
    assert ad.elementwise("scale", T([1.0, 2.0]), 3.0).data.tolist() == [3.0, 6.0]
    with pytest.raises(ValueError):
        ad.elementwise("softplus", T(1.0))


def test_sigmoid_extremes_do_not_overflow():
    with np.errstate(all="raise"):
        out = ad.sigmoid(T([-1000.0, 1000.0])).data
    assert out.tolist() == [0.0, 1.0]


def test_scalar_broadcast_only():
    assert (T(2.0) * T([[1.0, 2.0]])).data.tolist() == [[2.0, 4.0]]
    with pytest.raises(ad.ShapeError):
        T(np.ones((2, 1))) + T(np.ones((2, 3)))


def test_concat_and_split():
    a, b = T([[1], [2]]), T([[3], [4]])
    assert ad.concat([a, b], axis=0).data.tolist() == [[1], [2], [3], [4]]
    assert ad.concat([a]) is a
    x, y = ad.split(ad.concat([a, b], axis=0), [2, 2], axis=0)
    assert x.data.tolist() == a.data.tolist() and y.data.tolist() == b.data.tolist()
    with pytest.raises(ad.ShapeError):
        ad.concat([a, b], axis=2)
    with pytest.raises(ad.ShapeError):
        ad.concat([a, T([[1, 2]])], axis=0)


def test_concat_routes_gradient_slices():
    a, b = T([[1.0, 2.0]], grad=True), T([[3.0]], grad=True)
    out = ad.concat([a, b], axis=1)
    out.backward(np.array([[10.0, 20.0, 30.0]]))
    assert a.grad.tolist() == [[10.0, 20.0]]
    assert b.grad.tolist() == [[30.0]]


def test_logsoftmax_nll_examples():
    logits = T([0.0, 0.0], grad=True)
    loss = ad.logsoftmax_nll(logits, 0)
    assert loss.item() == pytest.approx(math.log(2), abs=1e-15)
    loss.backward()
    np.testing.assert_allclose(logits.grad, [-0.5, 0.5], atol=1e-15)
    big = ad.logsoftmax_nll(T([1e3, -1e3]), 0)
    assert np.isfinite(big.item()) and big.item() == pytest.approx(0.0, abs=1e-12)
    with pytest.raises(IndexError):
        ad.logsoftmax_nll(T([0.0, 0.0]), 2)


def test_batched_logsoftmax_nll():
    logits = T([[0.0, 0.0], [0.0, math.log(3)]])
    out = ad.logsoftmax_nll(logits, [0, 1])
    np.testing.assert_allclose(out.data, [math.log(2), -math.log(0.75)])


def test_grad_check_examples():
    theta = T(np.random.default_rng(0).normal(size=(3, 2)))
    assert ad.grad_check(lambda: ad.reduce_sum(theta * theta), theta) <= 1e-9
    const = T([1.0, 2.0])
    assert ad.grad_check(lambda: ad.reduce_sum(T([5.0]) * 2.0), const) == 0.0


def test_grad_check_rejects_non_finite():
    theta = T([-1.0])
    with np.errstate(invalid="ignore"), pytest.raises(ad.NumericError):
        ad.grad_check(lambda: ad.reduce_sum(ad.log(theta)), theta)


def test_unused_leaf_gets_zero_gradient():
    used, unused = T([1.0, 2.0], grad=True), T([3.0], grad=True)
    graph = ad.reduce_sum(used * used).backward()
    assert unused.grad is None or np.all(unused.grad == 0)
    assert unused not in graph.leaves


def test_backward_visits_reverse_topological_order():
    a = T([1.0], grad=True)
    b = ad.tanh(a)
    c = b * a
    d = ad.reduce_sum(c + b)
    graph = d.backward()
    pos = {id(n): i for i, n in enumerate(graph.nodes)}
    for node in graph.nodes:
        for p in node._parents:
            assert pos[id(p)] < pos[id(node)]
    assert np.all(np.isfinite(a.grad))


def test_forward_is_deterministic():
    rng = np.random.default_rng(3)
    x, w = rng.normal(size=(4, 5)), rng.normal(size=(5, 2))
    r1 = ad.tanh(ad.matmul(T(x), T(w))).data
    r2 = ad.tanh(ad.matmul(T(x), T(w))).data
    assert r1.tobytes() == r2.tobytes()


def test_no_grad_builds_no_graph():
    a = T([1.0], grad=True)
    with ad.no_grad():
        b = ad.tanh(a)
    assert not b.requires_grad and b._parents == ()


def test_checkpoint_round_trip(tmp_path):
    params = {"w": T(np.arange(6.0).reshape(2, 3)), "b": T([0.5, -1.25])}
    path = tmp_path / "ckpt.bin"
    ad.save_checkpoint(path, params, {"note": "x"})
    loaded, meta = ad.load_checkpoint(path)
    assert meta == {"note": "x"}
    assert set(loaded) == {"w", "b"}
    assert loaded["w"].tobytes() == params["w"].data.tobytes()
    assert path.read_bytes()[:8] == ad.CHECKPOINT_MAGIC


def test_checkpoint_rejects_bad_magic(tmp_path):
    path = tmp_path / "bad.bin"
    path.write_bytes(b"NOTACKPT" + bytes(16))
    with pytest.raises(ValueError):
        ad.load_checkpoint(path)


finite = st.floats(-3, 3, allow_nan=False)
mats = arrays(np.float64, (2, 3), elements=finite)


def _rel_err(f, *leaves):
    return ad.grad_check(f, list(leaves), eps=1e-6)


@settings(max_examples=25, deadline=None)
@given(mats, mats)
def test_binary_ops_match_finite_differences(x, y):
    a, b = T(x), T(y)
    assert _rel_err(lambda: ad.reduce_sum(a * b + a - b), a, b) <= 1e-6
    assert _rel_err(lambda: ad.reduce_sum(ad.div(a, 4.0 + b * b)), a, b) <= 1e-6


@settings(max_examples=25, deadline=None)
@given(mats)
def test_unary_ops_match_finite_differences(x):
    a = T(x)
    w = T(np.linspace(-1, 1, 6).reshape(2, 3))
    for fn in (ad.sigmoid, ad.tanh, lambda t: ad.scale(t, -2.5)):
        assert _rel_err(lambda: ad.reduce_sum(fn(a) * w), a) <= 1e-6
    assert _rel_err(lambda: ad.reduce_sum(ad.log(1.0 + a * a) * w), a) <= 1e-6


@settings(max_examples=25, deadline=None)
@given(arrays(np.float64, (3, 4), elements=finite), arrays(np.float64, (4, 2), elements=finite))
def test_matrix_ops_match_finite_differences(x, y):
    a, b = T(x), T(y)
    bias = T([0.3, -0.7])
    w = T(np.arange(6.0).reshape(3, 2))
    assert _rel_err(lambda: ad.reduce_sum(ad.tanh(ad.linear(a, b, bias)) * w), a, b, bias) <= 1e-6
    rows = T(x[:, :1])
    assert _rel_err(lambda: ad.reduce_sum(ad.scale_rows(rows, a) * a), rows, a) <= 1e-6
    assert _rel_err(lambda: ad.reduce_sum(ad.logsoftmax_nll(a, [0, 3, 1])), a) <= 1e-6
    assert _rel_err(lambda: ad.reduce_sum(ad.concat(ad.split(a, [1, 3], axis=1)[::-1], axis=1) * T(x[:, ::-1])), a) <= 1e-6
