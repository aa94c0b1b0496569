import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from gnnm import autodiff as ad
from gnnm.autodiff import Tensor
from gnnm.errors import ShapeError, UsageError
from gnnm.gradcheck import numerical_gradient, relative_error


def leaf(a):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=True)


def test_matmul_identity_and_projector():
    eye = Tensor(np.eye(2))
    m = Tensor([[1.0, 2.0], [3.0, 4.0]])
    np.testing.assert_array_equal((eye @ m).data, m.data)
    p = Tensor([[1.0, 0.0], [0.0, 0.0]])
    np.testing.assert_array_equal((p @ Tensor([[5.0], [7.0]])).data, [[5.0], [0.0]])


def test_matmul_matches_triple_loop():
    rng = np.random.default_rng(0)
    a, b = rng.normal(size=(3, 4)), rng.normal(size=(4, 2))
    expected = np.zeros((3, 2))
    for i in range(3):
        for j in range(2):
            for k in range(4):
                expected[i, j] += a[i, k] * b[k, j]
    np.testing.assert_allclose((Tensor(a) @ Tensor(b)).data, expected, rtol=0, atol=1e-14)


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(ShapeError) as err:
        Tensor(np.zeros((2, 3))) @ Tensor(np.zeros((2, 3)))
    assert "(2, 3)" in str(err.value)


def test_softmax_examples():
    np.testing.assert_allclose(ad.softmax(Tensor([0.0, 0.0])).data, [0.5, 0.5])
    big = ad.softmax(Tensor([1000.0, 1000.0, 1000.0])).data
    assert np.all(np.isfinite(big))
    np.testing.assert_allclose(big, [1 / 3] * 3)
    np.testing.assert_allclose(ad.softmax(Tensor([0.0, math.log(3.0)])).data, [0.25, 0.75], atol=1e-15)


def test_softmax_along_columns():
    x = np.array([[0.0, 1.0], [math.log(3.0), 1.0]])
    out = ad.softmax(Tensor(x), axis=-2).data
    np.testing.assert_allclose(out, [[0.25, 0.5], [0.75, 0.5]], atol=1e-15)


def test_layer_norm_examples():
    ones = ad.layer_norm(Tensor(np.ones(4)), Tensor(np.ones(4)), Tensor(np.zeros(4)), eps=1e-5)
    np.testing.assert_array_equal(ones.data, np.zeros(4))
    pm = ad.layer_norm(Tensor([-1.0, 1.0]), Tensor(np.ones(2)), Tensor(np.zeros(2)), eps=1e-12)
    np.testing.assert_allclose(pm.data, [-1.0, 1.0], atol=1e-9)


def test_layer_norm_matches_direct_formula():
    x = np.array([0.0, 2.0, 4.0, 6.0])
    out = ad.layer_norm(Tensor(x), Tensor(np.ones(4)), Tensor(np.zeros(4)), eps=1e-5).data
    mu = sum(x) / 4
    var = sum((v - mu) ** 2 for v in x) / 4
    expected = [(v - mu) / math.sqrt(var + 1e-5) for v in x]
    np.testing.assert_allclose(out, expected, rtol=0, atol=1e-12)


def test_layer_norm_feature_axis_of_matrix():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(5, 3))
    g, b = rng.normal(size=5), rng.normal(size=5)
    out = ad.layer_norm(Tensor(x), Tensor(g), Tensor(b), axis=-2).data
    for t in range(3):
        col = x[:, t]
        ref = (col - col.mean()) / np.sqrt(col.var() + 1e-5) * g + b
        np.testing.assert_allclose(out[:, t], ref, atol=1e-12)


def test_conv_examples():
    x = Tensor([[1.0, 2.0, 3.0]])
    np.testing.assert_array_equal(ad.conv1d_time(x, Tensor([0.0, 1.0, 0.0])).data, x.data)
    np.testing.assert_array_equal(ad.conv1d_time(x, Tensor([0.0, 0.0, 0.0])).data, [[0.0, 0.0, 0.0]])
    np.testing.assert_array_equal(ad.conv1d_time(x, Tensor([1.0, 1.0, 1.0])).data, [[3.0, 6.0, 5.0]])


def test_conv_is_causal_in_both_directions():
    # k = (a, b, c): out[t] = a x[t-1] + b x[t] + c x[t+1]
    out = ad.conv1d_time(Tensor([[0.0, 1.0, 0.0, 0.0]]), Tensor([2.0, 3.0, 5.0])).data
    np.testing.assert_array_equal(out, [[5.0, 3.0, 2.0, 0.0]])


def test_backward_requires_scalar():
    with pytest.raises(UsageError):
        ad.backward(leaf([1.0, 2.0]) * 2.0)


def test_sum_gradient_is_ones():
    p = leaf([1.0, -2.0, 3.0])
    ad.backward(ad.sum(p))
    np.testing.assert_array_equal(p.grad, np.ones(3))


def test_squared_norm_gradient():
    w = leaf(np.eye(2))
    x = Tensor([[1.0], [2.0]])
    ad.backward(ad.sum(ad.square(w @ x)))
    np.testing.assert_array_equal(w.grad, [[2.0, 4.0], [4.0, 8.0]])


def test_gradient_accumulates_over_consumers():
    p = leaf([3.0])
    ad.backward(ad.sum(p * 2.0 + p * 5.0))
    np.testing.assert_array_equal(p.grad, [7.0])


def test_leaf_gradient_accumulates_across_calls_until_zeroed():
    p = leaf([1.0, 1.0])
    ad.backward(ad.sum(p))
    ad.backward(ad.sum(p))
    np.testing.assert_array_equal(p.grad, [2.0, 2.0])
    ad.zero_grad([p])
    assert p.grad is None


def test_broadcast_add_unbroadcasts_gradient():
    a = leaf(np.ones((3, 4)))
    b = leaf(np.ones(4))
    ad.backward(ad.sum(a + b))
    assert b.grad.shape == (4,)
    np.testing.assert_array_equal(b.grad, [3.0] * 4)


def test_no_graph_without_requires_grad():
    out = Tensor([1.0]) * 3.0
    assert not out.requires_grad
    assert out._parents == ()


def _check_op(fn, *inputs):
    tensors = [leaf(x) for x in inputs]
    analytic = ad.grad(fn(*tensors), tensors)
    for t, g in zip(tensors, analytic):
        num = numerical_gradient(lambda: fn(*tensors), t)
        assert relative_error(g, num) < 1e-6


def test_gradients_of_primitives_against_differences():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(4, 3))
    r = rng.normal(size=(4, 3))
    _check_op(lambda a: ad.sum(ad.softmax(a, axis=-2) * r), x)
    _check_op(lambda a: ad.sum(ad.log_softmax(a, axis=-1) * r), x)
    _check_op(lambda a: ad.sum(ad.elu(a) * r), x)
    _check_op(lambda a: ad.sum(ad.exp(a) * r), x)
    _check_op(lambda a: ad.sum(ad.log(ad.exp(a) + 1.0) * r), x)
    _check_op(lambda a, g, b: ad.sum(ad.layer_norm(a, g, b, axis=-2) * r), x, rng.normal(size=4),
              rng.normal(size=4))
    _check_op(lambda a, k: ad.sum(ad.conv1d_time(a, k) * r), x, rng.normal(size=3))
    r42, r63, r4 = rng.normal(size=(4, 2)), rng.normal(size=(6, 3)), rng.normal(size=4)
    _check_op(lambda a, b: ad.sum((a @ b) * r42), x, rng.normal(size=(3, 2)))
    _check_op(lambda a, b: ad.sum(ad.concat([a, b], axis=-2) * r63), x, rng.normal(size=(2, 3)))
    _check_op(lambda a: ad.sum(ad.index(a, (..., 1)) * r4), x)


def test_batched_matmul_gradient_shapes():
    w = leaf(np.ones((2, 3)))
    x = leaf(np.ones((5, 3, 4)))
    ad.backward(ad.sum(w @ x))
    assert w.grad.shape == (2, 3)
    np.testing.assert_array_equal(w.grad, np.full((2, 3), 20.0))
    assert x.grad.shape == (5, 3, 4)


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 5), st.integers(1, 5)),
              elements=st.floats(-50, 50)))
def test_softmax_columns_sum_to_one(x):
    out = ad.softmax(Tensor(x), axis=-2).data
    np.testing.assert_allclose(out.sum(axis=-2), 1.0, atol=1e-12)
    assert np.all(out >= 0)


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, st.integers(2, 8), elements=st.floats(-10, 10)), st.floats(-5, 5))
def test_softmax_shift_invariant(x, shift):
    np.testing.assert_allclose(ad.softmax(Tensor(x)).data, ad.softmax(Tensor(x + shift)).data, atol=1e-12)


def test_single_precision_stays_single():
    x = Tensor(np.ones((2, 2), dtype=np.float32))
    g = Tensor(np.ones(2, dtype=np.float32))
    assert ad.layer_norm(x, g, g, axis=-2).dtype == np.float32
    assert ad.softmax(x).dtype == np.float32
    assert ad.as_dtype("single") == np.float32
    assert ad.as_dtype("double") == np.float64
