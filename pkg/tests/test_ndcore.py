import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from mvp import ndcore as nd
from mvp.ndcore import Parameter, ShapeError, Tensor

finite = st.floats(-50, 50, allow_nan=False, allow_infinity=False)


def test_linear_identity_and_bias():
    out = nd.linear(Tensor([1.0, 2.0]), Parameter(np.eye(2)), Parameter(np.zeros(2)))
    np.testing.assert_array_equal(out.data, [1.0, 2.0])
    out = nd.linear(Tensor([1.0, 1.0]), Parameter([[1.0, 1.0]]), Parameter([3.0]))
    np.testing.assert_array_equal(out.data, [5.0])


def test_linear_rejects_mismatch():
    with pytest.raises(ShapeError):
        nd.linear(Tensor(np.ones(3)), Parameter(np.ones((2, 2))))
    with pytest.raises(ShapeError):
        nd.linear(Tensor(np.ones(2)), Parameter(np.ones((2, 2))), Parameter(np.ones(3)))


def test_linear_gradient_matches_finite_differences(rng):
    x = Tensor(rng.normal(size=(4, 3)))
    W = Parameter(rng.normal(size=(2, 3)))
    b = Parameter(rng.normal(size=2))
    err = nd.grad_check(lambda: nd.linear(x, W, b).sum(), [W, b], step=1e-5)
    assert err < 1e-6


def test_softmax_examples():
    np.testing.assert_allclose(nd.softmax(Tensor([1.0, 1.0, 1.0])).data, [1 / 3] * 3, atol=1e-15)
    np.testing.assert_allclose(nd.softmax(Tensor([0.0, math.log(2)])).data, [1 / 3, 2 / 3], atol=1e-15)


def test_softmax_rejects_empty():
    with pytest.raises(ShapeError):
        nd.softmax(Tensor(np.zeros(0)))


@given(arrays(np.float64, st.integers(1, 12), elements=st.floats(-1e3, 1e3)), st.floats(-1e3, 1e3))
def test_softmax_sums_to_one_and_is_shift_invariant(v, c):
    p = nd.softmax(Tensor(v)).data
    assert np.all(p >= 0)
    assert abs(p.sum() - 1.0) < 1e-12
    np.testing.assert_allclose(nd.softmax(Tensor(v + c)).data, p, atol=1e-12, rtol=0)


def test_softmax_mask_excludes_positions():
    v = Tensor([[1.0, 2.0, 50.0]])
    p = nd.softmax(v, mask=np.array([[True, True, False]])).data
    np.testing.assert_allclose(p, [[1 / (1 + math.e), math.e / (1 + math.e), 0.0]], atol=1e-15)


def test_sigmoid_examples():
    assert nd.sigmoid(Tensor(0.0)).item() == 0.5
    assert abs(nd.sigmoid(Tensor(100.0)).item() - 1.0) < 1e-12
    assert abs(nd.sigmoid(Tensor(-3.0)).item() + nd.sigmoid(Tensor(3.0)).item() - 1.0) < 1e-12
    with np.errstate(over="raise"):
        assert nd.sigmoid(Tensor(-1000.0)).item() == 0.0


@given(arrays(np.float64, st.integers(1, 20), elements=finite))
def test_sigmoid_range_and_symmetry(x):
    s = nd.sigmoid(Tensor(x)).data
    assert np.all((s >= 0) & (s <= 1))
    np.testing.assert_allclose(nd.sigmoid(Tensor(-x)).data, 1 - s, atol=1e-12)


def test_layer_norm_examples():
    one, zero = Parameter(np.ones(3)), Parameter(np.zeros(3))
    np.testing.assert_array_equal(nd.layer_norm(Tensor([5.0, 5.0, 5.0]), one, zero).data, [0.0, 0.0, 0.0])
    out = nd.layer_norm(Tensor([-1.0, 1.0]), Parameter(np.ones(2)), Parameter(np.zeros(2))).data
    expected = 1.0 / math.sqrt(1.0 + 1e-5)
    np.testing.assert_allclose(out, [-expected, expected], rtol=1e-15)


@given(arrays(np.float64, (3, 6), elements=st.floats(-100, 100)))
def test_layer_norm_rows_standardised(x):
    x = x + np.arange(6) * 1.5  # keep rows away from constant
    out = nd.layer_norm(Tensor(x), Parameter(np.ones(6)), Parameter(np.zeros(6))).data
    var = x.var(axis=1)
    np.testing.assert_allclose(out.mean(axis=1), 0.0, atol=1e-9)
    np.testing.assert_allclose(out.var(axis=1), var / (var + 1e-5), atol=1e-9)


def test_layer_norm_gradient(rng):
    x = Parameter(rng.normal(size=(2, 3, 5)))
    g = Parameter(rng.normal(size=5))
    s = Parameter(rng.normal(size=5))
    w = rng.normal(size=(2, 3, 5))
    err = nd.grad_check(lambda: (nd.layer_norm(x, g, s) * w).sum(), [x, g, s])
    assert err < 1e-5


def test_backward_examples():
    x = Parameter(3.0)
    nd.backward(x * x)
    assert x.grad == pytest.approx(6.0, abs=1e-12)
    z = Parameter(0.0)
    nd.backward(nd.sigmoid(z))
    assert z.grad == pytest.approx(0.25, abs=1e-15)


def test_backward_accumulates_and_rejects_non_scalar():
    x = Parameter(2.0)
    nd.backward(x * x)
    nd.backward(x * x)
    assert x.grad == pytest.approx(8.0)
    with pytest.raises(ShapeError):
        nd.backward(Parameter(np.ones(2)) * 2.0)


def test_backward_shared_subexpression(rng):
    a = Parameter(rng.normal(size=4))
    err = nd.grad_check(lambda: ((a * a) * nd.exp(a) + a.sum() * a).sum(), [a])
    assert err < 1e-8


def test_no_grad_records_nothing():
    x = Parameter(1.0)
    with nd.no_grad():
        y = x * 2.0
    assert not y.requires_grad and y._backward is None
    assert nd.is_grad_enabled()


def test_grad_check_quadratic_and_step_validation():
    theta = Parameter([0.3, -1.2, 2.0])
    A = np.array([[2.0, 0.5, 0.0], [0.5, 1.0, 0.2], [0.0, 0.2, 3.0]])

    def f():
        return (theta * nd.matmul(Tensor(A), theta.reshape(3, 1)).reshape(3)).sum()

    assert nd.grad_check(f, [theta]) < 1e-9
    with pytest.raises(ValueError):
        nd.grad_check(f, [theta], step=1e-2)


def test_grad_check_rejects_non_finite():
    p = Parameter([0.0])
    with pytest.raises(FloatingPointError), np.errstate(divide="ignore"):
        nd.grad_check(lambda: nd.log(p * p).sum(), [p], step=1e-5)


def test_elementwise_ops_gradients(rng):
    a = Parameter(rng.uniform(0.5, 2.0, size=(3, 4)))
    b = Parameter(rng.uniform(0.5, 2.0, size=(4,)))
    fns = [
        lambda: (a / b).sum(),
        lambda: (a - b).sum() * 2.0,
        lambda: (a**3).sum(),
        lambda: nd.log(a).sum(),
        lambda: nd.tanh(a * b).sum(),
        lambda: nd.gelu(a - 1.0).sum(),
        lambda: (nd.relu(a - 1.2) * a).sum(),
        lambda: a.mean(axis=0).sum() + a[1:, ::2].sum(),
        lambda: a[np.array([0, 0, 2])].sum(),
        lambda: nd.concat([a, b.reshape(1, 4)], axis=0).sum() * nd.stack([b, b]).mean(),
        lambda: nd.matmul(a.transpose(), a).sum(),
    ]
    for f in fns:
        assert nd.grad_check(f, [a, b]) < 1e-6


def test_attention_matches_unfused_softmax(rng):
    q = Parameter(rng.normal(size=(2, 3, 4, 5)))
    k = Parameter(rng.normal(size=(2, 3, 6, 5)))
    v = Parameter(rng.normal(size=(2, 3, 6, 5)))
    mask = np.array([[1, 1, 1, 1, 0, 0], [1, 1, 1, 1, 1, 1]], dtype=bool)
    fused = nd.attention(q, k, v, mask).data
    scores = q.data @ np.swapaxes(k.data, -1, -2)
    p = nd.softmax(Tensor(scores), mask=np.broadcast_to(mask[:, None, None, :], scores.shape)).data
    np.testing.assert_allclose(fused, p @ v.data, atol=1e-13)
    w = rng.normal(size=fused.shape)
    assert nd.grad_check(lambda: (nd.attention(q, k, v, mask) * w).sum(), [q, k, v]) < 1e-7


def test_bce_with_logits():
    assert nd.bce_with_logits(Tensor([0.0]), [1]).item() == pytest.approx(math.log(2), abs=1e-15)
    assert nd.bce_with_logits(Tensor([0.3]), [0]).item() == pytest.approx(math.log1p(math.exp(0.3)), abs=1e-15)
    tiny = nd.bce_with_logits(Tensor([100.0]), [1]).item()
    assert 0.0 <= tiny < 1e-40 and math.isfinite(tiny)
    with pytest.raises(ValueError):
        nd.bce_with_logits(Tensor([0.0]), [2])


@given(arrays(np.float64, st.integers(1, 8), elements=finite), st.integers(0, 2**16))
def test_forward_is_deterministic(x, seed):
    r = np.random.default_rng(seed)
    W = Parameter(r.normal(size=(3, x.size)))
    y1 = nd.gelu(nd.linear(Tensor(x), W)).data
    y2 = nd.gelu(nd.linear(Tensor(x), W)).data
    assert y1.tobytes() == y2.tobytes()
    assert np.isfinite(y1).all()
