import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from tafenet import tensor as tc
from tafenet.tensor import GradCheckError, ShapeError, Tensor

finite = st.floats(-10, 10, allow_nan=False, width=64)


def T(x, grad=False):
    return Tensor(x, requires_grad=grad, dtype=np.float64)


def test_matmul_identity_and_hand_case():
    b = [[5, 6], [7, 8]]
    assert np.array_equal(tc.matmul(T(np.eye(2)), T(b)).data, b)
    assert np.array_equal(tc.matmul(T([[1, 2], [3, 4]]), T(b)).data, [[19, 22], [43, 50]])


def test_matmul_shape_error_reports_both_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 2\)"):
        tc.matmul(T(np.ones((2, 3))), T(np.ones((2, 2))))


def test_elementwise_cases():
    assert np.array_equal(tc.elementwise("mul", T([1, 2, 3]), T([0, 0, 0])).data, [0, 0, 0])
    assert np.array_equal(tc.elementwise("relu", T([-1, 0, 2])).data, [0, 0, 2])
    assert np.array_equal(tc.elementwise("add", T([1, 2]), T([3, 4])).data, [4, 6])
    assert np.array_equal(tc.elementwise("scale", T([1, 2]), 3.0).data, [3, 6])
    with pytest.raises(ShapeError):
        tc.add(T([1, 2]), T([1, 2, 3]))
    with pytest.raises(ValueError):
        tc.elementwise("tanh", T([1.0]))


def test_log_softmax_cases():
    out = tc.log_softmax_rows(T([[0, 0, 0, 0]])).data
    assert np.allclose(out, -math.log(4), atol=1e-15)
    big = tc.log_softmax_rows(T([[1000, 0]])).data
    assert np.all(np.isfinite(big)) and np.allclose(big, [[0, -1000]])
    # high-precision oracle: ln(e + e^2 + e^3) = 3.40760596444438
    lse = 3 + math.log1p(math.exp(-1) + math.exp(-2))
    assert np.allclose(tc.log_softmax_rows(T([[1, 2, 3]])).data, [[1 - lse, 2 - lse, 3 - lse]], atol=1e-14)
    assert np.allclose(tc.log_softmax_rows(T([[1, 2, 3]])).data, [[-2.4076, -1.4076, -0.4076]], atol=5e-5)


def test_cosine_cases():
    assert tc.cosine_similarity(T([3.0, 4.0]), T([3.0, 4.0])).item() == pytest.approx(1.0, abs=1e-15)
    assert tc.cosine_similarity(T([1.0, 0.0]), T([0.0, 1.0])).item() == 0.0
    assert tc.cosine_similarity(T([1.0, 0.0]), T([1.0, 1.0])).item() == pytest.approx(1 / math.sqrt(2), abs=1e-12)
    assert tc.cosine_similarity(T([0.0, 0.0]), T([1.0, 1.0])).item() == 0.0


def test_backward_quadratic_and_matmul_adjoint():
    x = T([1.0, 2.0, 3.0], grad=True)
    tc.backward(tc.sum(x * x))
    assert np.array_equal(x.grad, [2, 4, 6])
    A = T(np.arange(6.0).reshape(2, 3), grad=True)
    B = T(np.arange(12.0).reshape(3, 4), grad=True)
    tc.backward(tc.sum(A @ B))
    assert np.allclose(A.grad, np.ones((2, 4)) @ B.data.T)
    assert np.allclose(B.grad, A.data.T @ np.ones((2, 4)))


def test_backward_rejects_non_scalar_and_resets():
    x = T([1.0, 2.0], grad=True)
    with pytest.raises(ShapeError):
        tc.backward(x * x)
    y = tc.sum(x * x)
    tc.backward(y)
    tc.backward(y)
    assert np.array_equal(x.grad, [2, 4])  # no accumulation across calls


def test_no_grad_records_nothing():
    x = T([1.0], grad=True)
    with tc.no_grad():
        y = x * x
    assert not y.requires_grad and y._parents == ()


def test_grad_check_quadratic_and_cls_loss(rng):
    x = T([1.0, 2.0], grad=True)
    assert tc.grad_check(lambda: tc.sum(x * x), [x]) < 1e-9
    from tafenet.losses import classification_loss

    z = T(rng.standard_normal((4, 3)), grad=True)
    y = np.eye(3)[[0, 2, 1, 1]]
    assert tc.grad_check(lambda: classification_loss(z, y), [z]) < 1e-6


def test_grad_check_requires_float64_and_reports_coordinate():
    with pytest.raises(TypeError):
        tc.grad_check(lambda: tc.sum(Tensor([1.0], True, dtype=np.float32)), [Tensor([1.0], True, dtype=np.float32)])
    x = T([1.0, 0.0], grad=True)

    def f():  # finite at x but blows up once the second coordinate moves
        return tc.sum(x) + T(np.inf if x.data[1] > 0 else 0.0)

    with pytest.raises(GradCheckError, match=r"\(1,\)"):
        tc.grad_check(f, [x])


def test_precision_switch():
    with tc.precision(64):
        assert Tensor([1]).dtype == np.float64
    assert Tensor([1]).dtype == np.float32
    with pytest.raises(ValueError):
        tc.set_precision(16)


def test_broadcast_adjoint_sums_expanded_axes():
    b = T([1.0, 2.0, 3.0], grad=True)
    tc.backward(tc.sum(tc.broadcast_to(b, (4, 3))))
    assert np.array_equal(b.grad, [4, 4, 4])
    with pytest.raises(ShapeError):
        tc.broadcast_to(b, (4, 2))


# --- properties ------------------------------------------------------------


@given(arrays(np.float64, st.tuples(st.integers(1, 8), st.integers(1, 8)), elements=finite))
def test_matmul_right_identity_exact(a):
    assert np.array_equal(tc.matmul(T(a), T(np.eye(a.shape[1]))).data, a)


@given(arrays(np.float64, st.tuples(st.integers(1, 6), st.integers(1, 8)), elements=st.floats(-50, 50, width=64)),
       st.floats(-100, 100))
def test_log_softmax_normalized_and_shift_invariant(z, c):
    out = tc.log_softmax_rows(T(z)).data
    assert np.all(np.abs(np.exp(out).sum(axis=1) - 1) <= 1e-12)
    shifted = tc.log_softmax_rows(T(z + c)).data
    assert np.max(np.abs(shifted - out)) <= 1e-12 * max(1.0, abs(c)) * 10


@given(arrays(np.float64, st.integers(1, 8), elements=st.floats(-10, 10, width=64)), st.floats(1e-3, 1e3))
def test_cosine_scale_invariance(p, c):
    if c * np.dot(p, p) < 1e-6:  # stay clear of the norm floor
        return
    assert tc.cosine_similarity(T(p), T(c * p)).item() == pytest.approx(1.0, abs=1e-12)


def _random_op_case(op, rng, shape):
    """A scalar-valued function through ``op`` and the leaves it depends on."""
    r = lambda *s: T(rng.standard_normal(s), grad=True)  # noqa: E731
    m, n = shape
    w = rng.standard_normal((m, n))  # fixed random projection makes every output matter
    if op == "add":
        a, b = r(m, n), r(m, n)
        return lambda: tc.sum((a + b) * T(w)), [a, b]
    if op == "sub":
        a, b = r(m, n), r(m, n)
        return lambda: tc.sum((a - b) * T(w)), [a, b]
    if op == "mul":
        a, b = r(m, n), r(m, n)
        return lambda: tc.sum(a * b * T(w)), [a, b]
    if op == "scale":
        a = r(m, n)
        return lambda: tc.sum(tc.scale(a, -1.7) * T(w)), [a]
    if op == "relu":
        a = T(rng.standard_normal((m, n)) + np.sign(rng.standard_normal((m, n))) * 0.1, grad=True)
        return lambda: tc.sum(tc.relu(a) * T(w)), [a]
    if op == "matmul":
        a, b = r(m, 3), r(3, n)
        return lambda: tc.sum((a @ b) * T(w)), [a, b]
    if op == "reshape":
        a = r(m * n)
        return lambda: tc.sum(tc.reshape(a, (m, n)) * T(w)), [a]
    if op == "transpose":
        a = r(n, m)
        return lambda: tc.sum(tc.transpose(a) * T(w)), [a]
    if op == "broadcast":
        a = r(n)
        return lambda: tc.sum(tc.broadcast_to(a, (m, n)) * T(w)), [a]
    if op == "sum_axis":
        a = r(m, n)
        return lambda: tc.sum(tc.sum(a, axis=0) * T(w[0])), [a]
    if op == "mean":
        a = r(m, n)
        return lambda: tc.mean(a * T(w)), [a]
    if op == "log_softmax":
        a = r(m, n)
        return lambda: tc.sum(tc.log_softmax_rows(a) * T(w)), [a]
    if op == "cosine":
        a, b = r(m, n), r(m, n)
        return lambda: tc.sum(tc.cosine_similarity(a, b) * T(w[:, 0])), [a, b]
    if op == "conv":
        k = int(rng.integers(1, 4))
        x, f = r(1, m, n, 2), r(k, k, 2, 2)
        wc = T(rng.standard_normal((1, m, n, 2)))
        return lambda: tc.sum(tc.conv2d_same(x, f) * wc), [x, f]
    raise AssertionError(op)


OPS = ["add", "sub", "mul", "scale", "relu", "matmul", "reshape", "transpose", "broadcast", "sum_axis", "mean",
       "log_softmax", "cosine", "conv"]


@pytest.mark.parametrize("op", OPS)
@given(shape=st.tuples(st.integers(1, 8), st.integers(1, 8)), seed=st.integers(0, 2**31))
def test_backward_matches_finite_differences(op, shape, seed):
    f, params = _random_op_case(op, np.random.default_rng(seed), shape)
    assert tc.grad_check(f, params) < 1e-4
