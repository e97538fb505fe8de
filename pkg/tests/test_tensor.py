import math

import numpy as np
import pytest

from retina_eit import tensor as T
from retina_eit.errors import ContractError, DimensionError, GradAccumulationError, NumericError
from retina_eit.tensor import Tensor, grad_check


def leaf(rng, *shape, scale=1.0):
    return Tensor(rng.normal(0, scale, shape), requires_grad=True, dtype=np.float64)


UNARY = {
    "exp": T.exp,
    "tanh": T.tanh,
    "gelu": T.gelu,
    "mish": T.mish,
    "neg": T.neg,
    "square": lambda a: a ** 2,
    "sum_axis": lambda a: T.tsum(a, axis=0),
    "mean_axis": lambda a: T.mean(a, axis=1, keepdims=True),
    "reshape": lambda a: a.reshape(-1),
    "transpose": lambda a: a.T,
    "getitem": lambda a: a[1:, ::2],
    "fancy": lambda a: a[np.array([0, 0, 2])],
    "softmax": lambda a: T.softmax(a, axis=-1),
    "log_softmax": lambda a: T.log_softmax(a, axis=-1),
}


@pytest.mark.parametrize("name", sorted(UNARY))
def test_unary_ops_match_finite_differences(name):
    op = UNARY[name]
    for seed in range(5):
        rng = np.random.default_rng(seed)
        x = leaf(rng, 3, 4)
        w = rng.normal(size=op(Tensor(x.data, dtype=np.float64)).shape)
        report = grad_check(lambda a: (op(a) * Tensor(w, dtype=np.float64)).sum(), x)
        assert report.passed, (name, seed, report.deviation)


def test_positive_domain_ops():
    rng = np.random.default_rng(0)
    x = Tensor(rng.uniform(0.5, 2.0, (3, 4)), requires_grad=True, dtype=np.float64)
    for op in (T.log, T.sqrt, lambda a: a ** 1.5, lambda a: 1.0 / a):
        assert grad_check(lambda a: op(a).sum(), x).passed


def test_relu_away_from_kink():
    x = Tensor(np.array([[-2.0, -0.5, 0.3, 1.7]]), requires_grad=True, dtype=np.float64)
    assert grad_check(lambda a: (T.relu(a) * a).sum(), x).passed


def test_binary_ops_with_broadcasting():
    rng = np.random.default_rng(3)
    a, b = leaf(rng, 2, 3, 4), leaf(rng, 4)
    for op in (T.add, T.sub, T.mul):
        assert grad_check(lambda x, y: (op(x, y) ** 2).sum(), [a, b]).passed
    c = Tensor(rng.uniform(1, 2, (3, 1)), requires_grad=True, dtype=np.float64)
    assert grad_check(lambda x, y: T.div(x, y).sum(), [a, c]).passed


def test_matmul_batched_and_broadcast():
    rng = np.random.default_rng(4)
    a, b = leaf(rng, 2, 3, 5), leaf(rng, 5, 4)
    assert grad_check(lambda x, y: T.tanh(x @ y).sum(), [a, b]).passed
    c = leaf(rng, 2, 5, 4)
    assert grad_check(lambda x, y: (x @ y).sum(), [a, c]).passed


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(DimensionError, match=r"\(2, 3\).*\(4, 5\)"):
        Tensor(np.zeros((2, 3))) @ Tensor(np.zeros((4, 5)))


def test_concat_swapaxes_layer_norm():
    rng = np.random.default_rng(5)
    a, b = leaf(rng, 2, 3), leaf(rng, 2, 2)
    assert grad_check(lambda x, y: (T.concat([x, y], axis=1) ** 2).sum(), [a, b]).passed
    x = leaf(rng, 2, 3, 4)
    assert grad_check(lambda t: (T.swapaxes(t, -1, -2) ** 3).sum(), x).passed
    g, bias = leaf(rng, 4), leaf(rng, 4)
    w = Tensor(rng.normal(size=(2, 3, 4)), dtype=np.float64)
    assert grad_check(lambda t, gg, bb: (T.layer_norm(t, gg, bb) * w).sum(), [x, g, bias]).passed


def test_cross_entropy_values_and_gradient_identity():
    with T.default_dtype(np.float64):
        z = Tensor(np.zeros((3, 5)), requires_grad=True)
        loss = T.cross_entropy(z, [0, 2, 4])
        assert loss.item() == pytest.approx(math.log(5), abs=1e-12)
        T.backward(loss)
        expected = np.full((3, 5), 0.2)
        expected[[0, 1, 2], [0, 2, 4]] -= 1
        np.testing.assert_allclose(z.grad, expected / 3, atol=1e-15)
        big = Tensor(np.array([[50.0, 0, 0, 0, 0]]))
        assert T.cross_entropy(big, [0]).item() == pytest.approx(0.0, abs=1e-20)


def test_cross_entropy_rejects_bad_label():
    with pytest.raises(ContractError):
        T.cross_entropy(Tensor(np.zeros((1, 5))), [5])


def test_softmax_is_simplex_and_stable():
    x = Tensor(np.array([[1000.0, 1000.0, -1000.0]]))
    p = T.softmax(x).data
    np.testing.assert_allclose(p, [[0.5, 0.5, 0.0]])
    with pytest.raises(NumericError):
        Tensor(np.array([np.nan]))


def test_backward_twice_without_zero_grad_raises():
    x = Tensor(np.ones(3), requires_grad=True)
    T.backward((x * x).sum())
    with pytest.raises(GradAccumulationError):
        T.backward((x * 2.0).sum())
    x.zero_grad()
    T.backward((x * 2.0).sum())
    np.testing.assert_array_equal(x.grad, [2, 2, 2])


def test_backward_requires_scalar():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ContractError):
        T.backward(x * 2.0)


def test_shared_subexpression_accumulates_once_per_path():
    x = Tensor(np.array(3.0), requires_grad=True, dtype=np.float64)
    y = x * x
    T.backward(y + y)
    assert x.grad == pytest.approx(12.0)


def test_no_grad_and_default_dtype():
    x = Tensor(np.ones(2), requires_grad=True)
    assert x.dtype == np.float32
    with T.no_grad():
        assert not (x * 2).requires_grad
    with T.default_dtype(np.float64):
        assert Tensor([1.0]).dtype == np.float64
    assert Tensor([1.0]).dtype == np.float32


def test_gelu_and_mish_reference_values():
    x = np.array([-3.0, -1.0, 0.0, 0.5, 2.0])
    with T.default_dtype(np.float64):
        gelu = T.gelu(Tensor(x)).data
        mish = T.mish(Tensor(x)).data
    ref_gelu = 0.5 * x * (1 + np.tanh(math.sqrt(2 / math.pi) * (x + 0.044715 * x ** 3)))
    ref_mish = x * np.tanh(np.log1p(np.exp(x)))
    np.testing.assert_allclose(gelu, ref_gelu, rtol=1e-12)
    np.testing.assert_allclose(mish, ref_mish, rtol=1e-12)


def test_grad_check_detects_a_wrong_gradient():
    def bad_square(a):
        return Tensor.from_op(a.data ** 2, (a,), lambda g: (g * a.data,))  # missing factor 2

    x = Tensor(np.array([1.0, 2.0]), requires_grad=True, dtype=np.float64)
    assert not grad_check(lambda a: bad_square(a).sum(), x).passed
