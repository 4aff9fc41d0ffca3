import math
import threading

import numpy as np
import pytest
from numpy.testing import assert_allclose

from cilkit.errors import DataError, NumericalError, ShapeError
from cilkit.tensor import (
    Tensor,
    absolute,
    add,
    backward,
    broadcast_to,
    concat,
    cross_entropy,
    div,
    exp,
    is_grad_enabled,
    l1_norm,
    layer_norm,
    log,
    log_softmax,
    matmul,
    mean,
    mul,
    no_grad,
    numerical_gradient,
    relu,
    reshape,
    scaled_dot_product_attention,
    select,
    softmax,
    sub,
    swap_last,
    tensor_sum,
    transpose,
)


def check_gradient(loss_fn, tensor, rtol=1e-5, atol=1e-8):
    tensor.zero_grad()
    backward(loss_fn(), inputs=[tensor])
    assert_allclose(tensor.grad, numerical_gradient(loss_fn, tensor), rtol=rtol, atol=atol)


def normal(shape):
    return lambda rng: rng.normal(size=shape)


def positive(shape):
    return lambda rng: rng.uniform(0.5, 2.0, size=shape)


def away_from_zero(shape):
    # keeps finite differences off the kinks of relu and abs
    return lambda rng: rng.choice([-1.0, 1.0], size=shape) * rng.uniform(0.5, 2.0, size=shape)


@pytest.mark.parametrize(
    "op, inputs",
    [
        (add, [normal((3, 4)), normal(4)]),
        (sub, [normal((3, 4)), normal((3, 1))]),
        (mul, [normal((3, 4)), normal((3, 4))]),
        (div, [normal((3, 4)), positive(4)]),
        (exp, [normal((3, 4))]),
        (log, [positive((3, 4))]),
        (absolute, [away_from_zero((3, 4))]),
        (relu, [away_from_zero((3, 4))]),
        (lambda x: softmax(x, axis=-1), [normal((3, 4))]),
        (lambda x: softmax(x, axis=0), [normal((3, 4))]),
        (lambda x: mean(x, axis=0), [normal((3, 4))]),
        (mean, [normal((3, 4))]),
        (lambda x: tensor_sum(x, axis=1, keepdims=True), [normal((3, 4))]),
        (transpose, [normal((3, 4))]),
        (lambda x: reshape(x, (2, 6)), [normal((3, 4))]),
    ],
    ids=[
        "add",
        "sub",
        "mul",
        "div",
        "exp",
        "log",
        "absolute",
        "relu",
        "softmax-last",
        "softmax-first",
        "mean-axis",
        "mean-all",
        "sum-keepdims",
        "transpose",
        "reshape",
    ],
)
def test_op_gradient_matches_finite_differences(rng, op, inputs):
    tensors = [Tensor(make(rng), requires_grad=True) for make in inputs]
    weights = rng.normal(size=op(*tensors).shape)

    def loss():
        return (op(*tensors) * weights).sum()

    for tensor in tensors:
        check_gradient(loss, tensor)


def test_non_finite_values_are_rejected():
    with pytest.raises(NumericalError):
        Tensor([1.0, np.nan])
    with pytest.raises(NumericalError):
        Tensor([1.0]) / Tensor([0.0])


def test_broadcast_add_reduces_gradient():
    a = Tensor(np.ones((2, 3)), requires_grad=True)
    b = Tensor(np.zeros(3), requires_grad=True)
    backward((a + b).sum())
    assert_allclose(b.grad, [2.0, 2.0, 2.0])
    assert_allclose(a.grad, np.ones((2, 3)))


def test_incompatible_shapes_raise_shape_error():
    with pytest.raises(ShapeError):
        Tensor(np.ones((2, 3))) + Tensor(np.ones(4))
    with pytest.raises(ShapeError) as info:
        matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))
    assert "(2, 3) vs (2, 3)" in str(info.value)


def test_no_grad_records_nothing():
    x = Tensor(np.ones(3), requires_grad=True)
    with no_grad():
        assert not is_grad_enabled()
        y = (x * 2.0).sum()
    assert is_grad_enabled()
    assert not y.requires_grad
    assert y._parents == ()


def test_no_grad_does_not_leak_into_other_threads():
    inside, other = threading.Event(), []

    def worker():
        inside.wait(timeout=5)
        other.append(is_grad_enabled())

    thread = threading.Thread(target=worker)
    thread.start()
    with no_grad():
        inside.set()
        thread.join(timeout=5)
        assert not is_grad_enabled()
    assert other == [True]


def test_backward_requires_scalar():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ShapeError):
        backward(x * 2.0)


def test_backward_fills_untouched_inputs_with_zeros():
    x = Tensor(np.ones(2), requires_grad=True)
    unused = Tensor(np.ones(3), requires_grad=True)
    backward(x.sum(), inputs=[x, unused])
    assert_allclose(unused.grad, np.zeros(3))


def test_softmax_values():
    assert_allclose(softmax(Tensor([2.0, 5.0])).data, [0.047426, 0.952574], atol=1e-6)
    assert_allclose(softmax(Tensor(np.zeros(4))).data, np.full(4, 0.25))
    assert softmax(Tensor([3.0, -1.0, 0.5])).data.sum() == pytest.approx(1.0, abs=1e-12)


def test_cross_entropy_values():
    uniform = cross_entropy(Tensor(np.zeros((1, 10))), [3])
    assert uniform.item() == pytest.approx(math.log(10), abs=1e-12)
    scalar = cross_entropy(Tensor([[1.0, 0.0]]), [0])
    assert scalar.item() == pytest.approx(math.log(1 + math.exp(-1)), abs=1e-12)
    confident = np.zeros((2, 4))
    confident[0, 1] = confident[1, 2] = 30.0
    assert cross_entropy(Tensor(confident), [1, 2]).item() < 1e-9


def test_cross_entropy_rejects_out_of_range_labels():
    with pytest.raises(DataError):
        cross_entropy(Tensor(np.zeros((2, 3))), [0, 3])


def test_matmul_gradient(rng):
    a = Tensor(rng.normal(size=(2, 3, 4)), requires_grad=True)
    b = Tensor(rng.normal(size=(4, 5)), requires_grad=True)
    check_gradient(lambda: (matmul(a, b) * matmul(a, b)).sum(), a)
    check_gradient(lambda: (matmul(a, b) * matmul(a, b)).sum(), b)


def test_layer_norm_gradient(rng):
    x = Tensor(rng.normal(size=(3, 5)), requires_grad=True)
    gamma = Tensor(rng.normal(size=5), requires_grad=True)
    beta = Tensor(rng.normal(size=5), requires_grad=True)
    weights = rng.normal(size=(3, 5))

    def loss():
        return (layer_norm(x, gamma, beta) * weights).sum()

    for tensor in (x, gamma, beta):
        check_gradient(loss, tensor)


def test_attention_gradient(rng):
    q = Tensor(rng.normal(size=(2, 3, 4)), requires_grad=True)
    k = Tensor(rng.normal(size=(2, 3, 4)), requires_grad=True)
    v = Tensor(rng.normal(size=(2, 3, 4)), requires_grad=True)
    weights = rng.normal(size=(2, 3, 4))

    def loss():
        return (scaled_dot_product_attention(q, k, v) * weights).sum()

    for tensor in (q, k, v):
        check_gradient(loss, tensor)


def test_shape_ops_gradient(rng):
    x = Tensor(rng.normal(size=(1, 4)), requires_grad=True)
    y = Tensor(rng.normal(size=(2, 3, 4)), requires_grad=True)
    weights = rng.normal(size=(2, 4))
    swapped_weights = rng.normal(size=(2, 4, 4))

    def loss():
        joined = concat([broadcast_to(x, (2, 1, 4)), y], axis=1)
        return (select(joined, 0, axis=1) * weights).sum() + (swap_last(joined) * swapped_weights).sum()

    check_gradient(loss, x)
    check_gradient(loss, y)


def test_log_softmax_and_cross_entropy_gradients(rng):
    logits = Tensor(rng.normal(size=(4, 3)), requires_grad=True)
    weights = rng.normal(size=(4, 3))
    check_gradient(lambda: (log_softmax(logits) * weights).sum(), logits)
    check_gradient(lambda: cross_entropy(logits, [0, 2, 1, 2]), logits)


def test_l1_norm_uses_zero_subgradient_at_zero():
    x = Tensor([[-2.0, 0.0], [3.0, 1.0]], requires_grad=True)
    loss = l1_norm(x)
    assert loss.item() == 6.0
    backward(loss)
    assert_allclose(x.grad, [[-1.0, 0.0], [1.0, 1.0]])


def test_numerical_gradient_restores_values(rng):
    x = Tensor(rng.normal(size=(2, 2)), requires_grad=True)
    before = x.data.copy()
    numerical_gradient(lambda: (x * x).sum(), x)
    assert np.array_equal(x.data, before)


def test_relu_masks_gradient():
    x = Tensor([-1.0, 0.0, 2.0], requires_grad=True)
    backward((relu(x) * Tensor([5.0, 5.0, 5.0])).sum())
    assert_allclose(x.grad, [0.0, 0.0, 5.0])
