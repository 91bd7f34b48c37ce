import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from tarflow.errors import (
    DegenerateMaskError,
    DomainError,
    GradientError,
    ShapeMismatchError,
)
from tarflow.numerics import (
    Tape,
    Tensor,
    backward,
    concatenate,
    exp,
    gelu,
    log,
    matmul,
    reduce_mean,
    reduce_sum,
    reshape,
    softmax,
    tanh,
    transpose,
)
from tarflow.numerics.gradcheck import central_difference, relative_error

finite = st.floats(-2.0, 2.0, allow_nan=False, allow_infinity=False)


def test_matmul_identity():
    a = Tensor([[1.0, 2.0], [3.0, 4.0]])
    np.testing.assert_array_equal(
        matmul(a, Tensor(np.eye(2))).data, [[1.0, 2.0], [3.0, 4.0]]
    )


def test_exp_of_zeros():
    np.testing.assert_array_equal(exp(Tensor.zeros((3,))).data, [1, 1, 1])


def test_reduce_sum_axis():
    a = Tensor([[1.0, 2.0], [3.0, 4.0]])
    np.testing.assert_array_equal(reduce_sum(a, axis=1).data, [3.0, 7.0])


def test_broadcast_trailing_axes():
    a = Tensor(np.ones((2, 3)))
    b = Tensor([1.0, 2.0, 3.0])
    np.testing.assert_array_equal((a + b).data[1], [2.0, 3.0, 4.0])


def test_shape_mismatch_names_both_shapes():
    with pytest.raises(ShapeMismatchError) as err:
        Tensor(np.ones((2, 3))) + Tensor(np.ones((4,)))
    assert err.value.shapes == [(2, 3), (4,)]
    assert "(2, 3)" in str(err.value)


def test_matmul_shape_mismatch():
    with pytest.raises(ShapeMismatchError):
        matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_domain_errors():
    with pytest.raises(DomainError):
        log(Tensor([1.0, 0.0]))
    with pytest.raises(DomainError):
        Tensor([1.0]) / Tensor([0.0])


def test_tensors_are_read_only():
    t = Tensor([1.0, 2.0])
    with pytest.raises(ValueError):
        t.data[0] = 5.0
    copy = t.numpy()
    copy[0] = 5.0
    assert t.data[0] == 1.0


def test_precision_is_kept():
    a = Tensor([1.0, 2.0], dtype=np.float32)
    assert (a * 2.0).dtype == np.float32
    assert Tensor([1, 2]).dtype == np.float64


def test_softmax_examples():
    np.testing.assert_allclose(softmax(Tensor([0.0, 0.0])).data, [0.5, 0.5])
    np.testing.assert_allclose(
        softmax(Tensor([1000.0, 1000.0])).data, [0.5, 0.5]
    )
    np.testing.assert_allclose(
        softmax(Tensor([0.0, math.log(3.0)])).data, [0.25, 0.75]
    )


def test_softmax_fully_masked_row():
    mask = np.array([[True, False], [False, False]])
    with pytest.raises(DegenerateMaskError):
        softmax(Tensor(np.zeros((2, 2))), mask=mask)


@settings(max_examples=50, deadline=None)
@given(
    arrays(np.float64, (3, 5), elements=st.floats(-50, 50)),
    st.floats(-100, 100),
)
def test_softmax_rows_sum_to_one_and_ignore_shifts(logits, shift):
    y = softmax(Tensor(logits), axis=-1).data
    np.testing.assert_allclose(y.sum(axis=-1), 1.0, atol=1e-12)
    shifted = softmax(Tensor(logits + shift), axis=-1).data
    np.testing.assert_allclose(shifted, y, atol=1e-12)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (2, 3, 4), elements=finite))
def test_reshape_transpose_round_trip(values):
    t = Tensor(values)
    moved = reshape(transpose(t, (2, 0, 1)), (4, 6))
    back = transpose(reshape(moved, (4, 2, 3)), (1, 2, 0))
    np.testing.assert_array_equal(back.data, values)


def test_backward_square_sum():
    x = Tensor([1.0, 2.0, 3.0])
    with Tape() as tape:
        tape.watch(x)
        out = (x * x).sum()
    np.testing.assert_array_equal(backward(tape, out)[x], [2.0, 4.0, 6.0])


def test_backward_of_constant_is_zero():
    x = Tensor([1.0, 2.0])
    with Tape() as tape:
        tape.watch(x)
        out = Tensor(3.0) * 2.0
    np.testing.assert_array_equal(backward(tape, out)[x], [0.0, 0.0])


def test_detached_leaf_gets_zero_gradient():
    x = Tensor([1.0, 2.0])
    with Tape() as tape:
        tape.watch(x)
        out = (x.detach() * 3.0).sum()
    np.testing.assert_array_equal(backward(tape, out)[x], [0.0, 0.0])


def test_backward_needs_scalar_seed():
    x = Tensor([1.0, 2.0])
    with Tape() as tape:
        tape.watch(x)
        out = x * 2.0
    with pytest.raises(GradientError):
        backward(tape, out)


def test_tape_only_records_tracked_inputs():
    a, b = Tensor([1.0]), Tensor([2.0])
    with Tape() as tape:
        tape.watch(a)
        a * 2.0
        b * 2.0
    assert len(tape) == 1


def _composite(x: Tensor, w: Tensor) -> Tensor:
    h = gelu(matmul(x, w))
    h = concatenate([tanh(h), exp(h * 0.5)], axis=-1)
    logits = transpose(reshape(h, (3, 2, 4)), (1, 0, 2))
    probs = softmax(logits, axis=-1, mask=np.tril(np.ones((3, 4), bool)))
    return reduce_mean(log(probs + 1.0) * logits) + (w / 3.0).sum()


def test_composite_graph_matches_finite_differences(rng):
    x_value = rng.uniform(-2, 2, size=(6, 3))
    w_value = rng.uniform(-2, 2, size=(3, 2))
    x, w = Tensor(x_value), Tensor(w_value)
    with Tape() as tape:
        tape.watch(x, w)
        out = _composite(x, w)
    grads = backward(tape, out)
    numeric_x = central_difference(
        lambda v: _composite(Tensor(v), w).item(), x_value
    )
    numeric_w = central_difference(
        lambda v: _composite(x, Tensor(v)).item(), w_value
    )
    assert relative_error(grads[x], numeric_x) < 1e-4
    assert relative_error(grads[w], numeric_w) < 1e-4


@pytest.mark.parametrize(
    "op",
    [
        lambda a, b: a + b,
        lambda a, b: a - b,
        lambda a, b: a * b,
        lambda a, b: a / (b * b + 1.0),
        lambda a, b: exp(a) * b,
        lambda a, b: log(a * a + 1.0) + b,
        lambda a, b: tanh(a) * gelu(b),
        lambda a, b: (a * a + 1.0) ** 1.5 + b,
        lambda a, b: reshape(a, (3, 2)) @ reshape(b, (2, 3)),
        lambda a, b: transpose(a) @ b,
        lambda a, b: softmax(a, axis=0) * b,
        lambda a, b: concatenate([a, b], axis=0)[1:3],
    ],
)
def test_primitive_gradients(op, rng):
    a_value = rng.uniform(-2, 2, size=(2, 3))
    b_value = rng.uniform(-2, 2, size=(2, 3))

    def scalar(a, b):
        return reduce_sum(op(a, b) * op(a, b))

    a, b = Tensor(a_value), Tensor(b_value)
    with Tape() as tape:
        tape.watch(a, b)
        out = scalar(a, b)
    grads = backward(tape, out)
    numeric_a = central_difference(
        lambda v: scalar(Tensor(v), b).item(), a_value
    )
    numeric_b = central_difference(
        lambda v: scalar(a, Tensor(v)).item(), b_value
    )
    assert relative_error(grads[a], numeric_a) < 1e-4
    assert relative_error(grads[b], numeric_b) < 1e-4
