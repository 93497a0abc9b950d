import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from oracles import central_difference, rel_err
from stformer.tensor import (
    DimensionError,
    GradTape,
    NumericError,
    TapeError,
    Tensor,
    backward,
    concat,
    embedding,
    gelu,
    layer_norm,
    matmul,
    relu,
    softmax_rows,
    stop_gradient,
)


def check_gradients(fn, *arrays, tol=1e-4, h=1e-6):
    """Analytic gradient of ``sum(fn(*tensors) * probe)`` vs central differences."""
    leaves = [Tensor(a, requires_grad=True) for a in arrays]
    probe = np.random.default_rng(99).normal(size=fn(*leaves).shape)
    with GradTape():
        loss = (fn(*leaves) * probe).sum()
    grads = backward(loss)
    for leaf in leaves:
        numeric = central_difference(lambda: float((fn(*leaves).data * probe).sum()), leaf.data, h)
        analytic = grads.get(leaf, np.zeros_like(leaf.data))
        assert rel_err(analytic, numeric) <= tol


class TestMatmul:
    def test_identity(self):
        out = matmul(Tensor(np.eye(2)), Tensor([[1.0, 2.0], [3.0, 4.0]]))
        np.testing.assert_array_equal(out.data, [[1, 2], [3, 4]])

    def test_projection(self):
        out = matmul(Tensor([[1.0, 0.0], [0.0, 0.0]]), Tensor([[5.0], [7.0]]))
        np.testing.assert_array_equal(out.data, [[5], [0]])

    def test_sum_gradient_is_row_broadcast_of_column_sums(self):
        rng = np.random.default_rng(0)
        a = Tensor(rng.normal(size=(4, 3)), requires_grad=True)
        b = Tensor(rng.normal(size=(3, 2)), requires_grad=True)
        with GradTape():
            loss = matmul(a, b).sum()
        grads = backward(loss)
        expected = np.broadcast_to(b.data.sum(axis=1), (4, 3))
        np.testing.assert_allclose(grads[a], expected, rtol=1e-12)
        numeric = central_difference(lambda: float(matmul(a, b).data.sum()), a.data)
        assert rel_err(grads[a], numeric) <= 1e-6

    def test_mismatch_names_both_shapes(self):
        with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 3\)"):
            matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))

    def test_batched_matches_numpy(self):
        rng = np.random.default_rng(1)
        a, b = rng.normal(size=(2, 3, 5, 4)), rng.normal(size=(4, 6))
        np.testing.assert_allclose(matmul(Tensor(a), Tensor(b)).data, a @ b, rtol=1e-12)
        check_gradients(matmul, a, b)


class TestSoftmax:
    def test_zeros_are_uniform(self):
        np.testing.assert_array_equal(softmax_rows(Tensor(np.zeros((2, 2)))).data, 0.5)

    def test_analytic_row(self):
        out = softmax_rows(Tensor([[math.log(2.0), 0.0]])).data
        np.testing.assert_allclose(out, [[2 / 3, 1 / 3]], rtol=1e-14)

    def test_random_rows_sum_to_one(self):
        out = softmax_rows(Tensor(np.random.default_rng(2).normal(size=(5, 5)))).data
        np.testing.assert_allclose(out.sum(axis=1), 1.0, atol=1e-12)

    @pytest.mark.parametrize("bad", [np.nan, np.inf, -np.inf])
    def test_non_finite_input(self, bad):
        with pytest.raises(NumericError):
            softmax_rows(Tensor([[0.0, bad]]))

    def test_large_logits_stay_finite(self):
        out = softmax_rows(Tensor([[1000.0, 999.0]])).data
        assert np.all(np.isfinite(out))

    @settings(max_examples=50, deadline=None)
    @given(arrays(np.float64, (4, 6), elements=st.floats(-30, 30)))
    def test_rows_are_distributions(self, x):
        out = softmax_rows(Tensor(x)).data
        np.testing.assert_allclose(out.sum(axis=1), 1.0, atol=1e-12)
        assert np.all(out > 0) and np.all(out < 1)

    def test_gradient(self):
        check_gradients(softmax_rows, np.random.default_rng(3).normal(size=(3, 5)))


class TestLayerNorm:
    def test_constant_vector_maps_to_zero(self):
        out = layer_norm(Tensor(np.full(4, 3.0)), Tensor(np.ones(4)), Tensor(np.zeros(4)))
        np.testing.assert_array_equal(out.data, 0.0)

    def test_unit_variance_pair(self):
        out = layer_norm(Tensor([1.0, -1.0]), Tensor(np.ones(2)), Tensor(np.zeros(2))).data
        np.testing.assert_allclose(out, [1.0, -1.0], atol=1e-5)

    def test_width_mismatch(self):
        with pytest.raises(DimensionError):
            layer_norm(Tensor(np.ones((2, 3))), Tensor(np.ones(4)), Tensor(np.zeros(4)))

    def test_gradient(self):
        rng = np.random.default_rng(4)
        check_gradients(layer_norm, rng.normal(size=(3, 8)), rng.normal(size=8), rng.normal(size=8))


class TestBackward:
    def test_sum_gives_ones(self):
        w = Tensor(np.ones((2, 2)), requires_grad=True)
        with GradTape():
            loss = w.sum()
        np.testing.assert_array_equal(backward(loss)[w], np.ones((2, 2)))

    def test_square_sum(self):
        w = Tensor([[1.0, 2.0], [3.0, 4.0]], requires_grad=True)
        with GradTape():
            loss = (w * w).sum()
        np.testing.assert_array_equal(backward(loss)[w], [[2, 4], [6, 8]])
        np.testing.assert_array_equal(w.grad, [[2, 4], [6, 8]])

    def test_non_scalar_loss(self):
        w = Tensor(np.ones(3), requires_grad=True)
        with GradTape():
            out = w * 2.0
        with pytest.raises(TapeError, match="scalar"):
            backward(out)

    def test_detached_loss(self):
        w = Tensor(np.ones(3), requires_grad=True)
        with pytest.raises(TapeError, match="detached"):
            backward(w.sum())

    def test_tape_is_single_use(self):
        w = Tensor(np.ones(3), requires_grad=True)
        with GradTape() as tape:
            loss = (w * w).sum()
        backward(loss)
        with pytest.raises(TapeError):
            backward(loss)
        with pytest.raises(TapeError):
            with tape:
                pass

    def test_two_consumers_accumulate(self):
        rng = np.random.default_rng(5)
        x = Tensor(rng.normal(size=(3, 3)), requires_grad=True)
        a, b = rng.normal(size=(3, 3)), rng.normal(size=(3, 3))

        def grad_of(f):
            with GradTape():
                loss = f()
            return backward(loss)[x]

        both = grad_of(lambda: (x * Tensor(a)).sum() + (relu(x) @ Tensor(b)).sum())
        first = grad_of(lambda: (x * Tensor(a)).sum())
        second = grad_of(lambda: (relu(x) @ Tensor(b)).sum())
        np.testing.assert_allclose(both, first + second, rtol=1e-14)

    def test_stopped_tensor_contributes_nothing(self):
        w = Tensor(np.arange(4.0), requires_grad=True)
        with GradTape():
            loss = (w * stop_gradient(w)).sum()
        np.testing.assert_array_equal(backward(loss)[w], np.arange(4.0))

    def test_nothing_recorded_without_tape(self):
        w = Tensor(np.ones(2), requires_grad=True)
        assert (w * w).is_leaf


class TestShapes:
    def test_reshape_transpose_round_trip_is_bit_identical(self):
        x = np.random.default_rng(6).normal(size=(2, 3, 4))
        t = Tensor(x)
        back = t.reshape(6, 4).reshape(2, 3, 4).transpose(2, 0, 1).transpose(1, 2, 0)
        assert back.data.tobytes() == x.tobytes()

    def test_bad_reshape(self):
        with pytest.raises(DimensionError):
            Tensor(np.ones(6)).reshape(4, 2)

    def test_tensor_on_right_of_ndarray(self):
        w = Tensor(np.ones(2), requires_grad=True)
        with GradTape():
            loss = (np.array([3.0, 4.0]) - w).sum()
        np.testing.assert_array_equal(backward(loss)[w], [-1.0, -1.0])


RNG = np.random.default_rng(7)
PRIMITIVES = {
    "add": (lambda a, b: a + b, [RNG.normal(size=(3, 4)), RNG.normal(size=(4,))]),
    "sub": (lambda a, b: a - b, [RNG.normal(size=(3, 4)), RNG.normal(size=(3, 1))]),
    "mul": (lambda a, b: a * b, [RNG.normal(size=(3, 4)), RNG.normal(size=(3, 4))]),
    "div": (lambda a, b: a / b, [RNG.normal(size=(3, 4)), RNG.uniform(1, 2, size=(3, 4))]),
    "scale": (lambda a: a * 2.5, [RNG.normal(size=(2, 3))]),
    "concat": (lambda a, b: concat([a, b], axis=-1), [RNG.normal(size=(2, 3)), RNG.normal(size=(2, 2))]),
    "reshape": (lambda a: a.reshape(3, 4) * a.reshape(3, 4), [RNG.normal(size=(2, 6))]),
    "transpose": (lambda a: a.transpose(1, 0, 2), [RNG.normal(size=(2, 3, 4))]),
    "slice": (lambda a: a[1:, ::2], [RNG.normal(size=(3, 4))]),
    "mean": (lambda a: a.mean(axis=0), [RNG.normal(size=(3, 4))]),
    "sum_keepdims": (lambda a: a.sum(axis=-1, keepdims=True) * a, [RNG.normal(size=(3, 4))]),
    "max": (lambda a: a.max(axis=-1), [RNG.normal(size=(3, 4))]),
    "abs": (lambda a: a.abs(), [RNG.normal(size=(3, 4)) + 0.1]),
    "relu": (relu, [RNG.normal(size=(3, 4)) + 0.05]),
    "gelu": (gelu, [RNG.normal(size=(3, 4))]),
    "broadcast": (lambda a: a.broadcast_to((3, 2, 4)), [RNG.normal(size=(2, 4))]),
}


@pytest.mark.parametrize("name", sorted(PRIMITIVES))
def test_primitive_gradient_matches_finite_differences(name):
    fn, inputs = PRIMITIVES[name]
    check_gradients(fn, *[x.copy() for x in inputs])


def test_embedding_lookup_and_gradient():
    table = Tensor(np.arange(12.0).reshape(4, 3), requires_grad=True)
    idx = np.array([[0, 3], [3, 1]])
    with GradTape():
        out = embedding(table, idx)
        loss = out.sum()
    np.testing.assert_array_equal(out.data[0, 1], [9, 10, 11])
    grad = backward(loss)[table]
    np.testing.assert_array_equal(grad[:, 0], [1, 1, 0, 2])
    with pytest.raises(IndexError):
        embedding(table, np.array([4]))
