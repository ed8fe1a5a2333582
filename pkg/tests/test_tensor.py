"""Autodiff engine: op semantics, gradient correctness, graph mechanics."""

import numpy as np
import pytest

from neurotranscode import tensor
from neurotranscode.tensor import (
    Tensor,
    TensorError,
    as_tensor,
    backward,
    leaky_relu,
    mse,
    tensor_sum,
)

from oracles import fd_gradient, rel_err


def grad_of(build, x0, h=1e-5):
    """Autodiff and FD gradients of a scalar-valued builder at x0."""
    x = Tensor(np.asarray(x0, dtype=np.float64), requires_grad=True)
    loss = build(x)
    backward(loss)
    fd = fd_gradient(lambda a: build(Tensor(a)).item(), np.asarray(x0, float), h)
    return x.grad, fd


class TestTensorBasics:
    def test_float_dtypes_only(self):
        assert Tensor([1, 2]).dtype == np.float64
        assert Tensor(np.zeros(3, dtype=np.float32)).dtype == np.float32
        assert Tensor([1], dtype=np.float32).dtype == np.float32

    def test_non_finite_rejected(self):
        with pytest.raises(TensorError, match="non-finite"):
            Tensor([1.0, np.nan])
        with pytest.raises(TensorError):
            Tensor([np.inf])

    def test_detach_drops_history(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        y = tensor.mul(x, x)
        d = y.detach()
        assert not d.requires_grad
        assert d._backward is None
        np.testing.assert_array_equal(d.data, y.data)

    def test_item_and_repr(self):
        t = Tensor(3.5)
        assert t.item() == 3.5
        assert "shape" in repr(t)


class TestElementwiseOps:
    def test_add_values_and_grads(self):
        a = Tensor([1.0, 2.0], requires_grad=True)
        b = Tensor([10.0, 20.0], requires_grad=True)
        out = tensor_sum(a + b)
        backward(out)
        np.testing.assert_allclose(a.grad, [1.0, 1.0])
        np.testing.assert_allclose(b.grad, [1.0, 1.0])

    def test_mul_broadcast_unbroadcasts_grad(self):
        a = Tensor(np.ones((3, 4)), requires_grad=True)
        b = Tensor(2.0, requires_grad=True)
        out = tensor_sum(a * b)
        backward(out)
        assert a.grad.shape == (3, 4)
        assert b.grad.shape == ()
        np.testing.assert_allclose(b.grad, 12.0)

    def test_sub_and_neg(self):
        a = Tensor([3.0], requires_grad=True)
        b = Tensor([1.0], requires_grad=True)
        out = tensor_sum(a - b)
        backward(out)
        np.testing.assert_allclose(a.grad, [1.0])
        np.testing.assert_allclose(b.grad, [-1.0])
        n = -Tensor([2.0])
        np.testing.assert_allclose(n.data, [-2.0])

    def test_broadcast_row_vector(self, rng):
        a0 = rng.standard_normal((4, 5))
        b0 = rng.standard_normal((1, 5))
        a = Tensor(a0, requires_grad=True)
        b = Tensor(b0, requires_grad=True)
        backward(tensor_sum(a * b))
        np.testing.assert_allclose(b.grad, a0.sum(axis=0, keepdims=True))

    def test_leaky_relu_values(self):
        x = Tensor([-2.0, -0.5, 0.0, 0.5, 2.0])
        out = leaky_relu(x, alpha=0.1)
        np.testing.assert_allclose(out.data, [-0.2, -0.05, 0.0, 0.5, 2.0])

    def test_leaky_relu_grad(self):
        x = Tensor([-2.0, 3.0], requires_grad=True)
        backward(tensor_sum(leaky_relu(x, alpha=0.1)))
        np.testing.assert_allclose(x.grad, [0.1, 1.0])


class TestReductions:
    def test_mse_is_sum_of_squares(self):
        # [1,2] vs [0,0]: 1 + 4 = 5 under the sum convention
        out = mse(as_tensor([1.0, 2.0]), as_tensor([0.0, 0.0]))
        assert out.item() == 5.0

    def test_mse_shape_mismatch(self):
        with pytest.raises(TensorError, match="mismatch"):
            mse(as_tensor([1.0]), as_tensor([1.0, 2.0]))

    def test_mse_grads_both_sides(self, rng):
        a0 = rng.standard_normal((3, 4))
        b0 = rng.standard_normal((3, 4))
        a = Tensor(a0, requires_grad=True)
        b = Tensor(b0, requires_grad=True)
        backward(mse(a, b))
        np.testing.assert_allclose(a.grad, 2.0 * (a0 - b0))
        np.testing.assert_allclose(b.grad, -2.0 * (a0 - b0))

    def test_sum_grad_is_ones(self):
        x = Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
        backward(tensor_sum(x))
        np.testing.assert_allclose(x.grad, np.ones((2, 3)))


class TestAxisBlockMean:
    def test_hand_case(self):
        out = tensor.axis_block_mean(as_tensor([1.0, 2.0, 3.0, 4.0]), 0, 2)
        np.testing.assert_allclose(out.data, [1.5, 3.5])

    def test_factor_one_is_copy(self):
        x = as_tensor([1.0, 2.0])
        out = tensor.axis_block_mean(x, 0, 1)
        np.testing.assert_array_equal(out.data, x.data)

    def test_indivisible_extent_rejected(self):
        with pytest.raises(TensorError, match="not divisible"):
            tensor.axis_block_mean(as_tensor([1.0, 2.0, 3.0]), 0, 2)

    def test_grad_matches_fd(self, rng):
        x0 = rng.standard_normal((2, 6, 3))
        target = rng.standard_normal((2, 2, 3))

        def build(x):
            return mse(tensor.axis_block_mean(x, 1, 3), as_tensor(target))

        g, fd = grad_of(build, x0)
        assert rel_err(g, fd) < 1e-7


class TestShapeOps:
    def test_reshape_round_trip_grad(self, rng):
        x0 = rng.standard_normal((2, 3, 4))
        g, fd = grad_of(
            lambda x: tensor_sum(tensor.mul(tensor.reshape(x, (6, 4)),
                                            tensor.reshape(x, (6, 4)))),
            x0,
        )
        assert rel_err(g, fd) < 1e-7

    def test_slice_axis_values_and_grad(self):
        x = Tensor(np.arange(10.0), requires_grad=True)
        out = tensor.slice_axis(x, 0, 2, 5)
        np.testing.assert_allclose(out.data, [2.0, 3.0, 4.0])
        backward(tensor_sum(out))
        expect = np.zeros(10)
        expect[2:5] = 1.0
        np.testing.assert_allclose(x.grad, expect)

    def test_take_flat_spatial_gathers_rows(self, rng):
        x0 = rng.standard_normal((2, 2, 2, 3))
        x = Tensor(x0, requires_grad=True)
        out = tensor.take_flat_spatial(x, [0, 7])
        np.testing.assert_allclose(out.data[0], x0[0, 0, 0])
        np.testing.assert_allclose(out.data[1], x0[1, 1, 1])

    def test_take_flat_spatial_duplicate_indices_accumulate(self):
        x = Tensor(np.ones((2, 1, 1, 1)), requires_grad=True)
        out = tensor.take_flat_spatial(x, [0, 0, 1])
        backward(tensor_sum(out))
        np.testing.assert_allclose(x.grad.ravel(), [2.0, 1.0])

    def test_take_flat_spatial_grad_matches_fd(self, rng):
        x0 = rng.standard_normal((3, 2, 2, 4))
        idx = [11, 0, 5, 5]

        def build(x):
            taken = tensor.take_flat_spatial(x, idx)
            return mse(taken, as_tensor(np.zeros((4, 4))))

        g, fd = grad_of(build, x0)
        assert rel_err(g, fd) < 1e-7


class TestBackwardEngine:
    def test_requires_scalar(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        with pytest.raises(TensorError, match="scalar"):
            backward(x + x)

    def test_requires_tensor(self):
        with pytest.raises(TensorError):
            backward(np.float64(1.0))

    def test_diamond_graph_accumulates(self):
        # y = x*x used twice: d/dx sum(x*x + x*x) = 4x
        x = Tensor([3.0], requires_grad=True)
        y = x * x
        backward(tensor_sum(y + y))
        np.testing.assert_allclose(x.grad, [12.0])

    def test_grads_accumulate_across_calls(self):
        x = Tensor([1.0], requires_grad=True)
        backward(tensor_sum(x * x))
        backward(tensor_sum(x * x))
        np.testing.assert_allclose(x.grad, [4.0])
        x.zero_grad()
        assert x.grad is None

    def test_untouched_params_zero_filled(self):
        x = Tensor([1.0], requires_grad=True)
        unused = Tensor([5.0], requires_grad=True)
        backward(tensor_sum(x * x), params=[x, unused])
        np.testing.assert_allclose(unused.grad, [0.0])

    def test_no_grad_leaves_untracked(self):
        a = Tensor([1.0])
        b = Tensor([2.0])
        out = a + b
        assert not out.requires_grad
        assert out._backward is None

    def test_long_chain_survives(self):
        # deep graphs must not hit the recursion limit
        x = Tensor([1.0], requires_grad=True)
        y = x
        for _ in range(5000):
            y = y + x
        backward(tensor_sum(y))
        np.testing.assert_allclose(x.grad, [5001.0])

    def test_interior_grads_freed(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        mid = x * x
        backward(tensor_sum(mid))
        assert mid.grad is None
        assert x.grad is not None

    def test_fixed_accumulation_is_deterministic(self, rng):
        x0 = rng.standard_normal((64,))
        grads = []
        for _ in range(2):
            x = Tensor(x0.copy(), requires_grad=True)
            out = mse(leaky_relu(x * x), as_tensor(np.ones(64)))
            backward(out)
            grads.append(x.grad.copy())
        np.testing.assert_array_equal(grads[0], grads[1])


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_composite_graph_matches_fd(seed):
    rng = np.random.default_rng(seed)
    x0 = rng.standard_normal((4, 6))
    w0 = rng.standard_normal((4, 6))
    w = Tensor(w0, requires_grad=True)

    def build(x):
        h = leaky_relu(tensor.mul(x, w), alpha=0.1)
        h = tensor.reshape(h, (2, 12))
        h = tensor.axis_block_mean(h, 1, 3)
        return mse(h, as_tensor(np.ones((2, 4))))

    g, fd = grad_of(build, x0)
    assert rel_err(g, fd) < 1e-6
