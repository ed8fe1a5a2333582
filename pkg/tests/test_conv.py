"""Axis-restricted convolutions: oracle equivalence, adjointness, resizes."""

import numpy as np
import pytest

from neurotranscode.conv import (
    ConvKernel,
    conv,
    impulse_taps,
    linear_resize,
    transpose_conv,
    trilinear_resize,
)
from neurotranscode.tensor import Tensor, TensorError, as_tensor, backward, mse

from oracles import fd_gradient, naive_conv, naive_transpose_conv, rel_err

SPATIAL = (0, 1, 2)
TEMPORAL = (3,)


def spatial_kernel(rng, k, cin, cout, bias=False):
    taps = Tensor(rng.standard_normal((k, k, k, cin, cout)), requires_grad=True)
    b = Tensor(rng.standard_normal(cout), requires_grad=True) if bias else None
    return ConvKernel(taps, cin, cout, "spatial", bias=b)


def temporal_kernel(rng, k, cin, cout, bias=False):
    taps = Tensor(rng.standard_normal((k, cin, cout)), requires_grad=True)
    b = Tensor(rng.standard_normal(cout), requires_grad=True) if bias else None
    return ConvKernel(taps, cin, cout, "temporal", bias=b)


class TestKernelValidation:
    def test_even_extent_rejected(self):
        with pytest.raises(TensorError, match="odd"):
            ConvKernel(np.zeros((4, 1, 1)), 1, 1, "temporal")

    def test_wrong_rank_rejected(self):
        with pytest.raises(TensorError, match="convolved axes"):
            ConvKernel(np.zeros((3, 3, 1, 1)), 1, 1, "spatial")

    def test_channel_mismatch_rejected(self):
        with pytest.raises(TensorError, match="channel axes"):
            ConvKernel(np.zeros((3, 2, 5)), 5, 2, "temporal")

    def test_unknown_kind_rejected(self):
        with pytest.raises(TensorError, match="kernel kind"):
            ConvKernel(np.zeros((3, 1, 1)), 1, 1, "spacetime")

    def test_bias_must_be_vector(self):
        with pytest.raises(TensorError, match="bias"):
            ConvKernel(np.zeros((3, 1, 1)), 1, 1, "temporal",
                       bias=np.zeros((1, 1)))

    def test_parameters_lists_taps_and_bias(self, rng):
        k = temporal_kernel(rng, 3, 2, 2, bias=True)
        assert len(k.parameters()) == 2
        assert k.parameters()[0] is k.taps


class TestInputValidation:
    def test_input_must_be_5d(self, rng):
        k = temporal_kernel(rng, 3, 1, 1)
        with pytest.raises(TensorError, match="4 data axes"):
            conv(as_tensor(np.zeros((2, 2, 2, 4))), k)

    def test_axis_kind_must_match(self, rng):
        k = temporal_kernel(rng, 3, 1, 1)
        with pytest.raises(TensorError, match="does not match kernel kind"):
            conv(as_tensor(np.zeros((2, 2, 2, 4, 1))), k, axis_kind="spatial")

    def test_channel_count_checked_both_directions(self, rng):
        k = temporal_kernel(rng, 3, 2, 3)
        x = as_tensor(np.zeros((1, 1, 1, 4, 3)))
        with pytest.raises(TensorError, match="kernel expects 2"):
            conv(x, k)
        y = as_tensor(np.zeros((1, 1, 1, 4, 2)))
        with pytest.raises(TensorError, match="transposed kernel expects 3"):
            transpose_conv(y, k)

    def test_extent_not_divisible_by_stride(self, rng):
        k = temporal_kernel(rng, 3, 1, 1)
        with pytest.raises(TensorError, match="divisible"):
            conv(as_tensor(np.zeros((1, 1, 1, 5, 1))), k, stride=2)

    def test_stride_validation(self, rng):
        k = spatial_kernel(rng, 3, 1, 1)
        x = as_tensor(np.zeros((2, 2, 2, 1, 1)))
        with pytest.raises(TensorError, match="strides must be >= 1"):
            conv(x, k, stride=0)
        with pytest.raises(TensorError, match="need 3 strides"):
            conv(x, k, stride=(1, 2))


class TestOracleEquivalence:
    @pytest.mark.parametrize("k,stride", [(1, 1), (3, 1), (3, 2), (5, 1)])
    def test_spatial_conv_matches_naive(self, rng, k, stride):
        x = rng.standard_normal((4, 4, 4, 2, 2))
        kern = spatial_kernel(rng, k, 2, 3)
        got = conv(as_tensor(x), kern, stride=stride).data
        want = naive_conv(x, kern.taps.data, SPATIAL, (stride,) * 3)
        assert rel_err(got, want) < 1e-12

    @pytest.mark.parametrize("k,stride", [(1, 1), (3, 2), (5, 6), (9, 6)])
    def test_temporal_conv_matches_naive(self, rng, k, stride):
        x = rng.standard_normal((2, 3, 2, 12, 2))
        kern = temporal_kernel(rng, k, 2, 1)
        got = conv(as_tensor(x), kern, stride=stride).data
        want = naive_conv(x, kern.taps.data, TEMPORAL, (stride,))
        assert rel_err(got, want) < 1e-12

    @pytest.mark.parametrize("k,stride", [(3, 1), (3, 2), (5, 6)])
    def test_temporal_transpose_matches_naive(self, rng, k, stride):
        x = rng.standard_normal((2, 2, 2, 6, 2))
        kern = temporal_kernel(rng, k, 3, 2)
        got = transpose_conv(as_tensor(x), kern, stride=stride).data
        want = naive_transpose_conv(x, kern.taps.data, TEMPORAL, (stride,))
        assert got.shape[3] == 6 * stride
        assert rel_err(got, want) < 1e-12

    def test_spatial_transpose_matches_naive(self, rng):
        x = rng.standard_normal((3, 3, 3, 2, 2))
        kern = spatial_kernel(rng, 3, 1, 2)
        got = transpose_conv(as_tensor(x), kern, stride=2).data
        want = naive_transpose_conv(x, kern.taps.data, SPATIAL, (2, 2, 2))
        assert got.shape[:3] == (6, 6, 6)
        assert rel_err(got, want) < 1e-12

    def test_bias_is_added_per_channel(self, rng):
        x = rng.standard_normal((2, 2, 2, 4, 2))
        kern = temporal_kernel(rng, 3, 2, 3, bias=True)
        got = conv(as_tensor(x), kern).data
        want = naive_conv(x, kern.taps.data, TEMPORAL, (1,)) + kern.bias.data
        assert rel_err(got, want) < 1e-12


class TestAdjointIdentity:
    @pytest.mark.parametrize("stride", [1, 2, 6])
    def test_temporal_inner_product(self, rng, stride):
        kern = temporal_kernel(rng, 5, 2, 3)
        u = rng.standard_normal((2, 2, 2, 12, 2))
        v = rng.standard_normal((2, 2, 2, 12 // stride, 3))
        lhs = np.vdot(conv(as_tensor(u), kern, stride=stride).data, v)
        rhs = np.vdot(u, transpose_conv(as_tensor(v), kern, stride=stride).data)
        assert rel_err(lhs, rhs) < 1e-12

    @pytest.mark.parametrize("stride", [1, 2])
    def test_spatial_inner_product(self, rng, stride):
        kern = spatial_kernel(rng, 3, 2, 2)
        u = rng.standard_normal((4, 4, 4, 2, 2))
        v = rng.standard_normal((4 // stride,) * 3 + (2, 2))
        lhs = np.vdot(conv(as_tensor(u), kern, stride=stride).data, v)
        rhs = np.vdot(u, transpose_conv(as_tensor(v), kern, stride=stride).data)
        assert rel_err(lhs, rhs) < 1e-12


class TestImpulseTaps:
    def test_identity_for_equal_channels(self, rng):
        x = rng.standard_normal((3, 3, 3, 4, 2))
        kern = ConvKernel(impulse_taps((3, 3, 3), 2, 2), 2, 2, "spatial")
        np.testing.assert_allclose(conv(as_tensor(x), kern).data, x)

    def test_widen_then_narrow_is_identity(self, rng):
        x = rng.standard_normal((2, 2, 2, 8, 1))
        widen = ConvKernel(impulse_taps((5,), 1, 4), 1, 4, "temporal")
        narrow = ConvKernel(impulse_taps((5,), 4, 1), 4, 1, "temporal")
        y = conv(conv(as_tensor(x), widen), narrow).data
        np.testing.assert_allclose(y, x, atol=1e-15)

    def test_transpose_identity_at_stride_one(self, rng):
        x = rng.standard_normal((2, 2, 2, 6, 3))
        kern = ConvKernel(impulse_taps((3,), 3, 3), 3, 3, "temporal")
        np.testing.assert_allclose(transpose_conv(as_tensor(x), kern).data, x)


class TestAxisPurity:
    def test_temporal_conv_commutes_with_spatial_slicing(self, rng):
        x = rng.standard_normal((5, 4, 3, 10, 2))
        kern = temporal_kernel(rng, 5, 2, 2)
        full = conv(as_tensor(x), kern).data
        sub = conv(as_tensor(x[2:3, 1:2, 0:1]), kern).data
        np.testing.assert_allclose(sub, full[2:3, 1:2, 0:1], atol=1e-14)

    def test_spatial_conv_commutes_with_time_slicing(self, rng):
        x = rng.standard_normal((4, 4, 4, 6, 1))
        kern = spatial_kernel(rng, 3, 1, 2)
        full = conv(as_tensor(x), kern).data
        sub = conv(as_tensor(x[:, :, :, 2:4]), kern).data
        np.testing.assert_allclose(sub, full[:, :, :, 2:4], atol=1e-14)


class TestConvGradients:
    def _check(self, op, x0, kern, stride, target_shape, seed):
        rng = np.random.default_rng(seed)
        target = rng.standard_normal(target_shape)

        def loss_of_x(xa):
            return mse(op(as_tensor(xa), kern, stride=stride),
                       as_tensor(target)).item()

        x = Tensor(x0, requires_grad=True)
        out = mse(op(x, kern, stride=stride), as_tensor(target))
        backward(out, params=[x, *kern.parameters()])
        assert rel_err(x.grad, fd_gradient(loss_of_x, x0)) < 1e-5

        taps0 = kern.taps.data.copy()

        def loss_of_w(wa):
            kern.taps.data[...] = wa
            val = mse(op(as_tensor(x0), kern, stride=stride),
                      as_tensor(target)).item()
            kern.taps.data[...] = taps0
            return val

        assert rel_err(kern.taps.grad, fd_gradient(loss_of_w, taps0)) < 1e-5

        if kern.bias is not None:
            b0 = kern.bias.data.copy()

            def loss_of_b(ba):
                kern.bias.data[...] = ba
                val = mse(op(as_tensor(x0), kern, stride=stride),
                          as_tensor(target)).item()
                kern.bias.data[...] = b0
                return val

            assert rel_err(kern.bias.grad, fd_gradient(loss_of_b, b0)) < 1e-5

    @pytest.mark.parametrize("stride", [1, 2])
    def test_conv_grads(self, rng, stride):
        kern = temporal_kernel(rng, 3, 2, 3, bias=True)
        x0 = rng.standard_normal((2, 2, 2, 8, 2))
        out_t = 8 // stride
        self._check(conv, x0, kern, stride, (2, 2, 2, out_t, 3), seed=5)

    @pytest.mark.parametrize("stride", [1, 6])
    def test_transpose_conv_grads(self, rng, stride):
        # transposed direction produces in_channels, so bias is sized to it
        taps = Tensor(rng.standard_normal((5, 2, 3)), requires_grad=True)
        b = Tensor(rng.standard_normal(2), requires_grad=True)
        kern = ConvKernel(taps, 2, 3, "temporal", bias=b)
        x0 = rng.standard_normal((2, 2, 2, 4, 3))
        self._check(transpose_conv, x0, kern, stride, (2, 2, 2, 4 * stride, 2),
                    seed=6)

    def test_spatial_conv_grads(self, rng):
        kern = spatial_kernel(rng, 3, 1, 2, bias=True)
        x0 = rng.standard_normal((3, 3, 3, 2, 1))
        self._check(conv, x0, kern, 1, (3, 3, 3, 2, 2), seed=7)


class TestLinearResize:
    def test_hand_values_upsample(self):
        x = as_tensor(np.array([0.0, 6.0]).reshape(1, 1, 1, 1, 2))
        out = linear_resize(x, 4, 4)
        np.testing.assert_allclose(out.data.ravel(), [0.0, 2.0, 4.0, 6.0])

    def test_hand_values_downsample(self):
        x = as_tensor(np.array([0.0, 1.0, 2.0, 3.0, 4.0]).reshape(1, 1, 1, 1, 5))
        out = linear_resize(x, 4, 3)
        np.testing.assert_allclose(out.data.ravel(), [0.0, 2.0, 4.0])

    def test_same_extent_is_copy(self, rng):
        x0 = rng.standard_normal((2, 3, 2))
        out = linear_resize(as_tensor(x0), 1, 3)
        np.testing.assert_array_equal(out.data, x0)

    def test_single_point_source_broadcasts(self):
        x = as_tensor(np.array([5.0]).reshape(1, 1))
        out = linear_resize(x, 1, 4)
        np.testing.assert_allclose(out.data.ravel(), [5.0] * 4)

    def test_target_extent_validated(self):
        with pytest.raises(TensorError, match=">= 1"):
            linear_resize(as_tensor(np.zeros((2, 2))), 0, 0)

    def test_endpoints_preserved(self, rng):
        x0 = rng.standard_normal(7)
        out = linear_resize(as_tensor(x0), 0, 13)
        assert out.data[0] == pytest.approx(x0[0])
        assert out.data[-1] == pytest.approx(x0[-1])

    def test_grad_matches_fd(self, rng):
        x0 = rng.standard_normal((3, 5))
        target = rng.standard_normal((3, 8))

        def loss_of(xa):
            return mse(linear_resize(as_tensor(xa), 1, 8),
                       as_tensor(target)).item()

        x = Tensor(x0, requires_grad=True)
        backward(mse(linear_resize(x, 1, 8), as_tensor(target)))
        assert rel_err(x.grad, fd_gradient(loss_of, x0)) < 1e-5


class TestTrilinearResize:
    def test_separable_composition(self, rng):
        x0 = rng.standard_normal((4, 5, 3, 2, 1))
        got = trilinear_resize(as_tensor(x0), (8, 9, 5)).data
        step = as_tensor(x0)
        for axis, extent in zip(SPATIAL, (8, 9, 5)):
            step = linear_resize(step, axis, extent)
        np.testing.assert_allclose(got, step.data, atol=1e-14)

    def test_identity_when_extents_match(self, rng):
        x0 = rng.standard_normal((3, 4, 5, 2, 1))
        out = trilinear_resize(as_tensor(x0), (3, 4, 5))
        np.testing.assert_array_equal(out.data, x0)

    def test_round_trip_preserves_linear_field(self):
        # a trilinear field is represented exactly at any resolution
        gx, gy, gz = np.meshgrid(np.linspace(0, 1, 4), np.linspace(0, 1, 5),
                                 np.linspace(0, 1, 3), indexing="ij")
        field = (2.0 * gx - gy + 0.5 * gz)[..., None, None]
        up = trilinear_resize(as_tensor(field), (7, 9, 5)).data
        back = trilinear_resize(as_tensor(up), (4, 5, 3)).data
        np.testing.assert_allclose(back, field, atol=1e-12)

    def test_grad_matches_fd(self, rng):
        x0 = rng.standard_normal((3, 3, 2, 2, 1))
        target = rng.standard_normal((5, 4, 3, 2, 1))

        def loss_of(xa):
            return mse(trilinear_resize(as_tensor(xa), (5, 4, 3)),
                       as_tensor(target)).item()

        x = Tensor(x0, requires_grad=True)
        backward(mse(trilinear_resize(x, (5, 4, 3)), as_tensor(target)))
        assert rel_err(x.grad, fd_gradient(loss_of, x0)) < 1e-5
