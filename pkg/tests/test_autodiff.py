import numpy as np
import pytest

from dereverb import autodiff as ad
from dereverb.autodiff import ConfigError, GraphError, ShapeError, Tensor

from oracles import (
    dilate_kernel_rows,
    naive_conv1d,
    naive_depthwise_conv1d,
    naive_transposed_conv1d,
)

GRAD_TOL = 1e-4


def _fd_check(loss_from_leaves, arrays, tol=GRAD_TOL):
    """Backward vs central finite differences over every entry of every input."""
    leaves = [Tensor(a, requires_grad=True) for a in arrays]  # shares memory with arrays
    ad.backward(loss_from_leaves(leaves))

    def value():
        return float(loss_from_leaves([Tensor(a) for a in arrays]).data)

    for leaf, arr in zip(leaves, arrays):
        assert leaf.grad is not None
        numeric = ad.numerical_gradient(value, arr)
        assert ad.max_relative_error(leaf.grad, numeric) < tol


def _weighted_sum(out, seed=0):
    w = np.random.default_rng(seed + 4242).standard_normal(out.shape)
    return (out * Tensor(w)).sum()


class TestConv1d:
    def test_scaling_identity(self):
        out = ad.conv1d(Tensor([[1.0, 2, 3, 4, 5]]), Tensor(np.array([[[2.0]]])), stride=1)
        np.testing.assert_array_equal(out.data, [[2.0, 4, 6, 8, 10]])

    def test_stride_two_example(self):
        out = ad.conv1d(Tensor([[1.0, 0, 0, 0]]), Tensor(np.array([[[1.0, 1.0]]])), stride=2)
        np.testing.assert_array_equal(out.data, [[1.0, 0.0]])

    def test_kernel_longer_than_input(self):
        with pytest.raises(ShapeError):
            ad.conv1d(Tensor(np.ones((1, 8))), Tensor(np.ones((1, 1, 16))), stride=1)

    def test_channel_mismatch(self):
        with pytest.raises(ShapeError, match="channels"):
            ad.conv1d(Tensor(np.ones((2, 8))), Tensor(np.ones((1, 3, 2))))

    @pytest.mark.parametrize("stride,padding", [(1, 0), (2, 0), (1, 2), (3, 1)])
    def test_matches_naive_oracle(self, rng, stride, padding):
        x = rng.standard_normal((3, 11))
        k = rng.standard_normal((2, 3, 3))
        out = ad.conv1d(Tensor(x), Tensor(k), stride=stride, padding=padding)
        np.testing.assert_allclose(out.data, naive_conv1d(x, k, stride, padding), atol=1e-12)

    def test_output_length(self, rng):
        out = ad.conv1d(Tensor(rng.standard_normal((1, 32))), Tensor(rng.standard_normal((4, 1, 16))), stride=8)
        assert out.shape == (4, 3)


class TestDepthwiseConv1d:
    def test_dilated_hand_case(self):
        out = ad.depthwise_conv1d(Tensor([[1.0, 2, 3, 4, 5, 6]]), Tensor([[1.0, 0, -1]]), dilation=2)
        np.testing.assert_array_equal(out.data, [[-3.0, -4, -4, -4, 3, 4]])

    def test_identity_kernel(self, rng):
        x = rng.standard_normal((3, 9))
        for dilation in (1, 2, 4):
            out = ad.depthwise_conv1d(Tensor(x), Tensor(np.tile([0.0, 1.0, 0.0], (3, 1))), dilation)
            np.testing.assert_array_equal(out.data, x)

    def test_rows_match_per_channel_oracle(self, rng):
        x = rng.standard_normal((2, 12))
        k = rng.standard_normal((2, 3))
        out = ad.depthwise_conv1d(Tensor(x), Tensor(k), dilation=3)
        for g in range(2):
            row = naive_depthwise_conv1d(x[g : g + 1], k[g : g + 1], dilation=3)
            np.testing.assert_allclose(out.data[g : g + 1], row, atol=1e-12)

    def test_even_kernel_rejected(self):
        with pytest.raises(ConfigError, match="odd"):
            ad.depthwise_conv1d(Tensor(np.ones((1, 6))), Tensor(np.ones((1, 4))))

    @pytest.mark.parametrize("g_ch,length,dilation", [(1, 8, 1), (2, 16, 2), (4, 32, 4), (3, 20, 8)])
    def test_equals_blockdiag_conv1d(self, rng, g_ch, length, dilation):
        # dilation expressed as a zero-stuffed kernel fed to plain conv1d
        x = rng.standard_normal((g_ch, length))
        k = rng.standard_normal((g_ch, 3))
        stuffed = dilate_kernel_rows(k, dilation)
        block = np.zeros((g_ch, g_ch, stuffed.shape[1]))
        for g in range(g_ch):
            block[g, g] = stuffed[g]
        pad = (3 - 1) * dilation // 2
        via_conv = ad.conv1d(Tensor(x), Tensor(block), stride=1, padding=pad)
        direct = ad.depthwise_conv1d(Tensor(x), Tensor(k), dilation)
        np.testing.assert_allclose(direct.data, via_conv.data, atol=1e-12)


class TestPointwiseConv1d:
    def test_identity_kernel(self, rng):
        x = rng.standard_normal((4, 6))
        out = ad.pointwise_conv1d(Tensor(x), Tensor(np.eye(4)))
        np.testing.assert_array_equal(out.data, x)

    def test_channel_sum(self):
        x = np.array([[1.0, 2, 3], [10.0, 20, 30]])
        out = ad.pointwise_conv1d(Tensor(x), Tensor([[1.0], [1.0]]))
        np.testing.assert_array_equal(out.data, [[11.0, 22, 33]])

    def test_matches_matmul_oracle(self, rng):
        x = rng.standard_normal((3, 5))
        k = rng.standard_normal((3, 4))
        out = ad.pointwise_conv1d(Tensor(x), Tensor(k))
        np.testing.assert_allclose(out.data, k.T @ x, atol=1e-12)

    def test_channel_mismatch(self):
        with pytest.raises(ShapeError, match="channels"):
            ad.pointwise_conv1d(Tensor(np.ones((3, 5))), Tensor(np.ones((2, 4))))


class TestTransposedConv1d:
    def test_single_frame_is_kernel(self, rng):
        k = rng.standard_normal((1, 6))
        out = ad.transposed_conv1d(Tensor([[1.0]]), Tensor(k), stride=3)
        np.testing.assert_array_equal(out.data, k)

    def test_two_frame_overlap_add(self):
        out = ad.transposed_conv1d(Tensor([[1.0, 1.0]]), Tensor([[1.0, 1, 1, 1]]), stride=2)
        np.testing.assert_array_equal(out.data, [[1.0, 1, 2, 2, 1, 1]])

    def test_matches_naive_oracle(self, rng):
        x = rng.standard_normal((3, 5))
        k = rng.standard_normal((3, 8))
        out = ad.transposed_conv1d(Tensor(x), Tensor(k), stride=4)
        np.testing.assert_allclose(out.data, naive_transposed_conv1d(x, k, 4), atol=1e-12)

    def test_stride_must_divide_kernel(self):
        with pytest.raises(ConfigError, match="divide"):
            ad.transposed_conv1d(Tensor(np.ones((1, 4))), Tensor(np.ones((1, 6))), stride=4)

    @pytest.mark.parametrize("seed", range(10))
    def test_adjoint_of_conv1d(self, seed):
        # <conv(x), y> == <x, conv_T(y)> for matching geometry
        rng = np.random.default_rng(seed)
        stride, ksize, l_x = 4, 8, 6
        length = (l_x - 1) * stride + ksize
        x = rng.standard_normal((1, length))
        k = rng.standard_normal((5, ksize))
        y = rng.standard_normal((5, l_x))
        fwd = ad.conv1d(Tensor(x), Tensor(k[:, None, :]), stride=stride)
        back = ad.transposed_conv1d(Tensor(y), Tensor(k), stride=stride)
        lhs = float((fwd.data * y).sum())
        rhs = float((x * back.data).sum())
        assert abs(lhs - rhs) < 1e-10


class TestActivations:
    def test_relu(self):
        out = ad.relu(Tensor([-1.0, 0.0, 2.0]))
        np.testing.assert_array_equal(out.data, [0.0, 0.0, 2.0])

    def test_prelu(self):
        out = ad.prelu(Tensor([-2.0, 3.0]), Tensor([0.25]))
        np.testing.assert_array_equal(out.data, [-0.5, 3.0])

    def test_prelu_unit_slope_is_identity(self, rng):
        x = rng.standard_normal(7)
        out = ad.prelu(Tensor(x), Tensor([1.0]))
        np.testing.assert_array_equal(out.data, x)

    def test_softmax_symmetry(self):
        np.testing.assert_allclose(ad.softmax(Tensor([0.0, 0.0])).data, [0.5, 0.5], atol=1e-15)
        np.testing.assert_allclose(ad.softmax(Tensor([3.0, 3.0, 3.0])).data, np.full(3, 1 / 3), atol=1e-15)

    def test_softmax_no_overflow(self):
        out = ad.softmax(Tensor([1000.0, 0.0])).data
        assert np.all(np.isfinite(out))
        np.testing.assert_allclose(out, [1.0, 0.0], atol=1e-300)

    @pytest.mark.parametrize("seed", range(10))
    def test_softmax_sum_and_shift_invariance(self, seed):
        rng = np.random.default_rng(seed)
        x = rng.standard_normal(6) * 3
        y = ad.softmax(Tensor(x)).data
        assert abs(y.sum() - 1.0) < 1e-12
        shifted = ad.softmax(Tensor(x + 17.25)).data
        np.testing.assert_allclose(y, shifted, atol=1e-12)


class TestGlobalLayerNorm:
    def test_constant_input_gives_zeros(self):
        out = ad.global_layer_norm(Tensor(np.full((3, 5), 4.2)), Tensor(np.ones(3)), Tensor(np.zeros(3)))
        np.testing.assert_allclose(out.data, 0.0, atol=1e-9)

    def test_normalised_statistics(self, rng):
        x = rng.standard_normal((4, 50)) * 3 + 1
        out = ad.global_layer_norm(Tensor(x), Tensor(np.ones(4)), Tensor(np.zeros(4))).data
        assert abs(out.mean()) < 1e-6
        assert abs(out.var() - 1.0) < 1e-6

    def test_zero_gain_gives_bias(self, rng):
        x = rng.standard_normal((3, 6))
        b = np.array([1.0, -2.0, 0.5])
        out = ad.global_layer_norm(Tensor(x), Tensor(np.zeros(3)), Tensor(b)).data
        np.testing.assert_array_equal(out, np.tile(b[:, None], (1, 6)))


class TestGlobalAvgPool:
    def test_constant(self):
        out = ad.global_avg_pool(Tensor(np.full((3, 7), 2.5)))
        np.testing.assert_array_equal(out.data, [2.5, 2.5, 2.5])

    def test_two_sample_row(self):
        assert ad.global_avg_pool(Tensor([[1.0, 3.0]])).data[0] == 2.0

    def test_matches_mean_oracle(self, rng):
        x = rng.standard_normal((5, 9))
        np.testing.assert_allclose(ad.global_avg_pool(Tensor(x)).data, x.mean(axis=1), atol=1e-15)


class TestLinear:
    def test_identity(self, rng):
        x = rng.standard_normal(4)
        out = ad.linear(Tensor(x), Tensor(np.eye(4)), Tensor(np.zeros(4)))
        np.testing.assert_array_equal(out.data, x)

    def test_zero_weight_gives_bias(self, rng):
        b = rng.standard_normal(3)
        out = ad.linear(Tensor(rng.standard_normal(5)), Tensor(np.zeros((3, 5))), Tensor(b))
        np.testing.assert_array_equal(out.data, b)

    def test_matches_matmul_oracle(self, rng):
        x, w, b = rng.standard_normal(5), rng.standard_normal((3, 5)), rng.standard_normal(3)
        out = ad.linear(Tensor(x), Tensor(w), Tensor(b))
        np.testing.assert_allclose(out.data, w @ x + b, atol=1e-12)


class TestBackward:
    def test_linear_loss_gradient_is_input(self, rng):
        x = rng.standard_normal(6)
        w = Tensor(rng.standard_normal(6), requires_grad=True)
        ad.backward((w * Tensor(x)).sum())
        np.testing.assert_allclose(w.grad, x, atol=1e-15)

    def test_fanout_doubles_gradient(self, rng):
        x = rng.standard_normal(4)
        w1 = Tensor(x.copy(), requires_grad=True)
        ad.backward((w1 * 3.0).sum())
        w2 = Tensor(x.copy(), requires_grad=True)
        y = w2 * 3.0
        ad.backward(y.sum() + y.sum())
        np.testing.assert_allclose(w2.grad, 2.0 * w1.grad, atol=1e-15)

    def test_non_scalar_loss_rejected(self):
        t = Tensor(np.ones(3), requires_grad=True)
        with pytest.raises(GraphError, match="scalar"):
            ad.backward(t * 2.0)

    def test_grads_accumulate_across_calls(self, rng):
        w = Tensor(rng.standard_normal(3), requires_grad=True)
        ad.backward((w * 2.0).sum())
        first = w.grad.copy()
        ad.backward((w * 2.0).sum())
        np.testing.assert_allclose(w.grad, 2.0 * first, atol=1e-15)


class TestGradients:
    """Central finite differences vs analytic gradients for every op."""

    @pytest.mark.parametrize("seed", range(10))
    def test_conv1d(self, seed):
        rng = np.random.default_rng(seed)
        x = rng.standard_normal((2, 9))
        k = rng.standard_normal((3, 2, 3))
        _fd_check(lambda ls: _weighted_sum(ad.conv1d(ls[0], ls[1], stride=2, padding=1), seed), [x, k])

    @pytest.mark.parametrize("seed", range(10))
    def test_depthwise_conv1d(self, seed):
        rng = np.random.default_rng(seed)
        x = rng.standard_normal((3, 10))
        k = rng.standard_normal((3, 3))
        dilation = [1, 2, 3][seed % 3]
        _fd_check(lambda ls: _weighted_sum(ad.depthwise_conv1d(ls[0], ls[1], dilation), seed), [x, k])

    @pytest.mark.parametrize("seed", range(10))
    def test_pointwise_conv1d(self, seed):
        rng = np.random.default_rng(seed)
        x = rng.standard_normal((3, 6))
        k = rng.standard_normal((3, 4))
        _fd_check(lambda ls: _weighted_sum(ad.pointwise_conv1d(ls[0], ls[1]), seed), [x, k])

    @pytest.mark.parametrize("seed", range(10))
    def test_transposed_conv1d(self, seed):
        rng = np.random.default_rng(seed)
        x = rng.standard_normal((2, 5))
        k = rng.standard_normal((2, 6))
        _fd_check(lambda ls: _weighted_sum(ad.transposed_conv1d(ls[0], ls[1], stride=3), seed), [x, k])

    @pytest.mark.parametrize("seed", range(10))
    def test_relu_prelu(self, seed):
        rng = np.random.default_rng(seed)
        x = rng.standard_normal(8) + 0.05  # keep entries away from the kink
        slope = np.array([0.3])
        _fd_check(lambda ls: _weighted_sum(ad.relu(ls[0]), seed), [x.copy()])
        _fd_check(lambda ls: _weighted_sum(ad.prelu(ls[0], ls[1]), seed), [x.copy(), slope])

    @pytest.mark.parametrize("seed", range(10))
    def test_softmax(self, seed):
        rng = np.random.default_rng(seed)
        x = rng.standard_normal(5)
        _fd_check(lambda ls: _weighted_sum(ad.softmax(ls[0]), seed), [x])

    @pytest.mark.parametrize("seed", range(10))
    def test_global_layer_norm(self, seed):
        rng = np.random.default_rng(seed)
        x = rng.standard_normal((3, 7))
        gain = rng.standard_normal(3)
        bias = rng.standard_normal(3)
        _fd_check(
            lambda ls: _weighted_sum(ad.global_layer_norm(ls[0], ls[1], ls[2]), seed),
            [x, gain, bias],
        )

    @pytest.mark.parametrize("seed", range(10))
    def test_global_avg_pool(self, seed):
        rng = np.random.default_rng(seed)
        _fd_check(lambda ls: _weighted_sum(ad.global_avg_pool(ls[0]), seed), [rng.standard_normal((4, 6))])

    @pytest.mark.parametrize("seed", range(10))
    def test_linear(self, seed):
        rng = np.random.default_rng(seed)
        x, w, b = rng.standard_normal(5), rng.standard_normal((3, 5)), rng.standard_normal(3)
        _fd_check(lambda ls: _weighted_sum(ad.linear(ls[0], ls[1], ls[2]), seed), [x, w, b])

    @pytest.mark.parametrize("seed", range(10))
    def test_elementwise_composite(self, seed):
        # add, sub, mul, div, pow, log, exp, sum, mean, reshape, transpose, slice
        rng = np.random.default_rng(seed)
        a = rng.standard_normal((3, 4)) + 3.0  # positive for log/sqrt
        b = rng.standard_normal((3, 4)) + 3.0

        def build(ls):
            ta, tb = ls
            y = (ta * tb - ta / tb + 2.0) ** 2.0
            z = ad.log(ta) + ad.exp(tb * 0.1) + (ta + tb) ** 0.5
            w = z.transpose().reshape((12,))[2:9]
            return y.mean() + w.sum() + y[1, 1:3].sum()

        _fd_check(build, [a, b])


class TestDeterminismAndChecks:
    def test_ops_bit_identical_across_runs(self, rng):
        x = rng.standard_normal((3, 20))
        k = rng.standard_normal((3, 3))
        a = ad.depthwise_conv1d(Tensor(x), Tensor(k), dilation=2).data
        b = ad.depthwise_conv1d(Tensor(x), Tensor(k), dilation=2).data
        assert np.array_equal(a, b)

    def test_debug_checks_catch_nonfinite(self):
        ad.set_debug_checks(True)
        try:
            with np.errstate(over="ignore"), pytest.raises(FloatingPointError):
                ad.exp(Tensor([1000.0]))
        finally:
            ad.set_debug_checks(False)

    def test_release_mode_propagates(self):
        with np.errstate(over="ignore"):
            out = ad.exp(Tensor([1000.0]))
        assert np.isinf(out.data[0])
