import numpy as np
import pytest

from morphflow.diffops import (
    ConvKernel,
    concat_channels,
    concat_channels_backward,
    conv_backward,
    conv_forward,
    finite_diff_check,
    leaky_relu_backward,
    leaky_relu_forward,
    upsample_nearest,
    upsample_nearest_backward,
)

SHAPES = [(16,), (8, 8), (4, 4, 4)]
CHANNELS = [1, 2, 4]


def kernel(rng, c_out, c_in, rank, k=3):
    return ConvKernel(rng.standard_normal((c_out, c_in) + (k,) * rank), rng.standard_normal(c_out))


def conv_op(k, stride):
    def fwd(x, w, b):
        return conv_forward(x, ConvKernel(w, b), stride)

    def vjp(x, w, b, g):
        return conv_backward(x, ConvKernel(w, b), stride, g)

    return fwd, vjp


class TestConvExamples:
    x = np.array([[1.0, 2, 3, 4]])
    k = ConvKernel(np.ones((1, 1, 3)), np.zeros(1))

    def test_unit_kernel_is_identity(self, rng):
        x = rng.standard_normal((1, 5, 6))
        k = ConvKernel(np.ones((1, 1, 1, 1)), np.zeros(1))
        np.testing.assert_array_equal(conv_forward(x, k), x)

    def test_box_stride1(self):
        np.testing.assert_array_equal(conv_forward(self.x, self.k), [[3, 6, 9, 7]])

    def test_box_stride2(self):
        np.testing.assert_array_equal(conv_forward(self.x, self.k, 2), [[3, 9]])

    def test_odd_dims_stride2(self, rng):
        y = conv_forward(rng.standard_normal((2, 7, 5)), kernel(rng, 3, 2, 2), 2)
        assert y.shape == (3, 4, 3)

    def test_bias_grad_counts_outputs(self, rng):
        x = rng.standard_normal((2, 6, 5))
        k = ConvKernel(rng.standard_normal((3, 2, 1, 1)), np.zeros(3))
        _, _, gb = conv_backward(x, k, 1, np.ones((3, 6, 5)))
        np.testing.assert_array_equal(gb, [30, 30, 30])

    def test_weight_grad_one_hot(self):
        up = np.array([[0.0, 1.0, 0.0, 0.0]])
        _, gw, _ = conv_backward(self.x, self.k, 1, up)
        np.testing.assert_array_equal(gw[0, 0], [1, 2, 3])

    def test_channel_mismatch(self, rng):
        with pytest.raises(ValueError, match="channel mismatch"):
            conv_forward(np.zeros((3, 4, 4)), kernel(rng, 1, 2, 2))

    def test_too_small(self):
        with pytest.raises(ValueError, match="too small"):
            conv_forward(np.zeros((1, 0)), ConvKernel(np.ones((1, 1, 5)), np.zeros(1)))

    def test_upstream_mismatch(self):
        with pytest.raises(ValueError):
            conv_backward(self.x, self.k, 1, np.zeros((1, 3)))

    def test_random_3d_fd(self, rng):
        x = rng.standard_normal((2, 8, 8, 8))
        k = kernel(rng, 2, 2, 3)
        fwd, vjp = conv_op(k, 1)
        report = finite_diff_check(fwd, vjp, [x, k.weight, k.bias])
        assert report.max_error < 1e-5

    def test_deterministic(self, rng):
        x = rng.standard_normal((2, 8, 8))
        k = kernel(rng, 3, 2, 2)
        assert np.array_equal(conv_forward(x, k, 2), conv_forward(x, k, 2))

    def test_does_not_mutate(self, rng):
        x = rng.standard_normal((2, 6, 6))
        k = kernel(rng, 2, 2, 2)
        x0, w0 = x.copy(), k.weight.copy()
        conv_backward(x, k, 2, np.ones((2, 3, 3)))
        assert np.array_equal(x, x0) and np.array_equal(k.weight, w0)


class TestLeakyRelu:
    def test_forward(self):
        np.testing.assert_allclose(leaky_relu_forward(np.array([-2.0, 0, 3]), 0.2), [-0.4, 0, 3])

    def test_backward(self):
        np.testing.assert_allclose(leaky_relu_backward(np.array([-2.0, 0, 3]), 0.2, np.ones(3)), [0.2, 1, 1])

    def test_fd_away_from_kink(self, rng):
        x = rng.standard_normal(50)
        x = np.where(np.abs(x) < 0.05, 0.5, x)
        report = finite_diff_check(
            lambda a: leaky_relu_forward(a, 0.2),
            lambda a, g: [leaky_relu_backward(a, 0.2, g)],
            [x],
            tolerance=1e-7,
        )
        assert report.passed, report.errors


class TestUpsample:
    def test_forward(self):
        np.testing.assert_array_equal(upsample_nearest(np.array([[1.0, 5.0]])), [[1, 1, 5, 5]])

    def test_backward(self):
        np.testing.assert_array_equal(upsample_nearest_backward(np.array([[1.0, 2, 3, 4]])), [[3, 7]])

    def test_backward_odd_rejected(self):
        with pytest.raises(ValueError):
            upsample_nearest_backward(np.zeros((1, 3)))

    @pytest.mark.parametrize("shape", SHAPES)
    def test_stride2_then_upsample_restores_shape(self, rng, shape):
        x = rng.standard_normal((2,) + shape)
        y = upsample_nearest(conv_forward(x, kernel(rng, 3, 2, len(shape)), 2))
        assert y.shape[1:] == shape


class TestConcat:
    def test_order(self):
        out = concat_channels(np.zeros((1, 3)), np.ones((1, 3)))
        assert out.shape == (2, 3) and not out[0].any() and out[1].all()

    def test_round_trip(self, rng):
        a = rng.standard_normal((2, 4, 4))
        b = rng.standard_normal((3, 4, 4))
        ga, gb = concat_channels_backward(concat_channels(a, b), 2)
        assert np.array_equal(ga, a) and np.array_equal(gb, b)

    def test_spatial_mismatch(self):
        with pytest.raises(ValueError, match="spatial mismatch"):
            concat_channels(np.zeros((1, 3)), np.zeros((1, 4)))


class TestFiniteDiffCheck:
    def test_linear_op_machine_precision(self, rng):
        x = rng.standard_normal((3, 5, 5))
        k = ConvKernel(rng.standard_normal((2, 3, 1, 1)), rng.standard_normal(2))
        fwd, vjp = conv_op(k, 1)
        report = finite_diff_check(fwd, vjp, [x, k.weight, k.bias])
        assert report.max_error < 1e-8

    def test_reports_wrong_gradient(self, rng):
        x = rng.standard_normal(10)
        report = finite_diff_check(lambda a: a ** 2, lambda a, g: [g * a], [x])
        assert not report.passed


# Shared invariant: every primitive's vjp against central differences,
# float64, step 1e-5, tolerance 1e-4, over 20 seeds, three ranks, three widths.
@pytest.mark.parametrize("seed", range(20))
@pytest.mark.parametrize("shape", SHAPES, ids=["1d", "2d", "3d"])
@pytest.mark.parametrize("channels", CHANNELS)
def test_primitives_gradient_invariant(seed, shape, channels):
    r = np.random.default_rng([seed, channels, len(shape)])
    rank = len(shape)
    x = r.standard_normal((channels,) + shape)
    check = dict(step=1e-5, tolerance=1e-4, seed=seed)

    for stride in (1, 2):
        k = kernel(r, 2, channels, rank)
        fwd, vjp = conv_op(k, stride)
        report = finite_diff_check(fwd, vjp, [x, k.weight, k.bias], **check)
        assert report.passed, ("conv", stride, report.errors)

    xr = np.where(np.abs(x) < 1e-3, 0.5, x)
    report = finite_diff_check(
        lambda a: leaky_relu_forward(a, 0.2), lambda a, g: [leaky_relu_backward(a, 0.2, g)], [xr], **check
    )
    assert report.passed, ("leaky_relu", report.errors)

    report = finite_diff_check(upsample_nearest, lambda a, g: [upsample_nearest_backward(g)], [x], **check)
    assert report.passed, ("upsample", report.errors)

    other = r.standard_normal((1,) + shape)
    report = finite_diff_check(
        concat_channels, lambda a, b, g: concat_channels_backward(g, channels), [x, other], **check
    )
    assert report.passed, ("concat", report.errors)
