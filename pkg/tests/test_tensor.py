"""Tests for tensor module."""

import numpy as np
import pytest

from mbfcn_cli.errors import ConfigError, NumericError, StateError
from mbfcn_cli.gradcheck import check_operation
from mbfcn_cli.tensor import (
    Tape,
    Tensor,
    bilinear_filler,
    bilinear_upsample,
    concat_channels,
    conv2d,
    filler_tensor,
    max_pool2d,
    reduce_sum,
    relu,
    sgd_step,
    softmax_pair,
)


def naive_conv(x, w, b, stride, pad, dilation):
    n, c_in, h, wd = x.shape
    c_out, _, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    out_h = (h + 2 * pad - dilation * (kh - 1) - 1) // stride + 1
    out_w = (wd + 2 * pad - dilation * (kw - 1) - 1) // stride + 1
    out = np.zeros((n, c_out, out_h, out_w))
    for o in range(c_out):
        for y in range(out_h):
            for x_ in range(out_w):
                total = b[0, o, 0, 0]
                for c in range(c_in):
                    for i in range(kh):
                        for j in range(kw):
                            total += w[o, c, i, j] * xp[0, c, y * stride + i * dilation, x_ * stride + j * dilation]
                out[0, o, y, x_] = total
    return out


def naive_pool(x, k, stride):
    n, c, h, w = x.shape
    out_h, out_w = (h - k) // stride + 1, (w - k) // stride + 1
    out = np.zeros((n, c, out_h, out_w))
    for ch in range(c):
        for y in range(out_h):
            for x_ in range(out_w):
                out[0, ch, y, x_] = x[0, ch, y * stride:y * stride + k, x_ * stride:x_ * stride + k].max()
    return out


class TestTensor:
    """Tests for the Tensor container."""

    def test_requires_4d(self):
        """Non 4-D data is rejected with the shape in the message."""
        with pytest.raises(ConfigError, match="4-D"):
            Tensor(np.zeros((2, 2)))

    def test_integer_data_becomes_float32(self):
        """Integer arrays are stored as real32."""
        assert Tensor(np.ones((1, 1, 2, 2), dtype=np.int64)).dtype == np.float32

    def test_fixed_never_requires_grad(self):
        """Fixed tensors cannot be marked trainable."""
        assert not Tensor(np.zeros((1, 1, 1, 1)), requires_grad=True, fixed=True).requires_grad


class TestConv2d:
    """Tests for conv2d."""

    @pytest.mark.parametrize("stride,pad,dilation", [(1, 0, 1), (2, 1, 1), (1, 2, 2), (2, 0, 2)])
    def test_matches_nested_loops(self, stride, pad, dilation):
        """Output equals a nested-loop cross-correlation."""
        rng = np.random.default_rng(stride * 10 + pad + dilation)
        x = rng.normal(size=(1, 2, 7, 6))
        w = rng.normal(size=(3, 2, 3, 3))
        b = rng.normal(size=(1, 3, 1, 1))
        out = conv2d(Tensor(x), Tensor(w), Tensor(b), stride=stride, pad=pad, dilation=dilation)
        np.testing.assert_allclose(out.data, naive_conv(x, w, b, stride, pad, dilation), atol=1e-10)

    def test_output_size(self):
        """h' = floor((h + 2 pad - dilation (k - 1) - 1) / stride) + 1."""
        out = conv2d(Tensor(np.zeros((1, 1, 10, 9))), Tensor(np.zeros((1, 1, 3, 3))), stride=2, pad=1)
        assert out.shape == (1, 1, 5, 5)

    def test_channel_mismatch(self):
        """Inconsistent input channels raise ConfigError naming both shapes."""
        with pytest.raises(ConfigError, match="channels"):
            conv2d(Tensor(np.zeros((1, 2, 4, 4))), Tensor(np.zeros((1, 3, 3, 3))))

    def test_non_finite_weight(self):
        """A NaN weight raises NumericError."""
        w = np.zeros((1, 1, 1, 1))
        w[0, 0, 0, 0] = np.nan
        with pytest.raises(NumericError):
            conv2d(Tensor(np.zeros((1, 1, 2, 2))), Tensor(w, name="bad"))


class TestPoolingAndActivations:
    """Tests for relu, max_pool2d, softmax_pair and concat_channels."""

    def test_relu(self):
        """Negative values are zeroed."""
        out = relu(Tensor(np.array([-1.0, 0.0, 2.0]).reshape(1, 1, 1, 3)))
        np.testing.assert_array_equal(out.data.ravel(), [0.0, 0.0, 2.0])

    @pytest.mark.parametrize("k,stride", [(2, 2), (3, 1), (3, 2)])
    def test_pool_matches_nested_loops(self, k, stride):
        """Windowed maximum equals the nested-loop reference."""
        x = np.random.default_rng(k + stride).normal(size=(1, 2, 7, 7))
        np.testing.assert_array_equal(max_pool2d(Tensor(x), k, stride).data, naive_pool(x, k, stride))

    def test_pool_tie_routes_to_first(self):
        """On ties the gradient goes to the first position in row-major order."""
        x = Tensor(np.ones((1, 1, 2, 2)), requires_grad=True)
        with Tape() as tape:
            max_pool2d(x, 2, 2)
        tape.backward()
        np.testing.assert_array_equal(x.grad[0, 0], [[1.0, 0.0], [0.0, 0.0]])

    def test_softmax_pairs_sum_to_one(self):
        """Each (background, face) pair sums to 1."""
        logits = np.random.default_rng(0).normal(size=(1, 6, 3, 2)) * 50
        probs = softmax_pair(Tensor(logits)).data.reshape(1, 3, 2, 3, 2)
        np.testing.assert_allclose(probs.sum(axis=2), 1.0)

    def test_softmax_odd_channels(self):
        """An odd channel count is rejected."""
        with pytest.raises(ConfigError):
            softmax_pair(Tensor(np.zeros((1, 3, 1, 1))))

    def test_concat_order_and_mismatch(self):
        """Channels follow input order; spatial mismatch raises ConfigError."""
        a = Tensor(np.zeros((1, 1, 2, 2)))
        b = Tensor(np.ones((1, 2, 2, 2)))
        out = concat_channels([a, b])
        assert out.shape == (1, 3, 2, 2)
        assert out.data[0, 0].sum() == 0 and out.data[0, 1:].min() == 1
        with pytest.raises(ConfigError):
            concat_channels([a, Tensor(np.zeros((1, 1, 3, 2)))])


class TestBilinearUpsample:
    """Tests for the fixed bilinear filler and up-sampling."""

    def test_filler_factor_two(self):
        """f = 2 gives the outer product of (0.25, 0.75, 0.75, 0.25)."""
        taps = np.array([0.25, 0.75, 0.75, 0.25])
        np.testing.assert_allclose(bilinear_filler(2), np.outer(taps, taps))

    @pytest.mark.parametrize("f", [2, 3, 4])
    def test_output_shape(self, f):
        """Output is exactly f*h x f*w."""
        out = bilinear_upsample(Tensor(np.zeros((1, 2, 3, 5))), f)
        assert out.shape == (1, 2, 3 * f, 5 * f)

    def test_constant_interior(self):
        """A constant map stays constant away from the borders."""
        out = bilinear_upsample(Tensor(np.full((1, 1, 4, 4), 3.0)), 2).data[0, 0]
        np.testing.assert_allclose(out[1:-1, 1:-1], 3.0)

    def test_filler_is_fixed(self):
        """The filler tensor never requires a gradient."""
        kernel = filler_tensor(2)
        assert kernel.fixed and not kernel.requires_grad
        assert kernel.name == "filler.up2"

    def test_factor_below_two(self):
        """f < 2 is rejected."""
        with pytest.raises(ConfigError):
            bilinear_filler(1)


class TestTape:
    """Tests for recording and backward."""

    def test_backward_before_forward(self):
        """backward on an empty tape raises StateError."""
        with pytest.raises(StateError):
            Tape().backward()

    def test_nothing_recorded_without_tape(self):
        """Operations outside a tape leave no trace."""
        x = Tensor(np.ones((1, 1, 2, 2)), requires_grad=True)
        with Tape() as tape:
            pass
        relu(x)
        assert len(tape) == 0

    def test_leaf_gradients_accumulate(self):
        """Two backward passes without zeroing add up."""
        x = Tensor(np.ones((1, 1, 2, 2)), requires_grad=True)
        for _ in range(2):
            with Tape() as tape:
                reduce_sum(relu(x))
            tape.backward()
        np.testing.assert_array_equal(x.grad, np.full((1, 1, 2, 2), 2.0))
        x.zero_grad()
        assert x.grad is None

    def test_retain_grad(self):
        """Intermediate gradients are stored only when requested."""
        x = Tensor(np.ones((1, 1, 2, 2)), requires_grad=True)
        with Tape() as tape:
            hidden = relu(x)
            hidden.retain_grad = True
            reduce_sum(hidden, np.full((1, 1, 2, 2), 3.0))
        tape.backward()
        np.testing.assert_array_equal(hidden.grad, np.full((1, 1, 2, 2), 3.0))

    @pytest.mark.parametrize(
        "name",
        ["conv2d", "relu", "max_pool2d", "bilinear_upsample", "concat_channels", "softmax_pair", "conv2d+relu"],
    )
    def test_gradients_match_finite_differences(self, name):
        """Analytic adjoints agree with central differences."""
        assert check_operation(name, instances=5, seed=7) < 1e-4


class TestSgdStep:
    """Tests for sgd_step."""

    def test_momentum_and_decay(self):
        """v = m v + g + wd p; p -= lr v."""
        param = Tensor(np.full((1, 1, 1, 1), 2.0), requires_grad=True)
        param.grad = np.full((1, 1, 1, 1), 0.5)
        velocity = Tensor(np.full((1, 1, 1, 1), 1.0))
        sgd_step([param], [velocity], lr=0.1, momentum=0.9, weight_decay=0.01)
        assert velocity.data.item() == pytest.approx(0.9 + 0.5 + 0.02)
        assert param.data.item() == pytest.approx(2.0 - 0.1 * 1.42)

    def test_fixed_tensors_untouched(self):
        """Fixed tensors keep their values."""
        kernel = filler_tensor(2)
        before = kernel.data.copy()
        sgd_step([kernel], [Tensor(np.ones(kernel.shape))], lr=1.0, momentum=0.0, weight_decay=1.0)
        np.testing.assert_array_equal(kernel.data, before)

    def test_velocity_shape_mismatch(self):
        """A velocity buffer of the wrong shape raises ConfigError."""
        with pytest.raises(ConfigError):
            sgd_step([Tensor(np.zeros((1, 1, 2, 2)))], [Tensor(np.zeros((1, 1, 1, 1)))], 0.1, 0.9, 0.0)
