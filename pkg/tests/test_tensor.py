"""Engine primitives against independent oracles."""

import numpy as np
import pytest

import gwnet.tensor as T
from gwnet import functional as F
from gwnet.tensor import Tensor


def conv_oracle(x, w, stride, pad):
    """Direct sliding-window cross-correlation."""
    n, cin, h, wd = x.shape
    cout, _, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (wd + 2 * pad - kw) // stride + 1
    out = np.zeros((n, cout, ho, wo))
    for b in range(n):
        for co in range(cout):
            for i in range(ho):
                for j in range(wo):
                    patch = xp[b, :, i * stride:i * stride + kh,
                               j * stride:j * stride + kw]
                    out[b, co, i, j] = (patch * w[co]).sum()
    return out


def deconv_oracle(x, w, stride, pad, out_pad):
    """Scatter-accumulate transposed convolution; w is (in, out, kh, kw)."""
    n, cin, h, wd = x.shape
    _, cout, kh, kw = w.shape
    oh = (h - 1) * stride - 2 * pad + kh + out_pad
    ow = (wd - 1) * stride - 2 * pad + kw + out_pad
    full = np.zeros((n, cout, oh + 2 * pad, ow + 2 * pad))
    for b in range(n):
        for ci in range(cin):
            for i in range(h):
                for j in range(wd):
                    full[b, :, i * stride:i * stride + kh,
                         j * stride:j * stride + kw] += x[b, ci, i, j] * w[ci]
    return full[:, :, pad:pad + oh, pad:pad + ow]


class TestConv2d:
    def test_zero_input_gives_bias(self, rng):
        w = rng.standard_normal((3, 2, 5, 5))
        b = rng.standard_normal(3)
        spec = F.ConvSpec(Tensor(w), 2, 2, Tensor(b))
        y = F.conv2d(Tensor(np.zeros((1, 2, 8, 8))), spec)
        for c in range(3):
            assert np.allclose(y.data[0, c], b[c])

    def test_ones_against_sliding_window(self):
        x = np.ones((1, 1, 4, 4))
        w = np.ones((1, 1, 5, 5))
        y = T.conv2d_raw(Tensor(x), Tensor(w), 2, 2)
        assert y.shape == (1, 1, 2, 2)
        assert np.allclose(y.data, conv_oracle(x, w, 2, 2))

    def test_random_against_oracle(self, rng):
        x = rng.standard_normal((2, 3, 9, 7))
        w = rng.standard_normal((4, 3, 3, 3))
        for stride, pad in ((1, 1), (2, 2), (2, 0)):
            y = T.conv2d_raw(Tensor(x), Tensor(w), stride, pad)
            assert np.allclose(y.data, conv_oracle(x, w, stride, pad),
                               atol=1e-12)

    def test_six_layer_chain_sizes(self, rng):
        t = Tensor(rng.standard_normal((1, 1, 64, 64)))
        sizes = []
        cin = 1
        for _ in range(6):
            t = T.conv2d_raw(t, Tensor(rng.standard_normal((2, cin, 5, 5))),
                             2, 2)
            sizes.append(t.shape[2])
            cin = 2
        assert sizes == [32, 16, 8, 4, 2, 1]

    def test_channel_mismatch_rejected(self, rng):
        with pytest.raises(ValueError, match="channels"):
            T.conv2d_raw(Tensor(np.zeros((1, 2, 8, 8))),
                         Tensor(np.zeros((3, 4, 5, 5))), 2, 2)

    def test_too_small_input_rejected(self):
        with pytest.raises(ValueError, match="too small"):
            T.conv2d_raw(Tensor(np.zeros((1, 1, 2, 2))),
                         Tensor(np.zeros((1, 1, 5, 5))), 2, 0)


class TestDeconv2d:
    def test_scatter_oracle(self, rng):
        x = rng.standard_normal((1, 1, 2, 2))
        w = rng.standard_normal((1, 2, 5, 5))
        spec = F.ConvSpec(Tensor(w.transpose(1, 0, 2, 3)), 2, 2, None, 1)
        y = F.deconv2d(Tensor(x), spec)
        assert np.allclose(y.data, deconv_oracle(x, w, 2, 2, 1), atol=1e-12)

    def test_upsampling_chain(self, rng):
        t = Tensor(rng.standard_normal((1, 4, 1, 1)))
        sizes = []
        for _ in range(6):
            spec = F.ConvSpec(Tensor(rng.standard_normal((4, 4, 5, 5))),
                              2, 2, None, 1)
            t = F.deconv2d(t, spec)
            sizes.append(t.shape[2])
        assert sizes == [2, 4, 8, 16, 32, 64]

    def test_adjoint_identity(self, rng):
        """<conv(x), y> == <x, deconv(y)> with the transposed kernel."""
        x = rng.standard_normal((1, 2, 8, 8))
        w = rng.standard_normal((3, 2, 5, 5))
        y = rng.standard_normal((1, 3, 4, 4))
        conv_x = T.conv2d_raw(Tensor(x), Tensor(w), 2, 2)
        spec = F.ConvSpec(Tensor(w.transpose(1, 0, 2, 3)), 2, 2, None, 1)
        deconv_y = F.deconv2d(Tensor(y), spec)
        assert np.isclose((conv_x.data * y).sum(), (x * deconv_y.data).sum())

    def test_matches_conv_backward_data(self, rng):
        """deconv forward equals the backward-data pass of conv2d."""
        w = rng.standard_normal((3, 2, 5, 5))
        g = rng.standard_normal((1, 3, 4, 4))
        x_leaf = Tensor(rng.standard_normal((1, 2, 8, 8)), requires_grad=True)
        out = T.conv2d_raw(x_leaf, Tensor(w), 2, 2)
        (gx,) = T.grad((out * Tensor(g)).sum(), [x_leaf])
        spec = F.ConvSpec(Tensor(w.transpose(1, 0, 2, 3)), 2, 2, None, 1)
        via_deconv = F.deconv2d(Tensor(g), spec)
        assert np.allclose(gx.data, via_deconv.data, atol=1e-12)


class TestActivations:
    def test_relu_values(self):
        y = F.activation(Tensor(np.array([-1.0, 0.0, 2.0])), "relu")
        assert np.array_equal(y.data, [0.0, 0.0, 2.0])

    def test_leaky_relu_values(self):
        y = F.activation(Tensor(np.array([-1.0, 2.0])), "leaky_relu", 0.2)
        assert np.allclose(y.data, [-0.2, 2.0])

    def test_tanh_bounds_and_gradient(self, rng):
        x = rng.standard_normal((50,)) * 2
        y = F.activation(Tensor(x), "tanh")
        assert (np.abs(y.data) < 1.0).all()
        leaf = Tensor(x, requires_grad=True)
        (g,) = T.grad(T.tanh(leaf).sum(), [leaf])
        h = 1e-6
        numeric = (np.tanh(x + h) - np.tanh(x - h)) / (2 * h)
        rel = np.abs(g.data - numeric) / np.maximum(1, np.abs(numeric))
        assert rel.max() < 1e-6

    def test_unknown_kind(self):
        with pytest.raises(ValueError):
            F.activation(Tensor(np.zeros(2)), "gelu")


class TestElementwiseAndShape:
    def test_broadcast_backward(self, rng):
        a = Tensor(rng.standard_normal((2, 3, 4)), requires_grad=True)
        b = Tensor(rng.standard_normal((1, 3, 1)), requires_grad=True)
        out = (a * b + b).sum()
        ga, gb = T.grad(out, [a, b])
        assert ga.shape == a.shape and gb.shape == b.shape
        assert np.allclose(ga.data, np.broadcast_to(b.data, a.shape))
        assert np.allclose(gb.data,
                           a.data.sum(axis=(0, 2), keepdims=True)
                           + 2 * 4 * np.ones_like(b.data))

    def test_reshape_transpose_roundtrip(self, rng):
        x = rng.standard_normal((2, 3, 4))
        t = Tensor(x, requires_grad=True)
        y = T.transpose(t.reshape(2, 12), (1, 0))
        (g,) = T.grad((y * Tensor(np.ones((12, 2)))).sum(), [t])
        assert np.allclose(g.data, np.ones_like(x))

    def test_concat_slices_recover(self, rng):
        a = rng.standard_normal((1, 1, 3, 3))
        b = rng.standard_normal((1, 2, 3, 3))
        cat = F.channel_concat([Tensor(a), Tensor(b)])
        assert cat.shape == (1, 3, 3, 3)
        assert np.array_equal(cat.data[:, :1], a)
        assert np.array_equal(cat.data[:, 1:], b)

    def test_concat_gradient_splits(self, rng):
        a = Tensor(rng.standard_normal((1, 1, 2, 2)), requires_grad=True)
        b = Tensor(rng.standard_normal((1, 3, 2, 2)), requires_grad=True)
        ga, gb = T.grad(F.channel_concat([a, b]).sum(), [a, b])
        assert np.array_equal(ga.data, np.ones_like(a.data))
        assert np.array_equal(gb.data, np.ones_like(b.data))

    def test_concat_spatial_mismatch_rejected(self):
        with pytest.raises(ValueError, match="batch/spatial"):
            F.channel_concat([Tensor(np.zeros((1, 1, 2, 2))),
                              Tensor(np.zeros((1, 1, 3, 3)))])

    def test_max_reduce_first_tie(self):
        x = Tensor(np.array([[1.0, 3.0, 3.0]]), requires_grad=True)
        (g,) = T.grad(T.max_reduce(x, axis=1).sum(), [x])
        assert np.array_equal(g.data, [[0.0, 1.0, 0.0]])

    def test_matmul_rejects_non_2d(self):
        with pytest.raises(ValueError):
            T.matmul(Tensor(np.zeros((2, 2, 2))), Tensor(np.zeros((2, 2))))


class TestDeterminism:
    def test_ops_deterministic(self, rng):
        x = rng.standard_normal((2, 3, 8, 8))
        w = rng.standard_normal((4, 3, 5, 5))
        a = T.conv2d_raw(Tensor(x), Tensor(w), 2, 2).data
        b = T.conv2d_raw(Tensor(x), Tensor(w), 2, 2).data
        assert np.array_equal(a, b)
        na = F.normalize(Tensor(x), "instance", Tensor(np.ones(3)),
                         Tensor(np.zeros(3))).data
        nb = F.normalize(Tensor(x), "instance", Tensor(np.ones(3)),
                         Tensor(np.zeros(3))).data
        assert np.array_equal(na, nb)

    def test_finite_outputs(self, rng):
        x = rng.standard_normal((2, 2, 16, 16))
        w = rng.standard_normal((3, 2, 5, 5))
        y = T.conv2d_raw(Tensor(x), Tensor(w), 2, 2)
        z = F.normalize(y, "batch", Tensor(np.ones(3)), Tensor(np.zeros(3)))
        assert np.isfinite(z.data).all()
