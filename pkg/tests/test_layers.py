"""Layer forward tests against plain nested-loop oracles."""

import numpy as np
import pytest

from purefoodnet.errors import DegenerateBatchError, GeometryError, ShapeError
from purefoodnet.layers import (
    BatchNormLayer,
    ConvLayer,
    DenseLayer,
    DropoutLayer,
    PoolLayer,
    batchnorm_cached,
    batchnorm_forward,
    conv2d_forward,
    dense_forward,
    dropout_forward,
    flatten,
    l1_penalty,
    l2_penalty,
    pool_forward,
    relu,
    softmax,
)
from purefoodnet.tensor import ConvGeometry, Tensor4


def conv_oracle(x, filters, bias, k, s, z):
    """Six nested loops over every output cell and every kernel tap."""
    n_img, h, w, c = x.shape
    f = filters.shape[0]
    oh = (h - k + 2 * z) // s + 1
    ow = (w - k + 2 * z) // s + 1
    xp = np.zeros((n_img, h + 2 * z, w + 2 * z, c), dtype=np.float64)
    xp[:, z:z + h, z:z + w, :] = x
    out = np.zeros((n_img, oh, ow, f), dtype=np.float64)
    for n in range(n_img):
        for r in range(oh):
            for col in range(ow):
                for fi in range(f):
                    acc = 0.0
                    for p in range(k):
                        for q in range(k):
                            for ch in range(c):
                                acc += xp[n, r * s + p, col * s + q, ch] * filters[fi, p, q, ch]
                    out[n, r, col, fi] = acc + bias[fi]
    return out


def pool_oracle(x, window, stride, reduce):
    n_img, h, w, c = x.shape
    oh = (h - window) // stride + 1
    ow = (w - window) // stride + 1
    out = np.zeros((n_img, oh, ow, c), dtype=x.dtype)
    for n in range(n_img):
        for r in range(oh):
            for col in range(ow):
                for ch in range(c):
                    patch = x[n, r * stride:r * stride + window,
                              col * stride:col * stride + window, ch]
                    out[n, r, col, ch] = reduce(patch)
    return out


def conv_layer(filters, bias, k, s=1, z=0, activation="none"):
    return ConvLayer(filters, bias, ConvGeometry(k=k, s=s, z=z), activation)


class TestConv2d:
    def test_matches_loop_oracle(self):
        rng = np.random.default_rng(101)
        for _ in range(20):
            k = int(rng.integers(1, 5))
            s = int(rng.integers(1, 3))
            z = int(rng.integers(0, 3))
            h = int(rng.integers(max(1, k - 2 * z), 10))
            w = int(rng.integers(max(1, k - 2 * z), 10))
            c = int(rng.integers(1, 4))
            f = int(rng.integers(1, 5))
            n = int(rng.integers(1, 4))
            x = rng.normal(size=(n, h, w, c))
            filters = rng.normal(size=(f, k, k, c))
            bias = rng.normal(size=f)
            got = conv2d_forward(Tensor4(x), conv_layer(filters, bias, k, s, z))
            want = conv_oracle(x, filters, bias, k, s, z)
            assert got.data.shape == want.shape
            np.testing.assert_allclose(got.data, want, rtol=0, atol=1e-12)

    def test_identity_kernel(self):
        rng = np.random.default_rng(7)
        x = rng.normal(size=(2, 5, 5, 3))
        # One filter per channel, 1x1, picking that channel out unchanged.
        filters = np.zeros((3, 1, 1, 3))
        for ch in range(3):
            filters[ch, 0, 0, ch] = 1.0
        out = conv2d_forward(Tensor4(x), conv_layer(filters, np.zeros(3), k=1))
        np.testing.assert_array_equal(out.data, x)

    def test_fused_relu(self):
        rng = np.random.default_rng(11)
        x = rng.normal(size=(1, 4, 4, 2))
        filters = rng.normal(size=(3, 3, 3, 2))
        bias = rng.normal(size=3)
        plain = conv2d_forward(Tensor4(x), conv_layer(filters, bias, k=3, z=1))
        fused = conv2d_forward(Tensor4(x), conv_layer(filters, bias, k=3, z=1, activation="relu"))
        np.testing.assert_array_equal(fused.data, np.maximum(plain.data, 0))

    def test_no_kernel_flip(self):
        # Asymmetric kernel on a one-hot input reads the raw kernel value at
        # the matching offset, which a flipped (true convolution) would not.
        x = np.zeros((1, 3, 3, 1))
        x[0, 0, 0, 0] = 1.0
        filters = np.arange(9, dtype=np.float64).reshape(1, 3, 3, 1)
        out = conv2d_forward(Tensor4(x), conv_layer(filters, np.zeros(1), k=3))
        assert out.data[0, 0, 0, 0] == 0.0  # tap (0,0) of the unflipped kernel

    def test_rejects_mismatched_filters(self):
        x = Tensor4(np.zeros((1, 4, 4, 2), dtype=np.float32))
        with pytest.raises(ShapeError):
            conv2d_forward(x, conv_layer(np.zeros((3, 3, 3, 1)), np.zeros(3), k=3))
        with pytest.raises(ShapeError):
            conv_layer(np.zeros((3, 3, 3, 2)), np.zeros(4), k=3)
        with pytest.raises(ShapeError):
            conv_layer(np.zeros((3, 2, 2, 1)), np.zeros(3), k=3)

    def test_rejects_oversized_kernel(self):
        x = Tensor4(np.zeros((1, 2, 2, 1), dtype=np.float32))
        with pytest.raises(GeometryError):
            conv2d_forward(x, conv_layer(np.zeros((1, 5, 5, 1)), np.zeros(1), k=5))

    def test_rejects_nonfinite_weights(self):
        filters = np.zeros((1, 1, 1, 1))
        filters[0, 0, 0, 0] = np.nan
        with pytest.raises(ShapeError):
            conv_layer(filters, np.zeros(1), k=1)

    def test_linearity_without_bias(self):
        rng = np.random.default_rng(13)
        layer = conv_layer(rng.normal(size=(2, 3, 3, 2)), np.zeros(2), k=3, z=1)
        x = rng.normal(size=(1, 5, 5, 2))
        y = rng.normal(size=(1, 5, 5, 2))
        lhs = conv2d_forward(Tensor4(2.5 * x - 1.5 * y), layer)
        rhs = (2.5 * conv2d_forward(Tensor4(x), layer).data
               - 1.5 * conv2d_forward(Tensor4(y), layer).data)
        np.testing.assert_allclose(lhs.data, rhs, rtol=0, atol=1e-10)


class TestPooling:
    def test_max_matches_oracle(self):
        rng = np.random.default_rng(23)
        for window, stride, h, w in ((2, 2, 6, 8), (3, 1, 5, 5), (2, 1, 4, 3), (3, 3, 9, 6)):
            x = rng.normal(size=(2, h, w, 3))
            got = pool_forward(Tensor4(x), PoolLayer(window, stride, "max"))
            np.testing.assert_array_equal(got.data, pool_oracle(x, window, stride, np.max))

    def test_avg_matches_oracle(self):
        rng = np.random.default_rng(29)
        for window, stride, h, w in ((2, 2, 6, 8), (3, 1, 5, 5), (2, 1, 4, 3)):
            x = rng.normal(size=(2, h, w, 3))
            got = pool_forward(Tensor4(x), PoolLayer(window, stride, "average"))
            np.testing.assert_allclose(got.data, pool_oracle(x, window, stride, np.mean),
                                       rtol=0, atol=1e-12)

    def test_literal_two_by_two_max(self):
        x = np.array([[1.0, 2.0], [3.0, 4.0]]).reshape(1, 2, 2, 1)
        out = pool_forward(Tensor4(x), PoolLayer(2, 2, "max"))
        assert out.data.reshape(()) == 4.0

    def test_constant_input_both_modes(self):
        x = Tensor4(np.full((1, 4, 4, 2), 7.0))
        for mode in ("max", "average"):
            out = pool_forward(x, PoolLayer(2, 2, mode))
            assert out.data.shape == (1, 2, 2, 2)
            np.testing.assert_array_equal(out.data, 7.0)

    def test_max_outputs_come_from_windows(self):
        rng = np.random.default_rng(31)
        x = rng.normal(size=(1, 6, 6, 2))
        out = pool_forward(Tensor4(x), PoolLayer(2, 2, "max"))
        for r in range(3):
            for col in range(3):
                for ch in range(2):
                    window = x[0, 2 * r:2 * r + 2, 2 * col:2 * col + 2, ch]
                    assert out.data[0, r, col, ch] in window

    def test_average_preserves_global_mean_when_tiling(self):
        rng = np.random.default_rng(37)
        x = rng.normal(size=(2, 6, 6, 3))
        out = pool_forward(Tensor4(x), PoolLayer(2, 2, "average"))
        assert out.data.mean() == pytest.approx(x.mean(), abs=1e-12)

    def test_rejects_nontiling_geometry(self):
        x = Tensor4(np.zeros((1, 5, 5, 1), dtype=np.float32))
        with pytest.raises(GeometryError):
            pool_forward(x, PoolLayer(2, 2, "max"))  # (5 - 2) % 2 != 0
        with pytest.raises(GeometryError):
            pool_forward(x, PoolLayer(6, 1, "average"))

    def test_rejects_bad_mode(self):
        with pytest.raises(ValueError):
            PoolLayer(2, 2, "median")


class TestFlatten:
    def test_row_major_order(self):
        x = np.arange(24, dtype=np.float32).reshape(2, 3, 2, 2)
        out = flatten(Tensor4(x))
        assert out.data.shape == (2, 1, 1, 12)
        for n in range(2):
            idx = 0
            for h in range(3):
                for w in range(2):
                    for c in range(2):
                        assert out.data[n, 0, 0, idx] == x[n, h, w, c]
                        idx += 1

    def test_reshape_back_is_identity(self):
        rng = np.random.default_rng(41)
        x = rng.normal(size=(3, 4, 5, 2))
        out = flatten(Tensor4(x))
        np.testing.assert_array_equal(out.data.reshape(x.shape), x)


class TestDense:
    def test_matches_loop_oracle(self):
        rng = np.random.default_rng(31)
        x = rng.normal(size=(4, 1, 1, 6))
        weights = rng.normal(size=(6, 3))
        bias = rng.normal(size=3)
        got = dense_forward(Tensor4(x), DenseLayer(weights, bias))
        for n in range(4):
            for u in range(3):
                want = bias[u] + sum(x[n, 0, 0, d] * weights[d, u] for d in range(6))
                assert got.data[n, 0, 0, u] == pytest.approx(want, abs=1e-12)

    def test_identity_weights(self):
        rng = np.random.default_rng(43)
        x = rng.normal(size=(3, 1, 1, 5))
        out = dense_forward(Tensor4(x), DenseLayer(np.eye(5), np.zeros(5)))
        np.testing.assert_allclose(out.data, x, rtol=0, atol=1e-15)

    def test_zero_weights_give_bias(self):
        bias = np.array([1.0, -2.0, 3.0])
        x = Tensor4(np.random.default_rng(47).normal(size=(4, 1, 1, 6)))
        out = dense_forward(x, DenseLayer(np.zeros((6, 3)), bias))
        for n in range(4):
            np.testing.assert_array_equal(out.data[n, 0, 0], bias)

    def test_fused_softmax_rows(self):
        rng = np.random.default_rng(53)
        x = Tensor4(rng.normal(size=(6, 1, 1, 4)))
        layer = DenseLayer(rng.normal(size=(4, 5)), rng.normal(size=5), activation="softmax")
        out = dense_forward(x, layer)
        np.testing.assert_allclose(out.data.sum(axis=3), 1.0, rtol=0, atol=1e-12)

    def test_rejects_spatial_input(self):
        x = Tensor4(np.zeros((1, 2, 2, 3), dtype=np.float32))
        with pytest.raises(ShapeError):
            dense_forward(x, DenseLayer(np.zeros((12, 4)), np.zeros(4)))

    def test_rejects_width_mismatch(self):
        x = Tensor4(np.zeros((1, 1, 1, 3), dtype=np.float32))
        with pytest.raises(ShapeError):
            dense_forward(x, DenseLayer(np.zeros((4, 2)), np.zeros(2)))


class TestRelu:
    def test_clamps_negatives(self):
        x = np.array([[-2.0, -0.5, 0.0, 0.5, 2.0]]).reshape(1, 1, 1, 5)
        out = relu(Tensor4(x))
        np.testing.assert_array_equal(out.data.ravel(), [0.0, 0.0, 0.0, 0.5, 2.0])

    def test_all_positive_identity(self):
        x = np.abs(np.random.default_rng(59).normal(size=(2, 3, 3, 2))) + 0.1
        np.testing.assert_array_equal(relu(Tensor4(x)).data, x)


class TestSoftmax:
    def test_rows_sum_to_one(self):
        rng = np.random.default_rng(37)
        x = Tensor4(rng.normal(scale=5, size=(16, 1, 1, 10)))
        probs = softmax(x)
        np.testing.assert_allclose(probs.data.sum(axis=3), 1.0, rtol=0, atol=1e-12)
        assert (probs.data > 0).all()

    def test_matches_direct_formula(self):
        rng = np.random.default_rng(41)
        x = rng.normal(size=(5, 1, 1, 7))
        want = np.exp(x) / np.exp(x).sum(axis=3, keepdims=True)
        got = softmax(Tensor4(x))
        np.testing.assert_allclose(got.data, want, rtol=1e-12, atol=0)

    def test_shift_invariance(self):
        rng = np.random.default_rng(43)
        x = rng.normal(size=(3, 1, 1, 6))
        a = softmax(Tensor4(x))
        b = softmax(Tensor4(x + 123.0))
        np.testing.assert_allclose(a.data, b.data, rtol=0, atol=1e-12)

    def test_uniform_scores(self):
        x = Tensor4(np.full((2, 1, 1, 4), 3.25))
        np.testing.assert_allclose(softmax(x).data, 0.25, rtol=0, atol=1e-15)

    def test_preserves_argmax(self):
        rng = np.random.default_rng(61)
        x = rng.normal(size=(20, 1, 1, 9))
        probs = softmax(Tensor4(x))
        np.testing.assert_array_equal(probs.data.argmax(axis=3), x.argmax(axis=3))

    def test_survives_large_logits(self):
        x = Tensor4(np.array([1000.0, 1001.0, 999.0]).reshape(1, 1, 1, 3))
        probs = softmax(x)
        assert np.isfinite(probs.data).all()
        assert probs.data.sum() == pytest.approx(1.0, abs=1e-12)


class TestDropout:
    def test_identity_at_inference(self):
        x = Tensor4(np.ones((2, 3, 3, 2), dtype=np.float32))
        assert dropout_forward(x, DropoutLayer(0.5), training=False) is x

    def test_zero_rate_is_identity(self):
        x = Tensor4(np.ones((1, 2, 2, 1), dtype=np.float32))
        assert dropout_forward(x, DropoutLayer(0.0), training=True,
                               rng=np.random.default_rng(0)) is x

    def test_survivors_scaled(self):
        rng = np.random.default_rng(47)
        x = Tensor4(np.full((10, 4, 4, 8), 3.0))
        out = dropout_forward(x, DropoutLayer(0.25), training=True, rng=rng)
        vals = np.unique(out.data)
        np.testing.assert_allclose(vals, [0.0, 3.0 / 0.75], rtol=0, atol=1e-12)

    def test_expected_value_preserved(self):
        x = Tensor4(np.ones((10, 10, 10, 10)))
        out = dropout_forward(x, DropoutLayer(0.5), training=True,
                              rng=np.random.default_rng(3))
        assert out.data.mean() == pytest.approx(1.0, abs=0.02)

    def test_seed_reproducibility(self):
        x = Tensor4(np.ones((2, 5, 5, 3)))
        a = dropout_forward(x, DropoutLayer(0.4), training=True, rng=np.random.default_rng(9))
        b = dropout_forward(x, DropoutLayer(0.4), training=True, rng=np.random.default_rng(9))
        np.testing.assert_array_equal(a.data, b.data)

    def test_rejects_bad_rate(self):
        with pytest.raises(ValueError):
            DropoutLayer(1.0)
        with pytest.raises(ValueError):
            DropoutLayer(-0.1)


class TestBatchNorm:
    def _layer(self, c):
        return BatchNormLayer(np.ones(c), np.zeros(c), np.zeros(c), np.ones(c))

    def test_training_normalizes_per_channel(self):
        rng = np.random.default_rng(53)
        x = Tensor4(rng.normal(loc=3.0, scale=2.0, size=(8, 6, 6, 4)))
        out = batchnorm_forward(x, self._layer(4), training=True)
        mean = out.data.mean(axis=(0, 1, 2))
        var = out.data.var(axis=(0, 1, 2))
        np.testing.assert_allclose(mean, 0.0, rtol=0, atol=1e-10)
        np.testing.assert_allclose(var, 1.0, rtol=0, atol=1e-4)

    def test_constant_channel_goes_to_zero(self):
        x = Tensor4(np.full((4, 2, 2, 2), 5.0))
        out = batchnorm_forward(x, self._layer(2), training=True)
        np.testing.assert_allclose(out.data, 0.0, rtol=0, atol=1e-12)

    def test_zero_gamma_gives_beta(self):
        rng = np.random.default_rng(59)
        x = Tensor4(rng.normal(size=(4, 3, 3, 2)))
        layer = BatchNormLayer(np.zeros(2), np.full(2, 5.0), np.zeros(2), np.ones(2))
        out = batchnorm_forward(x, layer, training=True)
        np.testing.assert_array_equal(out.data, 5.0)

    def test_running_stats_update_rule(self):
        rng = np.random.default_rng(61)
        x = rng.normal(loc=1.5, scale=3.0, size=(6, 4, 4, 3))
        layer = BatchNormLayer(np.ones(3), np.zeros(3), np.full(3, 10.0), np.full(3, 5.0))
        batchnorm_forward(Tensor4(x), layer, training=True)
        want_mean = 0.9 * 10.0 + 0.1 * x.mean(axis=(0, 1, 2))
        want_var = 0.9 * 5.0 + 0.1 * x.var(axis=(0, 1, 2))
        np.testing.assert_allclose(layer.running_mean, want_mean, rtol=0, atol=1e-12)
        np.testing.assert_allclose(layer.running_var, want_var, rtol=0, atol=1e-12)

    def test_inference_uses_running_stats(self):
        rng = np.random.default_rng(67)
        x = rng.normal(size=(3, 2, 2, 2))
        layer = BatchNormLayer(np.array([1.5, 2.5]), np.array([0.5, -0.5]),
                               np.array([1.0, -1.0]), np.array([4.0, 9.0]))
        out = batchnorm_forward(Tensor4(x), layer, training=False)
        want = layer.gamma * (x - layer.running_mean) / np.sqrt(layer.running_var + 1e-5) + layer.beta
        np.testing.assert_allclose(out.data, want, rtol=0, atol=1e-12)
        # Inference never touches the running estimates.
        np.testing.assert_array_equal(layer.running_mean, [1.0, -1.0])
        np.testing.assert_array_equal(layer.running_var, [4.0, 9.0])

    def test_update_can_be_suppressed(self):
        rng = np.random.default_rng(71)
        x = Tensor4(rng.normal(size=(4, 2, 2, 2)))
        layer = self._layer(2)
        batchnorm_cached(x, layer, training=True, update_stats=False)
        np.testing.assert_array_equal(layer.running_mean, 0.0)
        np.testing.assert_array_equal(layer.running_var, 1.0)

    def test_degenerate_batch_rejected(self):
        x = Tensor4(np.ones((1, 1, 1, 3), dtype=np.float64))
        with pytest.raises(DegenerateBatchError):
            batchnorm_forward(x, self._layer(3), training=True)

    def test_rejects_mismatched_params(self):
        with pytest.raises(ShapeError):
            BatchNormLayer(np.ones(2), np.zeros(3), np.zeros(3), np.ones(3))
        x = Tensor4(np.ones((2, 2, 2, 3), dtype=np.float64))
        with pytest.raises(ShapeError):
            batchnorm_forward(x, self._layer(2), training=True)

    def test_rejects_negative_running_var(self):
        with pytest.raises(ShapeError):
            BatchNormLayer(np.ones(2), np.zeros(2), np.zeros(2), np.array([1.0, -0.5]))


class TestPenalties:
    def test_l2_hand_computed(self):
        ws = [np.array([[1.0, 2.0]]), np.array([3.0])]
        # 1 + 4 + 9 = 14
        assert l2_penalty(ws, 0.5) == pytest.approx(7.0, abs=1e-15)

    def test_l1_hand_computed(self):
        ws = [np.array([[-1.0, 2.0]]), np.array([-3.0])]
        assert l1_penalty(ws, 2.0) == pytest.approx(12.0, abs=1e-15)

    def test_coefficient_one_reference_pair(self):
        ws = [np.array([3.0, -4.0])]
        assert l1_penalty(ws, 1.0) == pytest.approx(7.0, abs=1e-15)
        assert l2_penalty(ws, 1.0) == pytest.approx(25.0, abs=1e-15)

    def test_zero_params(self):
        ws = [np.zeros((3, 3))]
        assert l2_penalty(ws, 5.0) == 0.0
        assert l1_penalty(ws, 5.0) == 0.0

    def test_matches_accumulation_loop(self):
        rng = np.random.default_rng(73)
        ws = [rng.normal(size=(2, 3)), rng.normal(size=(4,)), rng.normal(size=(2, 2, 2, 2))]
        l1 = sum(abs(float(v)) for w in ws for v in w.ravel())
        l2 = sum(float(v) ** 2 for w in ws for v in w.ravel())
        assert l1_penalty(ws, 0.3) == pytest.approx(0.3 * l1, rel=1e-12)
        assert l2_penalty(ws, 0.3) == pytest.approx(0.3 * l2, rel=1e-12)

    def test_rejects_negative_strength(self):
        with pytest.raises(ValueError):
            l2_penalty([np.ones(2)], -1.0)
