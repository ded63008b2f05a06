import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mildnet import ops
from mildnet.errors import ConfigError, GraphError, NumericError
from mildnet.gradcheck import gradcheck, max_rel_err
from mildnet.ops import ConvParams
from mildnet.tensor import Tensor, make_result


def rand(rng, *shape, grad=False):
    return Tensor(rng.standard_normal(shape).astype(np.float32), requires_grad=grad)


# ----------------------------------------------------------------------
# independent oracles
# ----------------------------------------------------------------------
def conv_oracle(x, w, b, dilation=1, stride=1):
    """Nested-loop 'same' convolution in float64."""
    x = x.astype(np.float64)
    n, c, h, wd = x.shape
    o, _, kh, kw = w.shape
    eh = kh + (kh - 1) * (dilation - 1)
    ew = kw + (kw - 1) * (dilation - 1)
    ho, wo = -(-h // stride), -(-wd // stride)
    pad_t = max((ho - 1) * stride + eh - h, 0) // 2
    pad_l = max((wo - 1) * stride + ew - wd, 0) // 2
    out = np.zeros((n, o, ho, wo))
    for bi in range(n):
        for oc in range(o):
            for i in range(ho):
                for j in range(wo):
                    acc = b[oc] if b is not None else 0.0
                    for ic in range(c):
                        for u in range(kh):
                            for v in range(kw):
                                yy = i * stride - pad_t + u * dilation
                                xx = j * stride - pad_l + v * dilation
                                if 0 <= yy < h and 0 <= xx < wd:
                                    acc += w[oc, ic, u, v] * x[bi, ic, yy, xx]
                    out[bi, oc, i, j] = acc
    return out


def catmull_rom(t):
    t = abs(t)
    if t <= 1:
        return 1.5 * t**3 - 2.5 * t**2 + 1
    if t < 2:
        return -0.5 * t**3 + 2.5 * t**2 - 4 * t + 2
    return 0.0


def cubic_1d_oracle(signal, n_out):
    n_in = len(signal)
    out = np.zeros(n_out)
    for i in range(n_out):
        src = (i + 0.5) * n_in / n_out - 0.5
        f = int(np.floor(src))
        for k in range(f - 1, f + 3):
            out[i] += catmull_rom(src - k) * signal[min(max(k, 0), n_in - 1)]
    return out


def bilinear_oracle(img):
    h, w = img.shape
    out = np.zeros((2 * h, 2 * w))
    for i in range(2 * h):
        for j in range(2 * w):
            sy = min(max((i + 0.5) / 2 - 0.5, 0), h - 1)
            sx = min(max((j + 0.5) / 2 - 0.5, 0), w - 1)
            y0, x0 = int(np.floor(sy)), int(np.floor(sx))
            y1, x1 = min(y0 + 1, h - 1), min(x0 + 1, w - 1)
            fy, fx = sy - y0, sx - x0
            out[i, j] = (
                (1 - fy) * (1 - fx) * img[y0, x0]
                + (1 - fy) * fx * img[y0, x1]
                + fy * (1 - fx) * img[y1, x0]
                + fy * fx * img[y1, x1]
            )
    return out


# ----------------------------------------------------------------------
# conv2d
# ----------------------------------------------------------------------
class TestConv2d:
    def test_identity_kernel(self):
        rng = np.random.default_rng(0)
        x = rand(rng, 2, 3, 6, 5)
        w = np.zeros((3, 3, 1, 1), np.float32)
        w[np.arange(3), np.arange(3)] = 1
        y = ops.conv2d(x, ConvParams(Tensor(w)))
        np.testing.assert_array_equal(y.data, x.data)

    def test_constant_field_interior(self):
        rng = np.random.default_rng(1)
        w = rng.standard_normal((2, 3, 3, 3)).astype(np.float32)
        b = np.array([0.5, -1.0], np.float32)
        x = Tensor(np.full((1, 3, 9, 9), 2.0, np.float32))
        y = ops.conv2d(x, ConvParams(Tensor(w), Tensor(b), dilation=2))
        expected = w.sum(axis=(1, 2, 3)) * 2.0 + b
        # dilation 2 reaches 2 pixels out; interior starts 2 from the border
        np.testing.assert_allclose(y.data[0, :, 2:-2, 2:-2], expected[:, None, None] * np.ones((5, 5)), rtol=1e-5)

    def test_dilated_matches_loop_oracle(self):
        rng = np.random.default_rng(2)
        x = rng.standard_normal((1, 2, 5, 5)).astype(np.float32)
        w = rng.standard_normal((3, 2, 3, 3)).astype(np.float32)
        b = rng.standard_normal(3).astype(np.float32)
        y = ops.conv2d(Tensor(x), ConvParams(Tensor(w), Tensor(b), dilation=2))
        np.testing.assert_allclose(y.data, conv_oracle(x, w, b, dilation=2), atol=1e-5)

    @pytest.mark.parametrize("stride,dilation,k", [(1, 1, 3), (2, 1, 3), (1, 3, 3), (2, 2, 1), (1, 1, 1)])
    def test_geometry_matches_loop_oracle(self, stride, dilation, k):
        rng = np.random.default_rng(3)
        x = rng.standard_normal((2, 2, 7, 6)).astype(np.float32)
        w = rng.standard_normal((2, 2, k, k)).astype(np.float32)
        y = ops.conv2d(Tensor(x), ConvParams(Tensor(w), None, stride=stride, dilation=dilation))
        assert y.shape == (2, 2, -(-7 // stride), -(-6 // stride))
        np.testing.assert_allclose(y.data, conv_oracle(x, w, None, dilation, stride), atol=1e-5)

    def test_channel_mismatch(self):
        with pytest.raises(ConfigError):
            ops.conv2d(Tensor(np.zeros((1, 2, 4, 4))), ConvParams(Tensor(np.zeros((1, 3, 3, 3)))))

    def test_bad_dilation(self):
        with pytest.raises(ConfigError):
            ConvParams(Tensor(np.zeros((1, 1, 3, 3))), dilation=0)

    def test_effective_extent(self):
        p = ConvParams(Tensor(np.zeros((1, 1, 3, 3))), dilation=4)
        assert p.effective_extent() == (9, 9)

    def test_non_finite_output(self):
        x = Tensor(np.full((1, 1, 4, 4), np.inf, np.float32))
        with pytest.raises(NumericError):
            ops.conv2d(x, ConvParams(Tensor(np.ones((1, 1, 3, 3)))))

    @pytest.mark.parametrize("rate", [1, 2, 3])
    def test_receptive_field(self, rate):
        rng = np.random.default_rng(4)
        x = rng.standard_normal((1, 1, 15, 15)).astype(np.float32)
        p = ConvParams(Tensor(rng.standard_normal((1, 1, 3, 3))), dilation=rate)
        base = ops.conv2d(Tensor(x), p).data
        cy = cx = 7
        for dy in range(-7, 8):
            for dx in range(-7, 8):
                x2 = x.copy()
                x2[0, 0, cy + dy, cx + dx] += 1.0
                changed = ops.conv2d(Tensor(x2), p).data[0, 0, cy, cx] != base[0, 0, cy, cx]
                if max(abs(dy), abs(dx)) > rate:
                    assert not changed
                if (abs(dy), abs(dx)) in {(0, 0), (rate, rate), (0, rate)}:
                    assert changed

    def test_grad_weight_constant_input(self):
        # loss = sum(conv(x, k)) with constant x: dL/dk[o,c,u,v] = c * (number of
        # output pixels whose tap (u,v) lands inside the image)
        c0 = 1.5
        x = Tensor(np.full((1, 1, 6, 6), c0, np.float32))
        w = Tensor(np.zeros((1, 1, 3, 3), np.float32), requires_grad=True)
        ops.sum_all(ops.conv2d(x, ConvParams(w))).backward()
        counts = np.array([[25, 30, 25], [30, 36, 30], [25, 30, 25]], np.float64)
        np.testing.assert_allclose(w.grad[0, 0], c0 * counts, rtol=1e-6)
        samples = gradcheck(lambda xx, ww: ops.sum_all(ops.conv2d(xx, ConvParams(ww))), [x, w], n_coords=9)
        assert max_rel_err(samples) < 1e-3

    @pytest.mark.parametrize("stride,dilation", [(1, 1), (1, 2), (2, 1)])
    def test_gradcheck(self, stride, dilation):
        rng = np.random.default_rng(5)
        x = rand(rng, 2, 3, 6, 6, grad=True)
        w = rand(rng, 4, 3, 3, 3, grad=True)
        b = rand(rng, 4, grad=True)
        probe = rng.standard_normal((2, 4, -(-6 // stride), -(-6 // stride)))

        def f(x, w, b):
            return ops.weighted_sum(ops.conv2d(x, ConvParams(w, b, stride=stride, dilation=dilation)), probe)

        assert max_rel_err(gradcheck(f, [x, w, b], seed=1)) < 1e-3


# ----------------------------------------------------------------------
# pooling / resampling
# ----------------------------------------------------------------------
class TestMaxpool:
    def test_constant(self):
        y = ops.maxpool2x(Tensor(np.full((1, 2, 6, 8), 3.0)))
        assert y.shape == (1, 2, 3, 4)
        assert np.all(y.data == 3.0)

    def test_forced_max(self):
        y = ops.maxpool2x(Tensor(np.array([[[[1.0, 2.0], [3.0, 4.0]]]])))
        assert y.data.item() == 4.0

    def test_window_max_oracle(self):
        rng = np.random.default_rng(6)
        x = rng.standard_normal((1, 1, 8, 8)).astype(np.float32)
        expected = np.array([[max(x[0, 0, 2 * i, 2 * j], x[0, 0, 2 * i + 1, 2 * j], x[0, 0, 2 * i, 2 * j + 1], x[0, 0, 2 * i + 1, 2 * j + 1]) for j in range(4)] for i in range(4)])
        np.testing.assert_array_equal(ops.maxpool2x(Tensor(x)).data[0, 0], expected)

    def test_gradient_routes_to_argmax(self):
        x = Tensor(np.array([[[[1.0, 5.0], [3.0, 4.0]]]], np.float32), requires_grad=True)
        ops.sum_all(ops.maxpool2x(x)).backward()
        np.testing.assert_array_equal(x.grad[0, 0], [[0, 1], [0, 0]])

    def test_odd_extent_replicates(self):
        x = Tensor(np.arange(9, dtype=np.float32).reshape(1, 1, 3, 3), requires_grad=True)
        y = ops.maxpool2x(x)
        np.testing.assert_array_equal(y.data[0, 0], [[4, 5], [7, 8]])
        ops.sum_all(y).backward()
        assert x.grad.sum() == 4

    def test_empty(self):
        with pytest.raises(ConfigError):
            ops.maxpool2x(Tensor(np.zeros((1, 1, 0, 4))))

    def test_gradcheck(self):
        rng = np.random.default_rng(7)
        x = rand(rng, 2, 2, 6, 6, grad=True)
        probe = rng.standard_normal((2, 2, 3, 3))
        assert max_rel_err(gradcheck(lambda t: ops.weighted_sum(ops.maxpool2x(t), probe), [x])) < 1e-3

    @given(st.floats(0.01, 100.0))
    @settings(max_examples=25, deadline=None)
    def test_commutes_with_positive_scale(self, s):
        rng = np.random.default_rng(8)
        x = rng.standard_normal((1, 2, 6, 6))
        np.testing.assert_allclose(ops.maxpool2x(Tensor(s * x)).data, s * ops.maxpool2x(Tensor(x)).data, rtol=1e-12)


class TestBicubic:
    def test_identity(self):
        x = Tensor(np.random.default_rng(9).random((1, 3, 7, 5)))
        np.testing.assert_array_equal(ops.bicubic_resize(x, 7, 5).data, x.data)

    @given(st.floats(-10, 10), st.integers(1, 20), st.integers(1, 20))
    @settings(max_examples=40, deadline=None)
    def test_constant_preserved_exactly(self, c, oh, ow):
        x = Tensor(np.full((1, 2, 8, 6), c, np.float32))
        y = ops.bicubic_resize(x, oh, ow)
        assert y.shape == (1, 2, oh, ow)
        assert np.all(y.data == np.float32(c))

    def test_ramp_downscale_matches_separable_oracle(self):
        yy, xx = np.mgrid[0:8, 0:8]
        ramp = (0.3 * yy + 0.7 * xx).astype(np.float32)
        y = ops.bicubic_resize(Tensor(ramp[None, None]), 4, 4).data[0, 0]
        rows = np.stack([cubic_1d_oracle(r, 4) for r in ramp.astype(np.float64)])
        expected = np.stack([cubic_1d_oracle(col, 4) for col in rows.T]).T
        np.testing.assert_allclose(y, expected, atol=1e-4)

    def test_weights_form_partition_of_unity(self):
        t = np.linspace(0, 1, 11)
        total = sum(ops.cubic_weight(t - k) for k in (-1, 0, 1, 2))
        np.testing.assert_allclose(total, 1.0, atol=1e-12)

    def test_bad_extent(self):
        with pytest.raises(ConfigError):
            ops.bicubic_resize(Tensor(np.zeros((1, 1, 4, 4))), 0, 3)


class TestUpsample:
    def test_constant(self):
        y = ops.upsample2x(Tensor(np.full((1, 2, 3, 5), 0.1, np.float32)))
        assert y.shape == (1, 2, 6, 10)
        assert np.all(y.data == np.float32(0.1))

    def test_single_pixel(self):
        y = ops.upsample2x(Tensor(np.array([[[[7.0]]]])))
        np.testing.assert_array_equal(y.data, np.full((1, 1, 2, 2), 7.0))

    def test_bilinear_oracle(self):
        x = np.random.default_rng(10).standard_normal((4, 4)).astype(np.float32)
        y = ops.upsample2x(Tensor(x[None, None])).data[0, 0]
        np.testing.assert_allclose(y, bilinear_oracle(x.astype(np.float64)), atol=1e-5)

    def test_gradcheck(self):
        rng = np.random.default_rng(11)
        x = rand(rng, 1, 2, 3, 4, grad=True)
        probe = rng.standard_normal((1, 2, 6, 8))
        assert max_rel_err(gradcheck(lambda t: ops.weighted_sum(ops.upsample2x(t), probe), [x], n_coords=12)) < 1e-3


# ----------------------------------------------------------------------
# channel plumbing and reductions
# ----------------------------------------------------------------------
class TestConcat:
    def test_shape(self):
        y = ops.concat_channels(Tensor(np.zeros((1, 2, 4, 4))), Tensor(np.zeros((1, 3, 4, 4))))
        assert y.shape == (1, 5, 4, 4)

    def test_round_trip(self):
        a = Tensor(np.random.default_rng(12).random((2, 3, 4, 4)))
        y = ops.concat_channels(a, a)
        np.testing.assert_array_equal(ops.channel_slice(y, 0, 3).data, a.data)
        np.testing.assert_array_equal(ops.channel_slice(y, 3, 6).data, a.data)

    def test_mismatch(self):
        with pytest.raises(ConfigError):
            ops.concat_channels(Tensor(np.zeros((1, 2, 4, 4))), Tensor(np.zeros((1, 2, 4, 5))))

    def test_sum_gradient_is_ones(self):
        rng = np.random.default_rng(13)
        a, b = rand(rng, 1, 2, 3, 3, grad=True), rand(rng, 1, 1, 3, 3, grad=True)
        ops.sum_all(ops.concat_channels(a, b)).backward()
        np.testing.assert_array_equal(a.grad, np.ones_like(a.data))
        np.testing.assert_array_equal(b.grad, np.ones_like(b.data))
        assert max_rel_err(gradcheck(lambda p, q: ops.sum_all(ops.concat_channels(p, q)), [a, b])) < 1e-3

    def test_slice_gradcheck(self):
        rng = np.random.default_rng(14)
        x = rand(rng, 1, 4, 3, 3, grad=True)
        probe = rng.standard_normal((1, 2, 3, 3))
        assert max_rel_err(gradcheck(lambda t: ops.weighted_sum(ops.channel_slice(t, 1, 3), probe), [x])) < 1e-3


class TestGlobalAvgPool:
    def test_constant(self):
        y = ops.global_avg_pool(Tensor(np.full((2, 3, 5, 4), 2.5)))
        assert y.shape == (2, 3, 1, 1)
        assert np.all(y.data == 2.5)

    def test_mean(self):
        y = ops.global_avg_pool(Tensor(np.array([[[[0.0, 1.0], [2.0, 3.0]]]])))
        assert y.data.item() == 1.5

    def test_sum_over_hw_oracle(self):
        x = np.random.default_rng(15).random((2, 3, 5, 7))
        np.testing.assert_allclose(ops.global_avg_pool(Tensor(x)).data[..., 0, 0], x.sum(axis=(2, 3)) / 35, rtol=1e-12)

    def test_gradcheck_with_broadcast(self):
        rng = np.random.default_rng(16)
        x = rand(rng, 2, 3, 4, 4, grad=True)
        probe = rng.standard_normal((2, 3, 4, 4))
        f = lambda t: ops.weighted_sum(ops.broadcast_spatial(ops.global_avg_pool(t), 4, 4), probe)  # noqa: E731
        assert max_rel_err(gradcheck(f, [x])) < 1e-3


class TestPointwise:
    def test_relu_values(self):
        y = ops.relu(Tensor(np.array([-2.0, 3.0])))
        np.testing.assert_array_equal(y.data, [0.0, 3.0])

    def test_relu_gradcheck(self):
        rng = np.random.default_rng(17)
        x = rand(rng, 1, 2, 4, 4, grad=True)
        probe = rng.standard_normal((1, 2, 4, 4))
        assert max_rel_err(gradcheck(lambda t: ops.weighted_sum(ops.relu(t), probe), [x], n_coords=10)) < 1e-3

    def test_dropout_rate_zero(self):
        x = Tensor(np.random.default_rng(18).random((1, 2, 3, 3)))
        y = ops.dropout(x, 0.0, training=True, rng=np.random.default_rng(0))
        np.testing.assert_array_equal(y.data, x.data)

    def test_dropout_inference_is_identity(self):
        x = Tensor(np.random.default_rng(19).random((1, 2, 3, 3)))
        assert ops.dropout(x, 0.5, training=False) is x

    def test_dropout_mean_preserved(self):
        x = Tensor(np.ones((1, 1, 1000, 1000), np.float32))
        y = ops.dropout(x, 0.5, training=True, rng=np.random.default_rng(20))
        assert abs(y.data.mean(dtype=np.float64) - 1.0) < 0.01
        assert set(np.unique(y.data)) <= {0.0, 2.0}

    def test_dropout_rate_validation(self):
        with pytest.raises(ConfigError):
            ops.dropout(Tensor(np.ones(3)), 1.0, training=True, rng=np.random.default_rng(0))

    def test_dropout_gradcheck_fixed_mask(self):
        rng = np.random.default_rng(21)
        x = rand(rng, 1, 2, 4, 4, grad=True)
        probe = rng.standard_normal((1, 2, 4, 4))

        def f(t):
            return ops.weighted_sum(ops.dropout(t, 0.3, True, np.random.default_rng(5)), probe)

        assert max_rel_err(gradcheck(f, [x])) < 1e-3


class TestSoftmaxCrossEntropy:
    def test_confident_correct_is_zero(self):
        labels = np.array([[[0, 1], [1, 0]]])
        logits = np.zeros((1, 2, 2, 2), np.float32)
        logits[0, 0] = np.where(labels[0] == 0, 50, -50)
        logits[0, 1] = -logits[0, 0]
        assert ops.softmax_cross_entropy(Tensor(logits), labels).data < 1e-20

    def test_uniform_is_ln2(self):
        loss = ops.softmax_cross_entropy(Tensor(np.zeros((2, 2, 3, 3))), np.zeros((2, 3, 3), int))
        assert loss.item() == pytest.approx(np.log(2), abs=1e-12)

    def test_direct_nll_oracle(self):
        rng = np.random.default_rng(22)
        logits = rng.standard_normal((1, 2, 3, 3))
        labels = rng.integers(0, 2, (1, 3, 3))
        total = 0.0
        for i in range(3):
            for j in range(3):
                z = logits[0, :, i, j]
                total += -np.log(np.exp(z[labels[0, i, j]]) / np.exp(z).sum())
        assert ops.softmax_cross_entropy(Tensor(logits), labels).item() == pytest.approx(total / 9, abs=1e-6)

    def test_weight_map(self):
        rng = np.random.default_rng(23)
        logits = Tensor(rng.standard_normal((1, 2, 3, 3)))
        labels = rng.integers(0, 2, (1, 3, 3))
        wm = np.zeros((1, 3, 3))
        wm[0, 1, 1] = 9.0
        single = ops.softmax_cross_entropy(Tensor(logits.data[:, :, 1:2, 1:2]), labels[:, 1:2, 1:2]).item()
        assert ops.softmax_cross_entropy(logits, labels, wm).item() == pytest.approx(single)

    def test_label_out_of_range(self):
        with pytest.raises(ConfigError):
            ops.softmax_cross_entropy(Tensor(np.zeros((1, 2, 2, 2))), np.full((1, 2, 2), 2))

    def test_gradient_formula_and_gradcheck(self):
        rng = np.random.default_rng(24)
        x = rand(rng, 2, 2, 3, 3, grad=True)
        labels = rng.integers(0, 2, (2, 3, 3))
        ops.softmax_cross_entropy(x, labels).backward()
        p = ops.softmax(x.data.astype(np.float64))
        onehot = np.eye(2)[labels].transpose(0, 3, 1, 2)
        np.testing.assert_allclose(x.grad, (p - onehot) / 18, atol=1e-7)
        x.grad = None
        assert max_rel_err(gradcheck(lambda t: ops.softmax_cross_entropy(t, labels), [x], n_coords=10)) < 1e-3


# ----------------------------------------------------------------------
# graph mechanics
# ----------------------------------------------------------------------
class TestBackward:
    def test_sum_gives_ones(self):
        x = Tensor(np.random.default_rng(25).random((2, 3)), requires_grad=True)
        ops.sum_all(x).backward()
        np.testing.assert_array_equal(x.grad, np.ones((2, 3)))

    def test_accumulates_until_zeroed(self):
        x = Tensor(np.ones((2, 2)), requires_grad=True)
        ops.sum_all(x).backward()
        ops.sum_all(x).backward()
        np.testing.assert_array_equal(x.grad, 2 * np.ones((2, 2)))
        x.zero_grad()
        ops.sum_all(x).backward()
        np.testing.assert_array_equal(x.grad, np.ones((2, 2)))

    def test_shared_subgraph(self):
        x = Tensor(np.array([1.0, -2.0, 3.0]), requires_grad=True)
        y = ops.relu(x)
        ops.sum_all(ops.add(y, ops.scale(y, 2.0))).backward()
        np.testing.assert_array_equal(x.grad, [3.0, 0.0, 3.0])

    def test_non_scalar_rejected(self):
        with pytest.raises(GraphError):
            Tensor(np.ones(3), requires_grad=True).backward()

    def test_cycle_detected(self):
        x = Tensor(np.ones(2), requires_grad=True)
        a = ops.scale(x, 2.0)
        b = ops.scale(a, 3.0)
        a._parents = (b,)  # forge a cycle a -> b -> a
        with pytest.raises(GraphError):
            ops.sum_all(b).backward()

    def test_make_result_rejects_nan(self):
        with pytest.raises(NumericError):
            make_result(np.array([np.nan]), [], lambda g: (), "probe")

    def test_sum_squares_gradcheck(self):
        rng = np.random.default_rng(26)
        x = rand(rng, 3, 4, grad=True)
        assert max_rel_err(gradcheck(ops.sum_squares, [x])) < 1e-3
