"""Forward-op behavior against naive loop oracles and hand values."""

import numpy as np
import pytest

from cxrforge import tensor as T
from cxrforge.tensor import ShapeError, Tensor

from conftest import naive_conv2d, naive_gap, naive_matmul, naive_maxpool2d


class TestConv2d:
    def test_hand_example(self):
        x = Tensor([[[[1, 2, 3], [4, 5, 6], [7, 8, 9]]]], dtype=np.float64)
        k = Tensor(np.ones((1, 1, 2, 2)), dtype=np.float64)
        b = Tensor([0.0], dtype=np.float64)
        out = T.conv2d(x, k, b, stride=1, padding="valid")
        np.testing.assert_array_equal(out.data, [[[[12, 16], [24, 28]]]])

    def test_identity_kernel(self, rng):
        x = Tensor(rng.random((2, 1, 5, 5), dtype=np.float32))
        k = Tensor(np.ones((1, 1, 1, 1), dtype=np.float32))
        b = Tensor(np.zeros(1, dtype=np.float32))
        out = T.conv2d(x, k, b)
        np.testing.assert_array_equal(out.data, x.data)

    def test_zero_input_gives_bias(self, rng):
        x = Tensor(np.zeros((1, 2, 4, 4), dtype=np.float32))
        k = Tensor(rng.normal(size=(3, 2, 3, 3)).astype(np.float32))
        b = Tensor(np.array([1.5, -2.0, 0.25], dtype=np.float32))
        out = T.conv2d(x, k, b)
        for f in range(3):
            np.testing.assert_allclose(out.data[:, f], b.data[f], rtol=1e-6)

    @pytest.mark.parametrize("stride,padding", [(1, "valid"), (2, "valid"), (1, "same"), (2, "same")])
    def test_matches_loop_oracle(self, rng, stride, padding):
        x = Tensor(rng.normal(size=(2, 3, 7, 6)), dtype=np.float64)
        k = Tensor(rng.normal(size=(4, 3, 3, 3)), dtype=np.float64)
        b = Tensor(rng.normal(size=4), dtype=np.float64)
        out = T.conv2d(x, k, b, stride=stride, padding=padding)
        # reproduce the padding split independently: floor/ceil, extra bottom/right
        if padding == "same":
            oh = -(-7 // stride)
            ow = -(-6 // stride)
            ph = max((oh - 1) * stride + 3 - 7, 0)
            pw = max((ow - 1) * stride + 3 - 6, 0)
            pads = (ph // 2, ph - ph // 2, pw // 2, pw - pw // 2)
        else:
            pads = (0, 0, 0, 0)
        expected = naive_conv2d(x.data, k.data, b.data, stride=stride, pads=pads)
        assert out.shape == expected.shape
        np.testing.assert_allclose(out.data, expected, rtol=1e-10, atol=1e-12)

    def test_output_shape_formula(self):
        # H' = floor((H + pad_total - k)/stride) + 1
        assert T.conv_output_hw(80, 80, 3, 1, "same") == (80, 80)
        assert T.conv_output_hw(7, 7, 3, 2, "valid") == (3, 3)
        assert T.conv_output_hw(5, 5, 2, 2, "same") == (3, 3)

    def test_channel_mismatch_names_both_shapes(self):
        x = Tensor(np.zeros((1, 2, 4, 4)))
        k = Tensor(np.zeros((1, 3, 2, 2)))
        b = Tensor(np.zeros(1))
        with pytest.raises(ShapeError) as exc:
            T.conv2d(x, k, b)
        assert "(1, 2, 4, 4)" in str(exc.value) and "(1, 3, 2, 2)" in str(exc.value)

    def test_kernel_larger_than_input_rejected(self):
        x = Tensor(np.zeros((1, 1, 2, 2)))
        k = Tensor(np.zeros((1, 1, 3, 3)))
        with pytest.raises(ShapeError):
            T.conv2d(x, k, Tensor(np.zeros(1)), padding="valid")

    def test_linearity_zero_bias(self, rng):
        x = Tensor(rng.normal(size=(1, 2, 6, 6)).astype(np.float32))
        y = Tensor(rng.normal(size=(1, 2, 6, 6)).astype(np.float32))
        k = Tensor(rng.normal(size=(3, 2, 3, 3)).astype(np.float32))
        b = Tensor(np.zeros(3, dtype=np.float32))
        a, c = 1.7, -0.6
        lhs = T.conv2d(Tensor(a * x.data + c * y.data), k, b, padding="same")
        rhs = a * T.conv2d(x, k, b, padding="same").data + c * T.conv2d(y, k, b, padding="same").data
        np.testing.assert_allclose(lhs.data, rhs, atol=1e-5)

    def test_deterministic_across_runs(self, rng):
        x = Tensor(rng.normal(size=(2, 3, 10, 10)).astype(np.float32))
        k = Tensor(rng.normal(size=(4, 3, 3, 3)).astype(np.float32))
        b = Tensor(rng.normal(size=4).astype(np.float32))
        one = T.conv2d(x, k, b, padding="same")
        two = T.conv2d(x, k, b, padding="same")
        assert one.data.tobytes() == two.data.tobytes()


class TestMaxpool:
    def test_hand_example(self):
        x = Tensor([[[[1, 2], [3, 4]]]], dtype=np.float32)
        out = T.maxpool2d(x, window=2, stride=2)
        np.testing.assert_array_equal(out.data, [[[[4]]]])

    def test_constant_input(self):
        x = Tensor(np.full((1, 2, 4, 4), 3.25, dtype=np.float32))
        out = T.maxpool2d(x, 2, 2)
        np.testing.assert_array_equal(out.data, np.full((1, 2, 2, 2), 3.25, dtype=np.float32))

    def test_matches_window_scan_oracle(self, rng):
        x = Tensor(rng.normal(size=(1, 1, 6, 6)), dtype=np.float64)
        out = T.maxpool2d(x, 2, 2)
        np.testing.assert_array_equal(out.data, naive_maxpool2d(x.data, 2, 2))

    @pytest.mark.parametrize("window,stride", [(2, 1), (3, 2), (3, 3)])
    def test_overlapping_and_odd_windows(self, rng, window, stride):
        x = Tensor(rng.normal(size=(2, 3, 7, 9)), dtype=np.float64)
        out = T.maxpool2d(x, window, stride)
        np.testing.assert_array_equal(out.data, naive_maxpool2d(x.data, window, stride))

    def test_window_too_large_rejected(self):
        with pytest.raises(ShapeError):
            T.maxpool2d(Tensor(np.zeros((1, 1, 3, 3))), window=4, stride=1)


class TestGlobalAvgPool:
    def test_hand_example(self):
        out = T.global_avg_pool2d(Tensor([[[[1, 2], [3, 4]]]], dtype=np.float32))
        np.testing.assert_allclose(out.data, [[2.5]])

    def test_constant_input(self):
        x = Tensor(np.full((2, 3, 5, 5), -1.5, dtype=np.float32))
        np.testing.assert_allclose(T.global_avg_pool2d(x).data, -1.5)

    def test_matches_summation_oracle(self, rng):
        x = Tensor(rng.normal(size=(1, 3, 4, 4)), dtype=np.float64)
        np.testing.assert_allclose(T.global_avg_pool2d(x).data, naive_gap(x.data), rtol=1e-12)


class TestDense:
    def test_identity_weights(self):
        x = Tensor(np.arange(6, dtype=np.float32).reshape(2, 3))
        out = T.dense(x, Tensor(np.eye(3, dtype=np.float32)), Tensor(np.zeros(3, dtype=np.float32)))
        np.testing.assert_array_equal(out.data, x.data)

    def test_hand_example(self):
        x = Tensor([[1.0, 2.0]])
        w = Tensor([[1.0, 0.0], [0.0, 1.0]])
        b = Tensor([10.0, 20.0])
        np.testing.assert_allclose(T.dense(x, w, b).data, [[11.0, 22.0]])

    def test_matches_matmul_oracle(self, rng):
        x = Tensor(rng.normal(size=(2, 3)), dtype=np.float64)
        w = Tensor(rng.normal(size=(3, 4)), dtype=np.float64)
        b = Tensor(np.zeros(4), dtype=np.float64)
        np.testing.assert_allclose(T.dense(x, w, b).data, naive_matmul(x.data, w.data), rtol=1e-12)

    def test_inner_dim_mismatch(self):
        with pytest.raises(ShapeError):
            T.dense(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 5))), Tensor(np.zeros(5)))


class TestActivationsAndReshaping:
    def test_relu(self):
        out = T.relu(Tensor([-1.0, 2.0, 0.0]))
        np.testing.assert_array_equal(out.data, [0.0, 2.0, 0.0])

    def test_softmax_uniform(self):
        out = T.softmax(Tensor([[0.0, 0.0, 0.0]]))
        np.testing.assert_allclose(out.data, [[1 / 3, 1 / 3, 1 / 3]], rtol=1e-6)

    def test_softmax_large_values_no_overflow(self):
        out = T.softmax(Tensor([[1000.0, 1000.0, 1000.0]]))
        assert out.all_finite()
        np.testing.assert_allclose(out.data, [[1 / 3, 1 / 3, 1 / 3]], rtol=1e-6)

    def test_softmax_rows_sum_to_one_and_positive(self, rng):
        x = Tensor(rng.normal(scale=20, size=(40, 7)).astype(np.float32))
        p = T.softmax(x)
        np.testing.assert_allclose(p.data.sum(axis=1), 1.0, atol=1e-6)
        assert (p.data > 0).all()

    def test_concat_preserves_order_and_splits_back(self, rng):
        parts = [Tensor(rng.normal(size=(3, d)).astype(np.float32)) for d in (2, 5, 1)]
        merged = T.concat(parts)
        assert merged.shape == (3, 8)
        recovered = T.split_columns(merged, [2, 5, 1])
        for orig, back in zip(parts, recovered):
            np.testing.assert_array_equal(orig.data, back.data)

    def test_concat_empty_rejected(self):
        with pytest.raises(ShapeError):
            T.concat([])

    def test_concat_mismatched_lead_rejected(self):
        with pytest.raises(ShapeError):
            T.concat([Tensor(np.zeros((2, 3))), Tensor(np.zeros((3, 3)))])

    def test_flatten_row_major(self):
        x = Tensor(np.arange(24, dtype=np.float32).reshape(2, 3, 2, 2))
        out = T.flatten(x)
        assert out.shape == (2, 12)
        np.testing.assert_array_equal(out.data[0], np.arange(12, dtype=np.float32))

    def test_forward_ops_finite_on_finite_inputs(self, rng):
        x = Tensor(rng.normal(scale=50, size=(2, 3, 8, 8)).astype(np.float32))
        k = Tensor(rng.normal(size=(4, 3, 3, 3)).astype(np.float32))
        b = Tensor(rng.normal(size=4).astype(np.float32))
        h = T.conv2d(x, k, b, padding="same")
        for t in (h, T.relu(h), T.maxpool2d(h, 2, 2), T.global_avg_pool2d(h)):
            assert t.all_finite()


class TestTensorType:
    def test_default_dtype_is_float32(self):
        assert Tensor([1, 2, 3]).dtype == np.float32

    def test_float64_selectable(self):
        assert Tensor([1.0], dtype=np.float64).dtype == np.float64

    def test_shape_data_consistency(self, rng):
        t = Tensor(rng.normal(size=(2, 3, 4)))
        assert t.size == 24 and t.data.size == int(np.prod(t.shape))

    def test_nonfinite_detectable(self):
        assert not Tensor([np.nan, 1.0]).all_finite()
        assert not Tensor([np.inf]).all_finite()
        assert Tensor([1.0, -2.0]).all_finite()
