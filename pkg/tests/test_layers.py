"""Layer units: channel bookkeeping, feature preservation, shape contracts."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from crossdense.errors import ShapeError
from crossdense.layers import DenseBlock, DenseLayer, Head, Stem, TransitionLayer
from crossdense.tensor import Tensor


def rng(seed=0):
    return np.random.default_rng(seed)


class TestDenseLayer:
    def test_adds_growth_rate_channels_and_preserves_input(self):
        layer = DenseLayer(4, 3, rng(1), np.float32)
        x = rng(2).random((2, 4, 5, 5)).astype(np.float32)
        out = layer.forward(Tensor(x), "eval")
        assert out.shape == (2, 7, 5, 5)
        np.testing.assert_array_equal(out.data[:, :4], x)

    def test_zero_conv_weights_give_zero_new_channels(self):
        layer = DenseLayer(4, 3, rng(1), np.float32)
        layer.conv_w.data[...] = 0
        x = rng(3).random((1, 4, 4, 4)).astype(np.float32)
        out = layer.forward(Tensor(x), "eval")
        np.testing.assert_array_equal(out.data[:, 4:], 0)

    def test_channel_mismatch(self):
        layer = DenseLayer(4, 3, rng(1), np.float32)
        with pytest.raises(ShapeError, match="4"):
            layer.forward(Tensor(rng(0).random((1, 5, 4, 4))), "eval")


class TestDenseBlock:
    def test_channel_formula(self):
        block = DenseBlock(8, 4, 3, 0.0, rng(2), np.float32)
        x = rng(4).random((2, 8, 4, 4)).astype(np.float32)
        out = block.forward(Tensor(x), "eval")
        assert out.shape == (2, 8 + 3 * 4, 4, 4)

    def test_zero_layers_is_identity(self):
        block = DenseBlock(8, 4, 0, 0.0, rng(2), np.float32)
        x = rng(5).random((1, 8, 3, 3)).astype(np.float32)
        out = block.forward(Tensor(x), "eval")
        np.testing.assert_array_equal(out.data, x)

    def test_intermediate_slices_replay(self):
        # the block's output prefix must equal each layer's own output when
        # the layers are replayed one by one
        block = DenseBlock(6, 2, 3, 0.0, rng(6), np.float32)
        x = Tensor(rng(7).random((2, 6, 4, 4)).astype(np.float32))
        full = block.forward(x, "eval").data

        cur = x
        for i, layer in enumerate(block.layers):
            cur = layer.forward(cur, "eval")
            c = cur.shape[1]
            np.testing.assert_array_equal(full[:, :c], cur.data,
                                          err_msg=f"slice after layer {i}")

    def test_mismatch_names_layer_index(self):
        block = DenseBlock(6, 2, 2, 0.0, rng(6), np.float32)
        block.layers[1] = DenseLayer(99, 2, rng(6), np.float32)
        with pytest.raises(ShapeError, match="layer 1"):
            block.forward(Tensor(rng(0).random((1, 6, 4, 4))), "eval")

    def test_first_channels_bit_identical(self):
        block = DenseBlock(5, 3, 2, 0.0, rng(8), np.float32)
        x = rng(9).random((2, 5, 6, 6)).astype(np.float32)
        out = block.forward(Tensor(x), "eval")
        np.testing.assert_array_equal(out.data[:, :5], x)

    @given(st.integers(1, 6), st.integers(1, 5), st.integers(0, 4),
           st.integers(0, 2**31 - 1))
    @settings(max_examples=25, deadline=None)
    def test_channel_bookkeeping_property(self, c0, k, n_layers, seed):
        block = DenseBlock(c0, k, n_layers, 0.0,
                           np.random.default_rng(seed), np.float32)
        x = np.random.default_rng(seed + 1).random((1, c0, 3, 3)).astype(np.float32)
        out = block.forward(Tensor(x), "eval")
        assert out.shape[1] == c0 + n_layers * k
        np.testing.assert_array_equal(out.data[:, :c0], x)


class TestTransition:
    def test_shape_contract(self):
        trans = TransitionLayer(32, 0.5, rng(10), np.float32)
        x = rng(11).random((2, 32, 16, 16)).astype(np.float32)
        assert trans.forward(Tensor(x), "eval").shape == (2, 16, 8, 8)

    def test_full_compression_preserves_channels(self):
        trans = TransitionLayer(10, 1.0, rng(12), np.float32)
        x = rng(13).random((1, 10, 4, 4)).astype(np.float32)
        assert trans.forward(Tensor(x), "eval").shape == (1, 10, 2, 2)

    def test_odd_spatial_rejected(self):
        trans = TransitionLayer(4, 0.5, rng(14), np.float32)
        with pytest.raises(ShapeError, match="even"):
            trans.forward(Tensor(rng(0).random((1, 4, 5, 6))), "eval")

    def test_floor_of_theta_cin(self):
        trans = TransitionLayer(7, 0.5, rng(15), np.float32)
        assert trans.cout == 3


class TestStem:
    def test_32_to_8(self):
        stem = Stem(3, 16, rng(16), np.float32)
        x = rng(17).random((1, 3, 32, 32)).astype(np.float32)
        assert stem.forward(Tensor(x), "eval").shape == (1, 16, 8, 8)

    def test_64_to_16(self):
        stem = Stem(3, 8, rng(18), np.float32)
        x = rng(19).random((1, 3, 64, 64)).astype(np.float32)
        assert stem.forward(Tensor(x), "eval").shape == (1, 8, 16, 16)

    def test_conv_substep_halves(self):
        # the 7x7 stride-2 pad-3 conv alone: 32 -> 16
        from crossdense import tensor as T
        stem = Stem(3, 4, rng(20), np.float32)
        x = Tensor(rng(21).random((1, 3, 32, 32)).astype(np.float32))
        out = T.conv2d(x, stem.conv_w, stride=2, padding=3)
        assert out.shape == (1, 4, 16, 16)

    def test_too_small_input(self):
        stem = Stem(3, 4, rng(22), np.float32)
        with pytest.raises(ShapeError, match="8x8"):
            stem.forward(Tensor(rng(0).random((1, 3, 6, 6))), "eval")


class TestHead:
    def test_zero_weights_zero_logits(self):
        head = Head(12, 4, rng(23), np.float32)
        head.fc_w.data[...] = 0
        head.fc_b.data[...] = 0
        out = head.forward(Tensor(rng(24).random((3, 12)).astype(np.float32)))
        np.testing.assert_array_equal(out.data, np.zeros((3, 4)))

    def test_identity_weights_pass_features_through(self):
        head = Head(4, 4, rng(25), np.float32)
        head.fc_w.data[...] = np.eye(4)
        head.fc_b.data[...] = 0
        x = rng(26).random((2, 4)).astype(np.float32)
        np.testing.assert_allclose(head.forward(Tensor(x)).data, x, rtol=1e-6)

    def test_dimension_mismatch(self):
        head = Head(12, 4, rng(27), np.float32)
        with pytest.raises(ShapeError, match="12"):
            head.forward(Tensor(rng(0).random((2, 13))))
