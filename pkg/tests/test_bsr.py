import struct
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from subp.blocks import apply_mask
from subp.bsr import (
    BsrLayer,
    BsrModel,
    DenseLayer,
    decode,
    decode_mask,
    deserialize,
    encode,
    export_model,
    serialize,
    storage_footprint,
    to_tinynet,
)
from subp.errors import FormatError, InvariantError, ShapeError
from subp.model import TinyNet
from subp.pruning import prune_mask

GOLDEN = Path(__file__).parent / "golden" / "one_layer.subp"


def golden_weights():
    # W[c, k] = 4c + k + 1
    return (np.arange(4)[:, None] * 4 + np.arange(3)[None, :] + 1).astype(np.float32).reshape(4, 3, 1, 1)


def golden_layer():
    mask = np.array([[1, 0, 1], [0, 1, 1]], np.uint8)
    return encode(golden_weights(), mask, 2, np.array([0.5, -0.5, 0.25, -0.25]))


def hand_bytes():
    return b"".join([
        b"SUBP1xN\0", struct.pack("<II", 1, 1),
        struct.pack("<B6I", 1, 2, 4, 3, 1, 1, 2),
        struct.pack("<4I", 0, 2, 1, 2),
        # blocks (0,0), (0,2), (1,1), (1,2) read down their two output channels
        struct.pack("<8f", 1, 5, 3, 7, 10, 14, 11, 15),
        struct.pack("<4f", 0.5, -0.5, 0.25, -0.25),
    ])


def random_uniform_layer(seed, c_out=8, c_in=6, k=(3, 3), n=4, p=0.5):
    rng = np.random.default_rng(seed)
    w = rng.standard_normal((c_out, c_in, *k)).astype(np.float32)
    mask = prune_mask(rng.standard_normal((c_out // n, c_in)), p)
    return w, mask, encode(w, mask, n, rng.standard_normal(c_out))


class TestEncode:
    def test_all_ones(self):
        w = np.random.default_rng(0).standard_normal((4, 3, 2, 2)).astype(np.float32)
        layer = encode(w, np.ones((2, 3), np.uint8), 2)
        assert layer.kept == 3
        np.testing.assert_array_equal(layer.col_indices, [0, 1, 2, 0, 1, 2])
        np.testing.assert_array_equal(decode(layer), w)

    def test_read_off_indices(self):
        w = np.ones((2, 4, 1, 1), np.float32)
        layer = encode(w, np.array([[1, 0, 1, 0], [0, 1, 0, 1]]), 1)
        np.testing.assert_array_equal(layer.col_indices, [0, 2, 1, 3])

    def test_round_trip_equals_masked(self):
        for seed in range(5):
            w, mask, layer = random_uniform_layer(seed)
            assert np.array_equal(decode(layer), apply_mask(w, mask))
            np.testing.assert_array_equal(decode_mask(layer), mask)

    @settings(max_examples=40, deadline=None)
    @given(st.sampled_from([1, 2, 4]), st.integers(1, 3), st.integers(1, 7), st.sampled_from([0.25, 0.5, 0.75]),
           st.integers(0, 1000))
    def test_round_trip_property(self, n, g, c_in, p, seed):
        w, mask, layer = random_uniform_layer(seed, n * g, c_in, (2, 1), n, p)
        assert np.array_equal(decode(layer), apply_mask(w, mask))

    def test_non_uniform_rejected(self):
        with pytest.raises(InvariantError):
            encode(np.ones((4, 3, 1, 1)), np.array([[1, 1, 0], [1, 0, 0]]), 2)

    def test_grid_mismatch(self):
        with pytest.raises(ShapeError):
            encode(np.ones((4, 3, 1, 1)), np.ones((2, 4)), 2)

    def test_panels_layout(self):
        layer = golden_layer()
        np.testing.assert_array_equal(layer.panels[0], [[1, 3], [5, 7]])
        np.testing.assert_array_equal(layer.gather_index[1], [1, 2])
        assert layer.row_ptr(1) == 2


class TestValidation:
    def test_bad_indices(self):
        with pytest.raises(FormatError):
            BsrLayer(2, 4, 3, 1, 1, 2, np.array([2, 0, 1, 2], np.uint32), np.zeros(8, np.float32),
                     np.zeros(4, np.float32))
        with pytest.raises(FormatError):
            BsrLayer(2, 4, 3, 1, 1, 2, np.array([0, 3, 1, 2], np.uint32), np.zeros(8, np.float32),
                     np.zeros(4, np.float32))

    def test_bad_lengths(self):
        with pytest.raises(FormatError):
            BsrLayer(2, 4, 3, 1, 1, 2, np.array([0, 1, 1, 2], np.uint32), np.zeros(7, np.float32),
                     np.zeros(4, np.float32))

    def test_shapes_must_chain(self):
        with pytest.raises(ShapeError):
            BsrModel((DenseLayer(np.zeros((4, 3, 1, 1), np.float32), np.zeros(4, np.float32)),
                      DenseLayer(np.zeros((2, 5, 1, 1), np.float32), np.zeros(2, np.float32))))


class TestSerialize:
    def test_empty_model(self):
        data = serialize(BsrModel(()))
        assert len(data) == 16
        assert deserialize(data).layers == ()

    def test_golden_bytes(self):
        data = serialize(BsrModel((golden_layer(),)))
        assert data == hand_bytes()
        assert data == GOLDEN.read_bytes()

    def test_golden_file_decodes(self):
        (layer,) = deserialize(GOLDEN.read_bytes()).layers
        np.testing.assert_array_equal(decode(layer), apply_mask(golden_weights(), decode_mask(layer)))

    def test_round_trip_byte_identical(self):
        net = TinyNet.create(3, [8, 8, 12], 5, np.random.default_rng(0))
        rng = np.random.default_rng(1)
        masks = {"conv2": prune_mask(rng.random((2, 8)), 0.5), "conv3": prune_mask(rng.random((3, 8)), 0.75)}
        first = serialize(export_model(net, masks, 4))
        again = serialize(deserialize(first))
        assert first == again

    def test_to_tinynet(self):
        net = TinyNet.create(3, [8, 8], 5, np.random.default_rng(0))
        masks = {"conv2": prune_mask(np.random.default_rng(2).random((2, 8)), 0.5)}
        back, back_masks = to_tinynet(deserialize(serialize(export_model(net, masks, 4))))
        np.testing.assert_array_equal(back_masks["conv2"], masks["conv2"])
        np.testing.assert_array_equal(back.convs[0].weight, net.convs[0].weight)
        np.testing.assert_array_equal(back.convs[1].weight, apply_mask(net.convs[1].weight, masks["conv2"]))
        np.testing.assert_array_equal(back.fc_weight, net.fc_weight)

    def test_bad_magic(self):
        data = bytearray(hand_bytes())
        data[0] = ord("X")
        with pytest.raises(FormatError, match="offset 0"):
            deserialize(bytes(data))

    def test_bad_version(self):
        data = bytearray(hand_bytes())
        data[8] = 2
        with pytest.raises(FormatError, match="version 2 at offset 8"):
            deserialize(bytes(data))

    @pytest.mark.parametrize("cut", [4, 12, 20, 40, 60, 104])
    def test_truncated(self, cut):
        with pytest.raises(FormatError, match="offset"):
            deserialize(hand_bytes()[:cut])

    def test_trailing_bytes(self):
        with pytest.raises(FormatError, match="trailing"):
            deserialize(hand_bytes() + b"\0")

    def test_unknown_kind(self):
        data = bytearray(hand_bytes())
        data[16] = 7
        with pytest.raises(FormatError, match="kind 7 at offset 16"):
            deserialize(bytes(data))

    def test_corrupt_index(self):
        data = bytearray(hand_bytes())
        data[41] = 9  # first column index of row group 0 becomes 9 >= C_in
        with pytest.raises(FormatError, match="offset 16"):
            deserialize(bytes(data))


class TestStorage:
    def test_dense_equivalent(self):
        w = np.ones((8, 4, 3, 3), np.float32)
        v, i, d = storage_footprint(encode(w, np.ones((2, 4)), 4))
        assert v == d == 4 * 8 * 4 * 9
        assert i == 4 * 8

    @pytest.mark.parametrize("p", [0.25, 0.5, 0.75])
    def test_value_ratio(self, p):
        _, _, layer = random_uniform_layer(0, 32, 16, (3, 3), 8, p)
        v, _, d = storage_footprint(layer)
        assert v / d == 1 - p

    def test_index_overhead(self):
        _, _, layer = random_uniform_layer(0, 32, 16, (3, 3), 16, 0.75)
        v, i, _ = storage_footprint(layer)
        assert i / v == 1 / 144

    def test_overhead_decreases_with_n(self):
        overhead = []
        for n in (2, 4, 8, 16, 32):
            _, _, layer = random_uniform_layer(0, 64, 16, (3, 3), n, 0.5)
            v, i, _ = storage_footprint(layer)
            assert v == 4 * 64 * 8 * 9  # same kept weights for every N
            overhead.append(i / v)
        assert all(a > b for a, b in zip(overhead, overhead[1:]))
