"""Block Sparse Row storage for uniformly 1xN-sparse conv layers, and the .subp file.

Every row group keeps the same number K of blocks, so row pointers are
implicit (row group j starts at j*K) and only column indices are stored.
See docs/format.md for the byte layout.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from functools import cached_property

import numpy as np

from .blocks import BlockPartition, assemble, assert_uniform, block_matrix, partition
from .errors import FormatError, ShapeError
from .model import TinyNet
from .tensor import ConvLayerParams

MAGIC = b"SUBP1xN\0"
VERSION = 1
KIND_DENSE = 0
KIND_BSR = 1


@dataclass(frozen=True, eq=False)
class DenseLayer:
    weight: np.ndarray  # (C_out, C_in, Kh, Kw) float32
    bias: np.ndarray

    def __post_init__(self):
        if self.weight.ndim != 4 or self.bias.shape != (self.weight.shape[0],):
            raise ShapeError(f"dense layer weight {self.weight.shape} / bias {self.bias.shape} mismatch")

    @property
    def shape(self):
        return self.weight.shape


@dataclass(frozen=True, eq=False)
class BsrLayer:
    n: int
    c_out: int
    c_in: int
    kh: int
    kw: int
    kept: int
    col_indices: np.ndarray  # uint32, (C_out/N)*K, row-group-major
    values: np.ndarray  # float32, blocks * N*Kh*Kw, block vector order
    bias: np.ndarray  # float32, C_out

    def __post_init__(self):
        if min(self.n, self.c_out, self.c_in, self.kh, self.kw) < 1 or self.c_out % self.n:
            raise FormatError(f"bad BSR geometry N={self.n} C_out={self.c_out} C_in={self.c_in}")
        if not 0 <= self.kept <= self.c_in:
            raise FormatError(f"kept_per_group={self.kept} outside [0, C_in={self.c_in}]")
        g = self.num_row_groups
        if self.col_indices.shape != (g * self.kept,):
            raise FormatError(f"expected {g * self.kept} column indices, got {self.col_indices.size}")
        if self.values.shape != (g * self.kept * self.block_len,):
            raise FormatError(f"expected {g * self.kept * self.block_len} values, got {self.values.size}")
        if self.bias.shape != (self.c_out,):
            raise FormatError(f"expected {self.c_out} bias values, got {self.bias.size}")
        cols = self.cols.astype(np.int64)
        if cols.size and (cols.max() >= self.c_in or (self.kept > 1 and (np.diff(cols, axis=1) <= 0).any())):
            raise FormatError("column indices must be < C_in and strictly ascending within each row group")

    @property
    def num_row_groups(self) -> int:
        return self.c_out // self.n

    @property
    def block_len(self) -> int:
        return self.n * self.kh * self.kw

    @property
    def num_blocks(self) -> int:
        return self.num_row_groups * self.kept

    @property
    def shape(self):
        return (self.c_out, self.c_in, self.kh, self.kw)

    @property
    def partition(self) -> BlockPartition:
        return BlockPartition(self.n, self.c_out, self.c_in, self.kh, self.kw)

    @property
    def cols(self) -> np.ndarray:
        """Column indices as a (G, K) view."""
        return self.col_indices.reshape(self.num_row_groups, self.kept)

    def row_ptr(self, j: int) -> int:
        return j * self.kept

    @cached_property
    def panels(self) -> np.ndarray:
        """Per row group weight panel (G, N, K*Kh*Kw), columns ordered (k, kh, kw)."""
        g, kk = self.num_row_groups, self.kh * self.kw
        v = self.values.reshape(g, self.kept, self.n, kk).transpose(0, 2, 1, 3)
        return np.ascontiguousarray(v).reshape(g, self.n, self.kept * kk)

    @cached_property
    def gather_index(self) -> np.ndarray:
        """Rows of the transposed im2col matrix each row group reads, (G, K*Kh*Kw)."""
        kk = self.kh * self.kw
        idx = self.cols.astype(np.intp)[:, :, None] * kk + np.arange(kk)
        return idx.reshape(self.num_row_groups, self.kept * kk)


@dataclass(frozen=True, eq=False)
class BsrModel:
    """Ordered TinyNet layers: convs ('same' padding, stride 1, relu), then the
    classifier stored as a Dense 1x1 record applied after global average pooling."""

    layers: tuple

    def __post_init__(self):
        for a, b in zip(self.layers, self.layers[1:]):
            if b.shape[1] != a.shape[0]:
                raise ShapeError(f"layer shapes do not chain: {a.shape} -> {b.shape}")


def encode(weights: np.ndarray, mask: np.ndarray, n: int | None = None, bias=None) -> BsrLayer:
    """Pack the kept blocks of a uniformly masked layer."""
    c_out, c_in, kh, kw = weights.shape
    n = c_out // mask.shape[0] if n is None else n
    part = partition(weights, n)
    if mask.shape != part.grid:
        raise ShapeError(f"mask grid {mask.shape} does not match block grid {part.grid}")
    k = assert_uniform(mask)
    cols = np.stack([np.flatnonzero(row) for row in mask]) if part.num_row_groups else np.zeros((0, k))
    cols = cols.reshape(part.num_row_groups, k)
    blocks = block_matrix(weights, n)
    vals = np.take_along_axis(blocks, cols[:, :, None].astype(np.intp), axis=1)
    bias = np.zeros(c_out, np.float32) if bias is None else np.asarray(bias, np.float32)
    return BsrLayer(n, c_out, c_in, kh, kw, k, cols.astype(np.uint32).ravel(),
                    np.ascontiguousarray(vals, dtype=np.float32).ravel(), bias.copy())


def decode(layer: BsrLayer) -> np.ndarray:
    g, l = layer.num_row_groups, layer.block_len
    blocks = np.zeros((g, layer.c_in, l), dtype=np.float32)
    vals = layer.values.reshape(g, layer.kept, l)
    np.put_along_axis(blocks, layer.cols.astype(np.intp)[:, :, None], vals, axis=1)
    return assemble(blocks, layer.partition)


def decode_mask(layer: BsrLayer) -> np.ndarray:
    mask = np.zeros((layer.num_row_groups, layer.c_in), dtype=np.uint8)
    np.put_along_axis(mask, layer.cols.astype(np.intp), 1, axis=1)
    return mask


def storage_footprint(layer: BsrLayer) -> tuple[int, int, int]:
    """(value_bytes, index_bytes, dense_bytes) with 4-byte values and indices."""
    blocks = layer.num_blocks
    return (4 * blocks * layer.block_len, 4 * blocks,
            4 * layer.c_out * layer.c_in * layer.kh * layer.kw)


def export_model(model, masks: dict, n: int) -> BsrModel:
    """Masked conv layers become BSR records; all others stay dense."""
    layers = []
    for name, c in zip(model.layer_names, model.convs):
        if name in masks:
            layers.append(encode(c.weight, masks[name], n, c.bias))
        else:
            layers.append(DenseLayer(c.weight.astype(np.float32), c.bias.astype(np.float32)))
    k, c = model.fc_weight.shape
    layers.append(DenseLayer(model.fc_weight.reshape(k, c, 1, 1).astype(np.float32), model.fc_bias.astype(np.float32)))
    return BsrModel(tuple(layers))


def to_tinynet(bsr_model: BsrModel):
    """Rebuild a dense TinyNet (decoded weights) plus the masks implied by BSR records."""
    convs, masks = [], {}
    *conv_layers, fc = bsr_model.layers
    for i, layer in enumerate(conv_layers):
        if isinstance(layer, BsrLayer):
            w = decode(layer)
            masks[f"conv{i + 1}"] = decode_mask(layer)
        else:
            w = layer.weight.copy()
        convs.append(ConvLayerParams(w, layer.bias.copy(), stride=1, padding=w.shape[2] // 2))
    if not isinstance(fc, DenseLayer) or fc.shape[2:] != (1, 1):
        raise FormatError("last layer must be the dense 1x1 classifier")
    return TinyNet(convs, fc.weight.reshape(fc.shape[:2]).copy(), fc.bias.copy()), masks


def serialize(model: BsrModel) -> bytes:
    out = [MAGIC, struct.pack("<II", VERSION, len(model.layers))]
    for layer in model.layers:
        if isinstance(layer, BsrLayer):
            out.append(struct.pack("<B6I", KIND_BSR, layer.n, layer.c_out, layer.c_in,
                                   layer.kh, layer.kw, layer.kept))
            out.append(layer.col_indices.astype("<u4").tobytes())
            out.append(layer.values.astype("<f4").tobytes())
        elif isinstance(layer, DenseLayer):
            out.append(struct.pack("<B4I", KIND_DENSE, *layer.shape))
            out.append(layer.weight.astype("<f4").tobytes())
        else:
            raise FormatError(f"cannot serialize layer of type {type(layer).__name__}")
        out.append(layer.bias.astype("<f4").tobytes())
    return b"".join(out)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, size: int, what: str) -> bytes:
        end = self.pos + size
        if end > len(self.buf):
            raise FormatError(f"truncated at offset {self.pos}: need {size} bytes for {what}, "
                              f"have {len(self.buf) - self.pos}")
        chunk = self.buf[self.pos : end]
        self.pos = end
        return chunk

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))

    def array(self, dtype: str, count: int, what: str) -> np.ndarray:
        raw = self.take(4 * count, what)
        native = np.float32 if dtype == "<f4" else np.uint32
        return np.frombuffer(raw, dtype).astype(native)


def deserialize(buf: bytes) -> BsrModel:
    r = _Reader(buf)
    if r.take(8, "magic") != MAGIC:
        raise FormatError("bad magic at offset 0")
    (version,) = r.unpack("<I", "format version")
    if version != VERSION:
        raise FormatError(f"unsupported format version {version} at offset 8")
    (count,) = r.unpack("<I", "layer count")
    layers = []
    for i in range(count):
        start = r.pos
        (kind,) = r.unpack("<B", f"layer {i} kind")
        try:
            if kind == KIND_BSR:
                n, c_out, c_in, kh, kw, kept = r.unpack("<6I", f"layer {i} header")
                if n == 0 or c_out % n:
                    raise FormatError(f"layer {i} at offset {start}: C_out={c_out} not divisible by N={n}")
                blocks = (c_out // n) * kept
                cols = r.array("<u4", blocks, f"layer {i} column indices")
                vals = r.array("<f4", blocks * n * kh * kw, f"layer {i} values")
                bias = r.array("<f4", c_out, f"layer {i} bias")
                layers.append(BsrLayer(n, c_out, c_in, kh, kw, kept, cols, vals, bias))
            elif kind == KIND_DENSE:
                shape = r.unpack("<4I", f"layer {i} header")
                w = r.array("<f4", int(np.prod(shape)), f"layer {i} weights").reshape(shape)
                bias = r.array("<f4", shape[0], f"layer {i} bias")
                layers.append(DenseLayer(w, bias))
            else:
                raise FormatError(f"unknown layer kind {kind} at offset {start}")
        except (ShapeError, FormatError) as exc:
            if "offset" in str(exc):
                raise
            raise FormatError(f"layer {i} at offset {start}: {exc}") from None
    if r.pos != len(buf):
        raise FormatError(f"{len(buf) - r.pos} trailing bytes at offset {r.pos}")
    try:
        return BsrModel(tuple(layers))
    except ShapeError as exc:
        raise FormatError(str(exc)) from None
