"""Deterministic synthetic image classification data and its raw binary layout.

Every class c gets a template image T_c drawn once from the seeded
generator; samples are clip(T_c + sigma * noise, 0, 1). Each class is split
80/20 into train/val, so both splits stay class-balanced.

Raw layout (all little-endian):

    magic       8 bytes  b"SUBPDS1\\0"
    version     u32      1
    count       u32      number of samples
    channels    u32
    height      u32
    width       u32
    num_classes u32
    num_train   u32      the first num_train samples form the train split
    labels      u32 * count
    images      f32 * count * channels * height * width   (NCHW)
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, FormatError

MAGIC = b"SUBPDS1\0"
VERSION = 1
_HEADER = struct.Struct("<8s7I")


@dataclass
class Dataset:
    x_train: np.ndarray
    y_train: np.ndarray
    x_val: np.ndarray
    y_val: np.ndarray
    num_classes: int

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return tuple(self.x_train.shape[1:])


def make_synthetic(seed: int, image_size: int = 8, channels: int = 3, num_classes: int = 8,
                   num_samples: int = 800, noise_sigma: float = 0.35) -> Dataset:
    if num_samples % num_classes:
        raise ConfigError(f"num_samples={num_samples} must be a multiple of num_classes={num_classes}")
    per_class = num_samples // num_classes
    n_train = (per_class * 4) // 5
    if n_train < 1 or n_train == per_class:
        raise ConfigError(f"{per_class} samples per class is too few for an 80/20 split")
    rng = np.random.default_rng(seed)
    shape = (channels, image_size, image_size)
    templates = rng.random((num_classes, *shape))
    xs_tr, ys_tr, xs_va, ys_va = [], [], [], []
    for c in range(num_classes):
        noise = rng.standard_normal((per_class, *shape))
        x = np.clip(templates[c] + noise_sigma * noise, 0.0, 1.0).astype(np.float32)
        xs_tr.append(x[:n_train])
        xs_va.append(x[n_train:])
        ys_tr.append(np.full(n_train, c))
        ys_va.append(np.full(per_class - n_train, c))
    x_tr, y_tr = np.concatenate(xs_tr), np.concatenate(ys_tr)
    x_va, y_va = np.concatenate(xs_va), np.concatenate(ys_va)
    order_tr = rng.permutation(len(y_tr))
    order_va = rng.permutation(len(y_va))
    return Dataset(x_tr[order_tr], y_tr[order_tr].astype(np.int64),
                   x_va[order_va], y_va[order_va].astype(np.int64), num_classes)


def save_raw(ds: Dataset, path) -> None:
    x = np.concatenate([ds.x_train, ds.x_val]).astype("<f4")
    y = np.concatenate([ds.y_train, ds.y_val]).astype("<u4")
    count, c, h, w = x.shape
    header = _HEADER.pack(MAGIC, VERSION, count, c, h, w, ds.num_classes, len(ds.y_train))
    Path(path).write_bytes(header + y.tobytes() + x.tobytes())


def load_raw(path) -> Dataset:
    buf = Path(path).read_bytes()
    if len(buf) < _HEADER.size:
        raise FormatError(f"dataset truncated at offset {len(buf)}: header needs {_HEADER.size} bytes")
    magic, version, count, c, h, w, k, n_train = _HEADER.unpack_from(buf)
    if magic != MAGIC:
        raise FormatError("bad dataset magic at offset 0")
    if version != VERSION:
        raise FormatError(f"unsupported dataset version {version} at offset 8")
    need = _HEADER.size + 4 * count + 4 * count * c * h * w
    if len(buf) != need:
        raise FormatError(f"dataset size {len(buf)} bytes, header implies {need}")
    y = np.frombuffer(buf, "<u4", count, _HEADER.size).astype(np.int64)
    x = np.frombuffer(buf, "<f4", count * c * h * w, _HEADER.size + 4 * count)
    x = x.reshape(count, c, h, w).astype(np.float32)
    if count and y.max() >= k:
        raise FormatError(f"label {y.max()} out of range for {k} classes")
    return Dataset(x[:n_train], y[:n_train], x[n_train:], y[n_train:], k)
