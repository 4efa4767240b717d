"""1xN block partition of conv weights and block masks.

A layer with weights of shape (C_out, C_in, Kh, Kw) is cut into row groups of
N consecutive output channels. Block (j, k) is ``W[j*N:(j+1)*N, k]`` and a
mask has one bit per block, shape (C_out // N, C_in).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, InvariantError, ShapeError

# Guards ceil/floor against float round-off such as 10 * (1 - 0.7) = 3.0000000000000004.
_EPS = 1e-9


def kept_per_group(c_in: int, p: float) -> int:
    """Blocks retained per row group at prune rate p, ceil(C_in * (1 - p))."""
    return int(math.ceil(c_in * (1.0 - p) - _EPS))


def regrow_count(c_in: int, delta: float) -> int:
    return int(math.floor(c_in * delta + _EPS))


@dataclass(frozen=True)
class BlockPartition:
    n: int
    c_out: int
    c_in: int
    kh: int
    kw: int

    @property
    def num_row_groups(self) -> int:
        return self.c_out // self.n

    @property
    def num_cols(self) -> int:
        return self.c_in

    @property
    def block_len(self) -> int:
        return self.n * self.kh * self.kw

    @property
    def grid(self) -> tuple[int, int]:
        return self.num_row_groups, self.c_in


def partition(weights: np.ndarray, n: int, name: str = "layer") -> BlockPartition:
    if weights.ndim != 4:
        raise ShapeError(f"{name}: expected 4-D weights, got shape {weights.shape}")
    c_out, c_in, kh, kw = weights.shape
    if n < 1:
        raise ConfigError(f"{name}: block size N must be >= 1, got {n}")
    if c_out % n:
        divisors = [d for d in range(1, c_out + 1) if c_out % d == 0]
        raise ConfigError(
            f"{name}: C_out={c_out} is not divisible by N={n}; valid N values: {divisors}"
        )
    return BlockPartition(n, c_out, c_in, kh, kw)


def block_matrix(weights: np.ndarray, n: int) -> np.ndarray:
    """All block vectors at once, shape (G, C_in, N*Kh*Kw).

    Each vector is flattened output-channel-major, then kernel row, then
    kernel column.
    """
    c_out, c_in, kh, kw = weights.shape
    g = c_out // n
    return weights.reshape(g, n, c_in, kh, kw).transpose(0, 2, 1, 3, 4).reshape(g, c_in, n * kh * kw)


def assemble(blocks: np.ndarray, part: BlockPartition) -> np.ndarray:
    """Inverse of block_matrix."""
    g, c_in, _ = blocks.shape
    w = blocks.reshape(g, c_in, part.n, part.kh, part.kw).transpose(0, 2, 1, 3, 4)
    return np.ascontiguousarray(w.reshape(part.c_out, part.c_in, part.kh, part.kw))


def vectorize(part: BlockPartition, weights: np.ndarray, j: int, k: int) -> np.ndarray:
    if not (0 <= j < part.num_row_groups and 0 <= k < part.num_cols):
        raise IndexError(f"block ({j}, {k}) outside grid {part.grid}")
    return weights[j * part.n : (j + 1) * part.n, k].reshape(-1).copy()


def _mask_block_size(weights: np.ndarray, mask: np.ndarray) -> int:
    if mask.ndim != 2 or weights.ndim != 4:
        raise ShapeError(f"mask {mask.shape} / weights {weights.shape} have wrong rank")
    c_out, c_in = weights.shape[:2]
    g, cols = mask.shape
    if cols != c_in or g == 0 or c_out % g:
        raise ShapeError(f"mask grid {mask.shape} does not tile weights {weights.shape}")
    return c_out // g


def expand_mask(mask: np.ndarray, weights_shape) -> np.ndarray:
    """Elementwise float32 mask with the weights' shape."""
    c_out, c_in, kh, kw = weights_shape
    n = c_out // mask.shape[0]
    full = np.repeat(mask.astype(np.float32), n, axis=0)
    return np.broadcast_to(full[:, :, None, None], (c_out, c_in, kh, kw))


def apply_mask(weights: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Return a masked copy; ``weights`` itself is left untouched."""
    _mask_block_size(weights, mask)
    return weights * expand_mask(mask, weights.shape)


def assert_uniform(mask: np.ndarray, p: float | None = None, expected: int | None = None) -> int:
    """Check every row group keeps the same number of blocks and return it.

    With ``p``, that count must equal ceil(C_in * (1 - p)); with ``expected``
    it must equal ``expected``. With neither, any common count is accepted.
    """
    if mask.ndim != 2:
        raise ShapeError(f"mask must be 2-D, got shape {mask.shape}")
    if not np.isin(mask, (0, 1)).all():
        raise InvariantError("mask entries must be 0 or 1")
    counts = mask.sum(axis=1).astype(int)
    if p is not None:
        expected = kept_per_group(mask.shape[1], p)
    if expected is None:
        expected = int(counts[0]) if counts.size else 0
    bad = np.flatnonzero(counts != expected)
    if bad.size:
        detail = ", ".join(f"{j}:{counts[j]}" for j in bad[:16])
        raise InvariantError(
            f"non-uniform mask: expected {expected} kept blocks per row group; "
            f"offending row groups (index:count) {detail}"
        )
    return expected
