"""Block importance scores: plain l1 norm and BPAR (angular redundancy).

BPAR for block k of a row group with block vectors w_0..w_{C-1}:

    S_k = |w_k|_1 / sum_m |w_m|_1
          - lam * sum_m |cos(w_k, w_m)| / sum_n sum_m |cos(w_n, w_m)|

Both sums include m == k. A zero vector is treated as parallel to
everything, so its cosine with any vector is 1.
"""

from __future__ import annotations

import numpy as np

from .blocks import block_matrix
from .errors import ConfigError, DegenerateRowError, ShapeError

CRITERIA = ("l1", "bpar")


def cosine_sim(a, b) -> float:
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise ShapeError(f"vector lengths differ: {a.size} vs {b.size}")
    na = np.linalg.norm(a)
    nb = np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        return 1.0
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


def abs_cosine_matrix(row: np.ndarray) -> np.ndarray:
    """Pairwise |cos| between the C block vectors of one row group, shape (C, C)."""
    row = np.asarray(row, dtype=np.float64)
    norms = np.linalg.norm(row, axis=1)
    zero = norms == 0.0
    safe = np.where(zero, 1.0, norms)
    unit = row / safe[:, None]
    cos = np.abs(unit @ unit.T)
    cos[zero, :] = 1.0
    cos[:, zero] = 1.0
    return np.minimum(cos, 1.0)


def l1_scores(row: np.ndarray) -> np.ndarray:
    """Unnormalised l1 norm of each block vector in a row group (C, L)."""
    return np.abs(np.asarray(row, dtype=np.float64)).sum(axis=1)


def bpar_scores(row: np.ndarray, lam: float = 1.0) -> np.ndarray:
    norms = l1_scores(row)
    total = norms.sum()
    if total == 0.0:
        raise DegenerateRowError("all blocks in the row group are zero; BPAR is undefined")
    cos = abs_cosine_matrix(row)
    redundancy = cos.sum(axis=1)
    return norms / total - lam * redundancy / redundancy.sum()


def score_layer(weights: np.ndarray, n: int, criterion: str = "bpar", lam: float = 1.0) -> np.ndarray:
    """Score every block of a layer from its stored (unmasked) weights, shape (G, C_in)."""
    if criterion not in CRITERIA:
        raise ConfigError(f"unknown criterion {criterion!r}; expected one of {CRITERIA}")
    blocks = block_matrix(weights, n)
    if criterion == "l1":
        return l1_scores(blocks.reshape(-1, blocks.shape[-1])).reshape(blocks.shape[:2])
    out = np.empty(blocks.shape[:2])
    for j, row in enumerate(blocks):
        try:
            out[j] = bpar_scores(row, lam)
        except DegenerateRowError as exc:
            raise DegenerateRowError(f"row group {j}: {exc}") from None
    return out
