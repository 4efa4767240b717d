"""Multithreaded block-sparse inference and workload accounting.

Work is split across workers by contiguous chunks of output row groups.
Each row group is computed by exactly one worker with a single GEMM of its
(N, K*Kh*Kw) weight panel against the gathered rows of the transposed
im2col matrix, so results do not depend on the worker count. BLAS is held to
one thread inside the kernels; parallelism comes only from the workers.
"""

from __future__ import annotations

import csv
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
from threadpoolctl import threadpool_limits

from .blocks import block_matrix, kept_per_group
from .bsr import BsrLayer, BsrModel, DenseLayer, encode
from .criterion import l1_scores
from .errors import ConfigError, ShapeError
from .pruning import prune_mask, prune_mask_global
from .tensor import conv2d_forward, ConvLayerParams, conv_output_size, im2col

MODES = ("dense", "uniform", "nonuniform")
CSV_COLUMNS = ("mode", "N", "p", "workers", "median_us", "blocks_per_worker_min",
               "blocks_per_worker_max", "flops")


def schedule_row_groups(num_row_groups: int, workers: int) -> list[range]:
    """Contiguous chunks whose sizes differ by at most one, larger chunks first."""
    if workers < 1:
        raise ConfigError(f"workers must be >= 1, got {workers}")
    base, extra = divmod(num_row_groups, workers)
    out, start = [], 0
    for w in range(workers):
        size = base + (1 if w < extra else 0)
        out.append(range(start, start + size))
        start += size
    return out


@dataclass
class WorkloadReport:
    assignments: list
    blocks: list
    block_macs: list
    elapsed: list = field(default_factory=list)

    @property
    def blocks_min(self) -> int:
        return min(self.blocks)

    @property
    def blocks_max(self) -> int:
        return max(self.blocks)

    @property
    def imbalance(self) -> float:
        """max/min per-worker blocks; inf when some worker has no blocks."""
        return float("inf") if self.blocks_min == 0 else self.blocks_max / self.blocks_min


@dataclass(frozen=True, eq=False)
class RaggedBsrLayer:
    """BSR with an explicit row pointer, for masks whose row groups keep different counts."""

    n: int
    c_out: int
    c_in: int
    kh: int
    kw: int
    row_ptr: np.ndarray  # (G + 1,)
    col_indices: np.ndarray
    values: np.ndarray
    bias: np.ndarray

    def __post_init__(self):
        if (np.diff(self.row_ptr) < 0).any() or self.row_ptr[0] != 0 or self.row_ptr[-1] != self.col_indices.size:
            raise ShapeError("row_ptr must start at 0, be non-decreasing and end at the block count")

    @property
    def num_row_groups(self) -> int:
        return self.c_out // self.n

    @property
    def counts(self) -> np.ndarray:
        return np.diff(self.row_ptr)

    @cached_property
    def panels(self) -> list:
        kk = self.kh * self.kw
        out = []
        for j in range(self.num_row_groups):
            a, b = self.row_ptr[j], self.row_ptr[j + 1]
            v = self.values[a * self.n * kk : b * self.n * kk].reshape(b - a, self.n, kk).transpose(1, 0, 2)
            out.append(np.ascontiguousarray(v).reshape(self.n, (b - a) * kk))
        return out

    @cached_property
    def gather_index(self) -> list:
        kk = self.kh * self.kw
        cols = self.col_indices.astype(np.intp)
        return [(cols[self.row_ptr[j] : self.row_ptr[j + 1], None] * kk + np.arange(kk)).ravel()
                for j in range(self.num_row_groups)]


def encode_ragged(weights: np.ndarray, mask: np.ndarray, bias=None) -> RaggedBsrLayer:
    c_out, c_in, kh, kw = weights.shape
    n = c_out // mask.shape[0]
    blocks = block_matrix(weights, n)
    rows, cols = np.nonzero(mask)
    row_ptr = np.concatenate([[0], np.cumsum(mask.sum(axis=1))]).astype(np.int64)
    vals = blocks[rows, cols].astype(np.float32).ravel()
    bias = np.zeros(c_out, np.float32) if bias is None else np.asarray(bias, np.float32)
    return RaggedBsrLayer(n, c_out, c_in, kh, kw, row_ptr, cols.astype(np.uint32), vals, bias)


def _blocks_per_group(layer) -> np.ndarray:
    if isinstance(layer, BsrLayer):
        return np.full(layer.num_row_groups, layer.kept)
    if isinstance(layer, RaggedBsrLayer):
        return layer.counts
    # dense weights: every block of the row group is present
    return np.full(layer.num_row_groups, layer.c_in)


@dataclass(frozen=True, eq=False)
class _DenseRows:
    """Dense weights viewed as row groups of N output channels, for the baseline kernel."""

    weight: np.ndarray  # (C_out, C_in*Kh*Kw)
    bias: np.ndarray
    n: int
    c_in: int

    @property
    def num_row_groups(self) -> int:
        return self.weight.shape[0] // self.n


def _check_patches(layer, patches):
    kk = layer.kh * layer.kw if hasattr(layer, "kh") else layer.weight.shape[1] // layer.c_in
    if patches.ndim != 2 or patches.shape[1] != layer.c_in * kk:
        raise ShapeError(f"patches have {patches.shape[-1]} columns, layer expects {layer.c_in * kk}")


def _run(layer, patches: np.ndarray, workers: int):
    _check_patches(layer, patches)
    n = layer.n
    xt = np.ascontiguousarray(patches.T, dtype=np.float32)
    p = xt.shape[1]
    c_out = layer.num_row_groups * n
    out_t = np.empty((c_out, p), dtype=np.float32)
    chunks = schedule_row_groups(layer.num_row_groups, workers)
    per_group = _blocks_per_group(layer)

    if isinstance(layer, _DenseRows):
        def group(j):
            np.matmul(layer.weight[j * n : (j + 1) * n], xt, out=out_t[j * n : (j + 1) * n])
    else:
        panels, index = layer.panels, layer.gather_index

        def group(j):
            np.matmul(panels[j], xt[index[j]], out=out_t[j * n : (j + 1) * n])

    bias = layer.bias[:, None]

    def work(chunk):
        start = time.perf_counter()
        for j in chunk:
            group(j)
            out_t[j * n : (j + 1) * n] += bias[j * n : (j + 1) * n]
        return time.perf_counter() - start

    with threadpool_limits(limits=1, user_api="blas"):
        if workers == 1:
            elapsed = [work(chunks[0])]
        else:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                elapsed = list(pool.map(work, chunks))
    blocks = [int(per_group[c.start : c.stop].sum()) for c in chunks]
    report = WorkloadReport([(c.start, c.stop) for c in chunks], blocks, [b * p for b in blocks], elapsed)
    return out_t.T, report


def bsr_matmul(layer, patches: np.ndarray, workers: int = 1, report: bool = False):
    """Block-sparse product of im2col patches (P, C_in*Kh*Kw) with a BSR layer -> (P, C_out).

    Accepts BsrLayer or RaggedBsrLayer. Bias is added. With ``report`` the
    per-worker WorkloadReport is returned as well.
    """
    out, rep = _run(layer, patches, workers)
    out = np.ascontiguousarray(out)
    return (out, rep) if report else out


def dense_matmul(weight: np.ndarray, bias: np.ndarray, patches: np.ndarray, n: int, workers: int = 1,
                 report: bool = False):
    """Dense baseline with the same row-group ownership split as the sparse kernel."""
    c_out, c_in = weight.shape[:2]
    rows = _DenseRows(np.ascontiguousarray(weight.reshape(c_out, -1), dtype=np.float32),
                      np.asarray(bias, np.float32), n, c_in)
    out, rep = _run(rows, patches, workers)
    out = np.ascontiguousarray(out)
    return (out, rep) if report else out


def bsr_conv2d(layer, x: np.ndarray, stride: int = 1, padding: int = 0, workers: int = 1) -> np.ndarray:
    if x.ndim != 4 or x.shape[1] != layer.c_in:
        raise ShapeError(f"input shape {x.shape} does not match C_in={layer.c_in}")
    n, _, h, w = x.shape
    ho = conv_output_size(h, layer.kh, stride, padding)
    wo = conv_output_size(w, layer.kw, stride, padding)
    cols = im2col(x, (layer.kh, layer.kw), stride, padding)
    y = bsr_matmul(layer, cols, workers)
    return np.ascontiguousarray(y.reshape(n, ho, wo, layer.c_out).transpose(0, 3, 1, 2))


def infer_model(model: BsrModel, x: np.ndarray, workers: int = 1) -> np.ndarray:
    """Logits of a TinyNet stored as a BsrModel, using the sparse kernels for BSR layers."""
    *convs, fc = model.layers
    h = x.astype(np.float32)
    for layer in convs:
        pad = layer.shape[2] // 2
        if isinstance(layer, BsrLayer):
            h = bsr_conv2d(layer, h, 1, pad, workers)
        else:
            h = conv2d_forward(ConvLayerParams(layer.weight, layer.bias, 1, pad), h)
        h = np.maximum(h, 0)
    pooled = h.mean(axis=(2, 3))
    return pooled @ fc.weight.reshape(fc.shape[:2]).T + fc.bias


# --- benchmarking -----------------------------------------------------------


def adversarial_mask(num_row_groups: int, c_in: int, p: float) -> np.ndarray:
    """Same total kept blocks as the uniform mask, packed into the first row groups."""
    total = kept_per_group(num_row_groups * c_in, p)
    flat = np.zeros(num_row_groups * c_in, dtype=np.uint8)
    flat[:total] = 1
    return flat.reshape(num_row_groups, c_in)


@dataclass
class BenchResult:
    mode: str
    n: int
    p: float
    workers: int
    times_us: list
    report: WorkloadReport
    flops: int

    @property
    def median_us(self) -> float:
        return float(np.median(self.times_us))

    def row(self) -> dict:
        return {
            "mode": self.mode,
            "N": self.n,
            "p": self.p,
            "workers": self.workers,
            "median_us": f"{self.median_us:.1f}",
            "blocks_per_worker_min": self.report.blocks_min,
            "blocks_per_worker_max": self.report.blocks_max,
            "flops": self.flops,
        }


def bench_layer(shape, n: int, p: float, mode: str, seed: int = 0, adversarial: bool = False):
    """Build the layer under test: a DenseLayer, BsrLayer or RaggedBsrLayer."""
    if mode not in MODES:
        raise ConfigError(f"mode must be one of {MODES}, got {mode!r}")
    c_out, c_in, kh, kw = shape
    if c_out % n:
        raise ConfigError(f"C_out={c_out} is not divisible by N={n}")
    rng = np.random.default_rng(seed)
    w = rng.standard_normal(shape).astype(np.float32)
    bias = rng.standard_normal(c_out).astype(np.float32)
    if mode == "dense" or p == 0:
        return DenseLayer(w, bias) if mode == "dense" else encode(w, np.ones((c_out // n, c_in), np.uint8), n, bias)
    blocks = block_matrix(w, n)
    scores = l1_scores(blocks.reshape(-1, blocks.shape[-1])).reshape(blocks.shape[:2])
    if mode == "uniform":
        return encode(w, prune_mask(scores, p), n, bias)
    mask = adversarial_mask(c_out // n, c_in, p) if adversarial else prune_mask_global(scores, p)
    return encode_ragged(w, mask, bias)


def bench_kernel(shape=(256, 256, 3, 3), n: int = 16, p: float = 0.75, mode: str = "uniform",
                 workers: int = 1, repeats: int = 50, warmup: int = 10, patches: int = 784,
                 seed: int = 0, adversarial: bool = False) -> BenchResult:
    """Time one kernel on random im2col patches; median over ``repeats`` after ``warmup`` runs."""
    layer = bench_layer(shape, n, p, mode, seed, adversarial)
    c_out, c_in, kh, kw = shape
    x = np.random.default_rng(seed + 1).standard_normal((patches, c_in * kh * kw)).astype(np.float32)
    if isinstance(layer, DenseLayer):
        def call():
            return dense_matmul(layer.weight, layer.bias, x, n, workers, report=True)
    else:
        def call():
            return bsr_matmul(layer, x, workers, report=True)
    for _ in range(warmup):
        call()
    times = []
    for _ in range(repeats):
        start = time.perf_counter()
        _, rep = call()
        times.append((time.perf_counter() - start) * 1e6)
    flops = sum(rep.blocks) * n * kh * kw * patches
    return BenchResult(mode, n, p, workers, times, rep, flops)


def write_csv(rows, fh, header: bool = True) -> None:
    writer = csv.DictWriter(fh, fieldnames=CSV_COLUMNS, lineterminator="\n")
    if header:
        writer.writeheader()
    for r in rows:
        writer.writerow(r.row() if isinstance(r, BenchResult) else r)
