"""Soft uniform 1xN block pruning for small conv nets, with BSR export and
block-sparse inference kernels."""

from .blocks import apply_mask, assert_uniform, partition, vectorize
from .bsr import BsrLayer, BsrModel, decode, deserialize, encode, serialize
from .config import RunConfig, load_config, parse_config
from .criterion import bpar_scores, cosine_sim, l1_scores
from .errors import (ConfigError, DegenerateRowError, FormatError, InputError, InvariantError, ShapeError,
                     SubpError)
from .pruning import MaskState, SubpSchedule, delta_schedule, epoch_update, prune_step, regrow_step
from .sparse_infer import bench_kernel, bsr_conv2d, bsr_matmul
from .train import train_subp

__version__ = "0.1.0"

__all__ = [
    "apply_mask", "assert_uniform", "partition", "vectorize",
    "BsrLayer", "BsrModel", "decode", "deserialize", "encode", "serialize",
    "RunConfig", "load_config", "parse_config",
    "bpar_scores", "cosine_sim", "l1_scores",
    "ConfigError", "DegenerateRowError", "FormatError", "InputError", "InvariantError", "ShapeError", "SubpError",
    "MaskState", "SubpSchedule", "delta_schedule", "epoch_update", "prune_step", "regrow_step",
    "bench_kernel", "bsr_conv2d", "bsr_matmul",
    "train_subp",
]
