"""Dense convolution primitives on NCHW float32 arrays.

im2col column order is channel-major: all Kh*Kw taps of input channel 0,
then channel 1, and so on. The block-sparse kernels rely on this layout.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ShapeError

DTYPE = np.float32


def conv_output_size(size: int, kernel: int, stride: int, padding: int) -> int:
    span = size + 2 * padding - kernel
    if span < 0 or stride < 1:
        raise ShapeError(
            f"kernel {kernel} does not fit input {size} with padding {padding}"
        )
    return span // stride + 1


@dataclass
class ConvLayerParams:
    weight: np.ndarray  # (C_out, C_in, Kh, Kw)
    bias: np.ndarray  # (C_out,)
    stride: int = 1
    padding: int = 0

    def __post_init__(self):
        if self.weight.ndim != 4 or min(self.weight.shape) < 1:
            raise ShapeError(f"conv weight must be 4-D and non-empty, got {self.weight.shape}")
        if self.bias.shape != (self.weight.shape[0],):
            raise ShapeError(
                f"bias shape {self.bias.shape} does not match C_out={self.weight.shape[0]}"
            )
        if self.stride < 1 or self.padding < 0:
            raise ShapeError(f"invalid stride={self.stride} / padding={self.padding}")

    @property
    def kernel(self) -> tuple[int, int]:
        return self.weight.shape[2], self.weight.shape[3]


def _pad(x, padding):
    if padding == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))


def im2col(x: np.ndarray, kernel, stride: int = 1, padding: int = 0) -> np.ndarray:
    """Lower an NCHW batch to a (patches, C*Kh*Kw) matrix.

    Patches are ordered batch-major, then output row, then output column.
    """
    if x.ndim != 4:
        raise ShapeError(f"im2col expects NCHW input, got shape {x.shape}")
    kh, kw = kernel
    n, c, h, w = x.shape
    ho = conv_output_size(h, kh, stride, padding)
    wo = conv_output_size(w, kw, stride, padding)
    win = sliding_window_view(_pad(x, padding), (kh, kw), axis=(2, 3))
    win = win[:, :, : (ho - 1) * stride + 1 : stride, : (wo - 1) * stride + 1 : stride]
    # (N, C, Ho, Wo, Kh, Kw) -> (N, Ho, Wo, C, Kh, Kw)
    return np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(n * ho * wo, c * kh * kw)


def col2im(cols: np.ndarray, input_shape, kernel, stride: int = 1, padding: int = 0) -> np.ndarray:
    """Adjoint of im2col: scatter-add patch rows back onto the input grid."""
    kh, kw = kernel
    n, c, h, w = input_shape
    ho = conv_output_size(h, kh, stride, padding)
    wo = conv_output_size(w, kw, stride, padding)
    if cols.shape != (n * ho * wo, c * kh * kw):
        raise ShapeError(f"cols shape {cols.shape} inconsistent with input {tuple(input_shape)}")
    c6 = cols.reshape(n, ho, wo, c, kh, kw)
    out = np.zeros((n, c, h + 2 * padding, w + 2 * padding), dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            out[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += (
                c6[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            )
    if padding:
        out = out[:, :, padding:-padding, padding:-padding]
    return out


def _check_input(params: ConvLayerParams, x: np.ndarray):
    if x.ndim != 4:
        raise ShapeError(f"conv2d expects NCHW input, got shape {x.shape}")
    if x.shape[1] != params.weight.shape[1]:
        raise ShapeError(
            f"input has {x.shape[1]} channels, layer expects C_in={params.weight.shape[1]}"
        )


def conv2d_forward(params: ConvLayerParams, x: np.ndarray, weight: np.ndarray | None = None):
    """Convolution as im2col(x) @ W.T + b. ``weight`` overrides params.weight (masked path)."""
    _check_input(params, x)
    out, _ = _conv_forward_cols(params, x, weight)
    return out


def _conv_forward_cols(params, x, weight=None):
    w = params.weight if weight is None else weight
    c_out = w.shape[0]
    n, _, h, wd = x.shape
    kh, kw = params.kernel
    ho = conv_output_size(h, kh, params.stride, params.padding)
    wo = conv_output_size(wd, kw, params.stride, params.padding)
    cols = im2col(x, (kh, kw), params.stride, params.padding)
    y = cols @ w.reshape(c_out, -1).T
    y += params.bias
    return y.reshape(n, ho, wo, c_out).transpose(0, 3, 1, 2), cols


def _conv_backward_cols(params, cols, input_shape, grad_out, weight=None, need_input=True):
    w = params.weight if weight is None else weight
    c_out = w.shape[0]
    g = grad_out.transpose(0, 2, 3, 1).reshape(-1, c_out)
    grad_w = (g.T @ cols).reshape(w.shape)
    grad_b = g.sum(axis=0)
    grad_x = None
    if need_input:
        grad_cols = g @ w.reshape(c_out, -1)
        grad_x = col2im(grad_cols, input_shape, params.kernel, params.stride, params.padding)
    return grad_w, grad_b, grad_x


def conv2d_backward(params: ConvLayerParams, x: np.ndarray, grad_out: np.ndarray):
    """Return (grad_weight, grad_bias, grad_input) for a scalar loss with upstream grad_out."""
    _check_input(params, x)
    n, _, h, w = x.shape
    kh, kw = params.kernel
    expected = (
        n,
        params.weight.shape[0],
        conv_output_size(h, kh, params.stride, params.padding),
        conv_output_size(w, kw, params.stride, params.padding),
    )
    if grad_out.shape != expected:
        raise ShapeError(f"grad_out shape {grad_out.shape}, expected {expected}")
    cols = im2col(x, (kh, kw), params.stride, params.padding)
    return _conv_backward_cols(params, cols, x.shape, grad_out)
