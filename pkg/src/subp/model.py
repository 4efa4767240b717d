"""TinyNet-k: k x [conv3x3 -> relu], global average pool, linear classifier.

Parameters live in a flat dict keyed ``conv{i}.weight``, ``conv{i}.bias``,
``fc.weight`` and ``fc.bias``. Masks are keyed by layer name (``conv2``...)
and are applied non-destructively on every forward pass.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .blocks import assert_uniform, expand_mask
from .errors import ConfigError, InputError, ShapeError
from .tensor import DTYPE, ConvLayerParams, _conv_backward_cols, _conv_forward_cols, conv_output_size


class TinyNet:
    def __init__(self, convs: list[ConvLayerParams], fc_weight: np.ndarray, fc_bias: np.ndarray):
        self.convs = convs
        self.fc_weight = fc_weight
        self.fc_bias = fc_bias
        for a, b in zip(convs, convs[1:]):
            if b.weight.shape[1] != a.weight.shape[0]:
                raise ShapeError("conv channel counts do not chain")
        if fc_weight.shape[1] != convs[-1].weight.shape[0]:
            raise ShapeError("classifier input width does not match last conv")

    @classmethod
    def create(cls, in_channels: int, channels, num_classes: int, rng: np.random.Generator):
        """He-initialised network; conv biases start at zero."""
        convs = []
        c_in = in_channels
        for c_out in channels:
            std = math.sqrt(2.0 / (c_in * 9))
            w = (rng.standard_normal((c_out, c_in, 3, 3)) * std).astype(DTYPE)
            convs.append(ConvLayerParams(w, np.zeros(c_out, DTYPE), stride=1, padding=1))
            c_in = c_out
        bound = 1.0 / math.sqrt(c_in)
        fc_w = rng.uniform(-bound, bound, (num_classes, c_in)).astype(DTYPE)
        return cls(convs, fc_w, np.zeros(num_classes, DTYPE))

    @property
    def layer_names(self) -> list[str]:
        return [f"conv{i + 1}" for i in range(len(self.convs))]

    @property
    def prunable(self) -> list[str]:
        # first conv (image channels) and the classifier stay dense
        return self.layer_names[1:]

    @property
    def num_classes(self) -> int:
        return self.fc_weight.shape[0]

    def conv(self, name: str) -> ConvLayerParams:
        return self.convs[self.layer_names.index(name)]

    def params(self) -> dict[str, np.ndarray]:
        out = {}
        for name, c in zip(self.layer_names, self.convs):
            out[f"{name}.weight"] = c.weight
            out[f"{name}.bias"] = c.bias
        out["fc.weight"] = self.fc_weight
        out["fc.bias"] = self.fc_bias
        return out

    def load_params(self, params: dict[str, np.ndarray]):
        mine = self.params()
        missing = set(mine) - set(params)
        if missing:
            raise InputError(f"checkpoint lacks parameters: {sorted(missing)}")
        for key, arr in mine.items():
            if params[key].shape != arr.shape:
                raise ShapeError(f"{key}: checkpoint shape {params[key].shape}, model {arr.shape}")
            arr[...] = params[key]

    def copy(self) -> "TinyNet":
        convs = [ConvLayerParams(c.weight.copy(), c.bias.copy(), c.stride, c.padding) for c in self.convs]
        return TinyNet(convs, self.fc_weight.copy(), self.fc_bias.copy())

    def effective_weights(self, masks=None) -> list[np.ndarray]:
        masks = masks or {}
        out = []
        for name, c in zip(self.layer_names, self.convs):
            m = masks.get(name)
            out.append(c.weight if m is None else c.weight * expand_mask(m, c.weight.shape))
        return out

    def forward(self, x: np.ndarray, masks=None):
        """Return (logits, cache). Masked layers use W * M; stored W is not modified."""
        if x.ndim != 4 or x.shape[1] != self.convs[0].weight.shape[1]:
            raise ShapeError(f"input shape {x.shape} does not match the network")
        cache = {"weights": self.effective_weights(masks), "layers": []}
        h = x
        for c, w in zip(self.convs, cache["weights"]):
            y, cols = _conv_forward_cols(c, h, w)
            cache["layers"].append((cols, h.shape, y > 0))
            h = np.maximum(y, 0)
        pooled = h.mean(axis=(2, 3))
        cache["pooled"] = pooled
        cache["spatial"] = h.shape
        logits = pooled @ self.fc_weight.T + self.fc_bias
        return logits, cache

    def backward(self, cache, grad_logits: np.ndarray, masks=None) -> dict[str, np.ndarray]:
        """Gradients w.r.t. stored parameters; masked layers get grad * M."""
        masks = masks or {}
        grads = {
            "fc.weight": grad_logits.T @ cache["pooled"],
            "fc.bias": grad_logits.sum(axis=0),
        }
        n, c, hh, ww = cache["spatial"]
        g = np.broadcast_to((grad_logits @ self.fc_weight)[:, :, None, None] / (hh * ww), (n, c, hh, ww))
        for i in reversed(range(len(self.convs))):
            name = self.layer_names[i]
            cols, in_shape, active = cache["layers"][i]
            g = g * active
            gw, gb, g = _conv_backward_cols(self.convs[i], cols, in_shape, g, cache["weights"][i], need_input=i > 0)
            if name in masks:
                gw = gw * expand_mask(masks[name], gw.shape)
            grads[f"{name}.weight"] = gw
            grads[f"{name}.bias"] = gb
        return grads


def smoothed_cross_entropy(logits: np.ndarray, labels: np.ndarray, smoothing: float):
    """Mean label-smoothed cross-entropy and its gradient w.r.t. logits."""
    b, k = logits.shape
    if b < 1:
        raise InputError("empty batch")
    labels = np.asarray(labels)
    if labels.shape != (b,) or labels.min() < 0 or labels.max() >= k:
        raise InputError(f"labels must be {b} integers in [0, {k})")
    z = logits.astype(np.float64)
    z = z - z.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    target = np.full((b, k), smoothing / k)
    target[np.arange(b), labels] += 1.0 - smoothing
    loss = float(-(target * logp).sum(axis=1).mean())
    grad = ((np.exp(logp) - target) / b).astype(logits.dtype)
    return max(loss, 0.0), grad


def model_forward_loss(model: TinyNet, batch, labels, smoothing: float = 0.0, masks=None):
    logits, _ = model.forward(batch, masks)
    loss, _ = smoothed_cross_entropy(logits, labels, smoothing)
    return loss, logits


def loss_and_grads(model: TinyNet, batch, labels, smoothing: float, masks=None):
    logits, cache = model.forward(batch, masks)
    loss, g = smoothed_cross_entropy(logits, labels, smoothing)
    return loss, logits, model.backward(cache, g, masks)


@dataclass
class SgdConfig:
    lr: float = 0.1
    warmup_epochs: float = 2.0
    epochs: int = 60
    momentum: float = 0.875
    weight_decay: float = 3e-5
    label_smoothing: float = 0.1

    def __post_init__(self):
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError(f"momentum must be in [0, 1), got {self.momentum}")
        if self.weight_decay < 0:
            raise ConfigError(f"weight_decay must be >= 0, got {self.weight_decay}")
        if not 0.0 <= self.label_smoothing < 1.0:
            raise ConfigError(f"label_smoothing must be in [0, 1), got {self.label_smoothing}")
        if self.lr <= 0 or self.epochs < 1 or self.warmup_epochs < 0:
            raise ConfigError("lr must be > 0, epochs >= 1, warmup_epochs >= 0")


def learning_rate(config: SgdConfig, epoch_fraction: float) -> float:
    """Linear warmup from 0 to the peak, then cosine decay to 0 at the last epoch."""
    w = config.warmup_epochs
    if epoch_fraction < w:
        return config.lr * epoch_fraction / w
    span = max(config.epochs - w, 1e-12)
    progress = min(max((epoch_fraction - w) / span, 0.0), 1.0)
    return 0.5 * config.lr * (1.0 + math.cos(math.pi * progress))


def sgd_step(params, grads, state, config: SgdConfig, epoch_fraction: float, masks=None):
    """Momentum SGD with coupled weight decay, updating ``params`` in place.

    ``masks`` maps parameter names to elementwise 0/1 arrays. Masked entries
    get no gradient, no decay and no momentum, so their stored values are
    exactly preserved; their momentum restarts from zero when regrown.
    """
    lr = learning_rate(config, epoch_fraction)
    masks = masks or {}
    for key, p in params.items():
        d = grads[key] + config.weight_decay * p
        buf = state.get(key)
        buf = d if buf is None else config.momentum * buf + d
        m = masks.get(key)
        if m is not None:
            buf = buf * m
        state[key] = buf
        p -= (lr * buf).astype(p.dtype)
    return params


def layer_flops(model: TinyNet, input_shape, masks=None, check_uniform: bool = True) -> dict[str, int]:
    """Per-layer multiply-accumulates for one sample of shape (C, H, W).

    One MAC counts as one operation. Masked conv layers scale by their
    kept-block fraction; the classifier ("fc") counts in*out.
    """
    masks = masks or {}
    _, h, w = input_shape
    out = {}
    for name, c in zip(model.layer_names, model.convs):
        c_out, c_in, kh, kw = c.weight.shape
        h = conv_output_size(h, kh, c.stride, c.padding)
        w = conv_output_size(w, kw, c.stride, c.padding)
        m = masks.get(name)
        if m is None:
            out[name] = c_out * c_in * kh * kw * h * w
            continue
        if check_uniform:
            assert_uniform(m)
        n = c_out // m.shape[0]
        out[name] = n * int(m.sum()) * kh * kw * h * w
    out["fc"] = int(model.fc_weight.size)
    return out


def count_flops(model: TinyNet, input_shape, masks=None, check_uniform: bool = True) -> int:
    return int(sum(layer_flops(model, input_shape, masks, check_uniform).values()))
