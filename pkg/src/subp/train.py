"""Training loop: masked SGD with a prune/regrow event at each epoch boundary."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .blocks import expand_mask
from .config import RunConfig
from .data import Dataset
from .model import TinyNet, layer_flops, loss_and_grads, sgd_step
from .pruning import MaskState, epoch_update

log = logging.getLogger(__name__)


@dataclass
class TrainResult:
    model: TinyNet
    state: MaskState | None
    log: list = field(default_factory=list)
    mask_history: dict = field(default_factory=dict)

    @property
    def masks(self) -> dict:
        return {} if self.state is None else self.state.masks

    @property
    def final_top1(self) -> float:
        return self.log[-1]["top1"]


def predict(model: TinyNet, x: np.ndarray, masks=None, batch: int = 256) -> np.ndarray:
    out = []
    for i in range(0, len(x), batch):
        logits, _ = model.forward(x[i : i + batch], masks)
        out.append(logits)
    return np.concatenate(out)


def evaluate(model: TinyNet, x: np.ndarray, y: np.ndarray, masks=None) -> float:
    return float((predict(model, x, masks).argmax(axis=1) == y).mean())


def weight_masks(model: TinyNet, masks: dict) -> dict:
    return {f"{name}.weight": expand_mask(m, model.conv(name).weight.shape) for name, m in masks.items()}


def train_subp(config: RunConfig, dataset: Dataset | None = None, init_params: dict | None = None,
               record_masks: bool = False) -> TrainResult:
    """Train TinyNet under SUBP (or densely when ``config.dense``).

    ``record_masks`` keeps a copy of every layer mask after each epoch's
    update, keyed by epoch.
    """
    ds = config.dataset() if dataset is None else dataset
    init_seq, shuffle_seq, mask_seq = np.random.SeedSequence(config.seed).spawn(3)
    model = TinyNet.create(config.image_channels, config.channels, config.num_classes,
                           np.random.default_rng(init_seq))
    if init_params is not None:
        model.load_params(init_params)
    sgd = config.sgd()
    schedule = None if config.dense else config.schedule()
    state = None if config.dense else MaskState.dense(model, config.n, seed=int(mask_seq.generate_state(1)[0]))
    shuffle = np.random.default_rng(shuffle_seq)
    params = model.params()
    momentum: dict = {}
    result = TrainResult(model, state)
    n_train = len(ds.y_train)
    steps = max(1, -(-n_train // config.batch_size))

    for t in range(1, config.epochs + 1):
        masks = {}
        if state is not None:
            epoch_update(model, state, schedule, t, config.n)
            masks = state.masks
            if record_masks:
                result.mask_history[t] = state.copy_masks()
        grad_masks = weight_masks(model, masks)
        order = shuffle.permutation(n_train)
        total = 0.0
        for step in range(steps):
            idx = order[step * config.batch_size : (step + 1) * config.batch_size]
            loss, _, grads = loss_and_grads(model, ds.x_train[idx], ds.y_train[idx], sgd.label_smoothing, masks)
            sgd_step(params, grads, momentum, sgd, (t - 1) + step / steps, grad_masks)
            total += loss * len(idx)
        row = {
            "epoch": t,
            "loss": total / n_train,
            "top1": evaluate(model, ds.x_val, ds.y_val, masks),
        }
        for name in model.prunable:
            row[f"density_{name}"] = state.density(name) if state is not None else 1.0
        result.log.append(row)
        log.debug("epoch %d loss %.4f top1 %.4f", t, row["loss"], row["top1"])
    return result


def summary(result: TrainResult, config: RunConfig) -> dict:
    shape = (config.image_channels, config.image_size, config.image_size)
    model, masks = result.model, result.masks
    uniform = config.uniform or config.dense
    dense = layer_flops(model, shape)
    sparse = layer_flops(model, shape, masks, check_uniform=uniform)
    return {
        "top1": result.final_top1,
        "flops_dense": sum(dense.values()),
        "flops_sparse": sum(sparse.values()),
        "flops_prunable_dense": sum(dense[n] for n in model.prunable),
        "flops_prunable_sparse": sum(sparse[n] for n in model.prunable),
        "density": {n: (float(masks[n].mean()) if n in masks else 1.0) for n in model.prunable},
    }
