"""Soft uniform block pruning: periodic prune + importance-sampled regrow.

Each update (one per epoch by default) keeps the top ceil(C_in * (1 - p))
blocks of every row group, then re-activates floor(delta_t * C_in) of the
pruned ones, drawn without replacement with probability softmax(S / tau).
delta_t decays cubically from delta0 at t_s to zero at t_e, after which the
mask is frozen.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .blocks import kept_per_group, partition, regrow_count
from .criterion import CRITERIA, score_layer
from .errors import ConfigError


@dataclass
class SubpSchedule:
    p: float
    delta0: float = 0.2
    t_s: int = 10
    t_e: int = 180
    tau: float = 1.0
    lam: float = 1.0
    update_period: int = 1
    criterion: str = "bpar"
    uniform: bool = True
    layer_p: dict = field(default_factory=dict)

    def __post_init__(self):
        for name, p in [("p", self.p), *self.layer_p.items()]:
            if not 0.0 < p < 1.0:
                raise ConfigError(f"prune rate for {name} must be in (0, 1), got {p}")
        if not 0.0 <= self.delta0 <= self.p:
            raise ConfigError(f"delta0 must be in [0, p={self.p}], got {self.delta0}")
        if not self.t_s < self.t_e:
            raise ConfigError(f"t_s ({self.t_s}) must be < t_e ({self.t_e})")
        if self.tau <= 0:
            raise ConfigError(f"tau must be > 0, got {self.tau}")
        if self.update_period < 1:
            raise ConfigError(f"update_period must be >= 1, got {self.update_period}")
        if self.criterion not in CRITERIA:
            raise ConfigError(f"criterion must be one of {CRITERIA}, got {self.criterion!r}")

    def rate(self, layer: str) -> float:
        return self.layer_p.get(layer, self.p)

    def is_update_epoch(self, t: int) -> bool:
        if not self.t_s < t <= self.t_e:
            return False
        # the endpoint always fires so the final mask lands on the target rate
        return t % self.update_period == 0 or t == self.t_e


def delta_schedule(t: float, schedule: SubpSchedule, p: float | None = None) -> float:
    """Regrow factor at epoch t."""
    p = schedule.p if p is None else p
    if t <= schedule.t_s:
        return 1.0 - p
    if t <= schedule.t_e:
        frac = (t - schedule.t_s) / (schedule.t_e - schedule.t_s)
        return schedule.delta0 * (1.0 - frac) ** 3
    return 0.0


def topk_indices(scores: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k largest scores, highest first; ties go to the lower index."""
    order = np.argsort(-np.asarray(scores), kind="stable")
    return order[:k]


def prune_mask(scores: np.ndarray, p: float) -> np.ndarray:
    """Uniform prune: per row group keep the top ceil(C_in * (1 - p)) blocks."""
    g, c_in = scores.shape
    keep = kept_per_group(c_in, p)
    mask = np.zeros((g, c_in), dtype=np.uint8)
    for j in range(g):
        mask[j, topk_indices(scores[j], keep)] = 1
    return mask


def prune_mask_global(scores: np.ndarray, p: float) -> np.ndarray:
    """Layer-wide top-k (the non-uniform baseline); row counts may differ."""
    keep = kept_per_group(scores.size, p)
    mask = np.zeros(scores.size, dtype=np.uint8)
    mask[topk_indices(scores.ravel(), keep)] = 1
    return mask.reshape(scores.shape)


def prune_step(weights: np.ndarray, n: int, p: float, criterion: str = "bpar", lam: float = 1.0,
               uniform: bool = True):
    """Score the stored weights and return (mask, scores)."""
    scores = score_layer(weights, n, criterion, lam)
    mask = prune_mask(scores, p) if uniform else prune_mask_global(scores, p)
    return mask, scores


def sample_without_replacement(scores: np.ndarray, r: int, tau: float, rng: np.random.Generator) -> np.ndarray:
    """Draw r distinct positions one at a time from softmax(scores / tau).

    After each draw the chosen entry is removed and the rest renormalised.
    """
    logits = np.asarray(scores, dtype=np.float64) / tau
    weights = np.exp(logits - logits.max()) if logits.size else logits
    alive = np.ones(weights.size, dtype=bool)
    chosen = []
    for _ in range(min(r, weights.size)):
        w = np.where(alive, weights, 0.0)
        cdf = np.cumsum(w)
        u = rng.random() * cdf[-1]
        idx = int(np.searchsorted(cdf, u, side="right"))
        idx = min(idx, weights.size - 1)
        while not alive[idx]:  # u landed on the far edge of a removed entry
            idx -= 1
        alive[idx] = False
        chosen.append(idx)
    return np.array(chosen, dtype=np.int64)


def regrow_step(mask: np.ndarray, scores: np.ndarray, delta: float, tau: float,
                rng: np.random.Generator, uniform: bool = True) -> np.ndarray:
    """Return a copy of ``mask`` with sampled pruned blocks switched back on."""
    out = mask.copy()
    g, c_in = mask.shape
    r = regrow_count(c_in, delta)
    if r <= 0:
        return out
    if not uniform:
        pruned = np.flatnonzero(out.ravel() == 0)
        pick = sample_without_replacement(scores.ravel()[pruned], r * g, tau, rng)
        out.ravel()[pruned[pick]] = 1
        return out
    for j in range(g):
        pruned = np.flatnonzero(out[j] == 0)
        pick = sample_without_replacement(scores[j, pruned], r, tau, rng)
        out[j, pruned[pick]] = 1
    return out


@dataclass
class MaskState:
    """Per-layer block masks plus the generator that drives regrow sampling.

    ``retained`` and ``regrown`` record the prune-stage survivors and the
    freshly regrown blocks of the most recent update.
    """

    masks: dict
    rng: np.random.Generator
    retained: dict = field(default_factory=dict)
    regrown: dict = field(default_factory=dict)
    last_update: int | None = None

    @classmethod
    def dense(cls, model, n: int, seed: int = 0):
        masks = {}
        for name in model.prunable:
            part = partition(model.conv(name).weight, n, name)
            masks[name] = np.ones(part.grid, dtype=np.uint8)
        return cls(masks, np.random.default_rng(seed))

    def copy_masks(self) -> dict:
        return {k: v.copy() for k, v in self.masks.items()}

    def density(self, name: str) -> float:
        return float(self.masks[name].mean())


def expected_row_count(c_in: int, p: float, delta: float) -> int:
    """Kept + regrown blocks per row group after an update at regrow factor delta."""
    keep = kept_per_group(c_in, p)
    return keep + min(regrow_count(c_in, delta), c_in - keep)


def epoch_update(model, state: MaskState, schedule: SubpSchedule, t: int, n: int | None = None) -> MaskState:
    """Apply the prune/regrow event (if any) scheduled at the start of epoch t."""
    if t <= schedule.t_s:
        for m in state.masks.values():
            m[...] = 1
        return state
    if not schedule.is_update_epoch(t):
        return state
    for name in model.prunable:
        if name not in state.masks:
            continue
        weights = model.conv(name).weight
        block_n = n or weights.shape[0] // state.masks[name].shape[0]
        p = schedule.rate(name)
        mask, scores = prune_step(weights, block_n, p, schedule.criterion, schedule.lam, schedule.uniform)
        delta = delta_schedule(t, schedule, p)
        grown = regrow_step(mask, scores, delta, schedule.tau, state.rng, schedule.uniform)
        state.retained[name] = mask
        state.regrown[name] = grown & (1 - mask)
        state.masks[name] = grown
    state.last_update = t
    return state
