"""Flat ``key = value`` run configuration.

Blank lines and ``#`` comments are ignored. Keys are the RunConfig field
names. Lists are comma separated; ``layer_p`` takes ``conv2:0.5,conv3:0.75``.
A prune rate ``p = 0`` trains the dense baseline.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

from .criterion import CRITERIA
from .data import Dataset, load_raw, make_synthetic
from .errors import ConfigError
from .model import SgdConfig
from .pruning import SubpSchedule


@dataclass
class RunConfig:
    seed: int = 0
    # architecture
    depth: int = 3
    channels: list = field(default_factory=lambda: [32, 32, 32])
    # data
    image_size: int = 8
    image_channels: int = 3
    num_classes: int = 8
    num_samples: int = 800
    noise_sigma: float = 0.35
    data_path: str = ""
    # optimiser
    lr: float = 0.05
    warmup_epochs: float = 2.0
    momentum: float = 0.875
    weight_decay: float = 3e-5
    label_smoothing: float = 0.1
    # sparsity
    n: int = 4
    p: float = 0.5
    layer_p: dict = field(default_factory=dict)
    criterion: str = "bpar"
    tau: float = 1.0
    lam: float = 1.0
    delta0: float = 0.2
    t_s: int = 5
    t_e: int = 40
    update_period: int = 1
    uniform: bool = True
    # run
    epochs: int = 60
    batch_size: int = 32
    init_weights: str = ""

    def __post_init__(self):
        self.validate()

    @property
    def dense(self) -> bool:
        return self.p == 0 and not self.layer_p

    def validate(self):
        if self.depth < 1 or len(self.channels) != self.depth:
            raise ConfigError(f"channels lists {len(self.channels)} widths but depth={self.depth}")
        if any(c < 1 for c in self.channels):
            raise ConfigError("channel counts must be >= 1")
        for key in ("image_size", "image_channels", "num_classes", "num_samples", "epochs", "batch_size", "n"):
            if getattr(self, key) < 1:
                raise ConfigError(f"{key} must be >= 1, got {getattr(self, key)}")
        if self.num_classes < 2:
            raise ConfigError("num_classes must be >= 2")
        if self.noise_sigma < 0:
            raise ConfigError("noise_sigma must be >= 0")
        if self.criterion not in CRITERIA:
            raise ConfigError(f"criterion must be one of {CRITERIA}, got {self.criterion!r}")
        self.sgd()
        if self.dense:
            return
        # prunable layers are conv2..convk; their output widths must tile by N
        for i, c_out in enumerate(self.channels[1:], start=2):
            if c_out % self.n:
                ok = [d for d in range(1, c_out + 1) if c_out % d == 0]
                raise ConfigError(f"conv{i}: C_out={c_out} is not divisible by n={self.n}; valid n values: {ok}")
        names = {f"conv{i}" for i in range(2, self.depth + 1)}
        unknown = set(self.layer_p) - names
        if unknown:
            raise ConfigError(f"layer_p names non-prunable layers {sorted(unknown)}; prunable: {sorted(names)}")
        if self.depth < 2:
            raise ConfigError("sparse training needs depth >= 2 (conv1 is never pruned)")
        if self.t_e > self.epochs:
            raise ConfigError(f"t_e={self.t_e} exceeds epochs={self.epochs}; the target sparsity would never be reached")
        self.schedule()

    def sgd(self) -> SgdConfig:
        return SgdConfig(self.lr, self.warmup_epochs, self.epochs, self.momentum,
                         self.weight_decay, self.label_smoothing)

    def schedule(self) -> SubpSchedule:
        return SubpSchedule(p=self.p, delta0=self.delta0, t_s=self.t_s, t_e=self.t_e, tau=self.tau,
                            lam=self.lam, update_period=self.update_period, criterion=self.criterion,
                            uniform=self.uniform, layer_p=dict(self.layer_p))

    def dataset(self) -> Dataset:
        if self.data_path:
            ds = load_raw(self.data_path)
            if ds.image_shape != (self.image_channels, self.image_size, self.image_size) or ds.num_classes != self.num_classes:
                raise ConfigError(f"dataset at {self.data_path} has shape {ds.image_shape} and "
                                  f"{ds.num_classes} classes, which disagrees with the config")
            return ds
        return make_synthetic(self.seed, self.image_size, self.image_channels, self.num_classes,
                              self.num_samples, self.noise_sigma)

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)

    def to_text(self) -> str:
        lines = []
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if isinstance(v, list):
                v = ",".join(str(x) for x in v)
            elif isinstance(v, dict):
                v = ",".join(f"{k}:{x}" for k, x in v.items())
            elif isinstance(v, bool):
                v = "true" if v else "false"
            lines.append(f"{f.name} = {v}")
        return "\n".join(lines) + "\n"


def _parse_bool(s: str) -> bool:
    low = s.lower()
    if low in ("true", "1", "yes", "on"):
        return True
    if low in ("false", "0", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _parse_layer_p(s: str) -> dict:
    out = {}
    for item in filter(None, (x.strip() for x in s.split(","))):
        name, _, rate = item.partition(":")
        if not rate:
            raise ValueError(f"expected layer:rate, got {item!r}")
        out[name.strip()] = float(rate)
    return out


_TYPES = {f.name: f.type for f in dataclasses.fields(RunConfig)}


def _convert(key: str, raw: str):
    kind = _TYPES[key]
    if key == "channels":
        return [int(x) for x in raw.split(",") if x.strip()]
    if key == "layer_p":
        return _parse_layer_p(raw)
    if kind == "bool":
        return _parse_bool(raw)
    if kind == "int":
        return int(raw)
    if kind == "float":
        return float(raw)
    return raw


def parse_config(text: str, source: str = "<config>") -> RunConfig:
    values = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        key, sep, raw = stripped.partition("=")
        key, raw = key.strip(), raw.strip()
        if not sep or not key:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {line.strip()!r}")
        if key not in _TYPES:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        if key in values:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        try:
            values[key] = _convert(key, raw)
        except ValueError as exc:
            raise ConfigError(f"{source}:{lineno}: bad value for {key!r}: {exc}") from None
    if "channels" in values and "depth" not in values:
        values["depth"] = len(values["channels"])
    return RunConfig(**values)


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    return parse_config(text, str(path))
