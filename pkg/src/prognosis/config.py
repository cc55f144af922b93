"""Run configuration and its flat ``section.key = value`` text format.

Example::

    # comments start with '#'
    model.heads = 4
    model.cnn_channels = 16,32,64
    optim.lr = 0.0001
    train.epochs = 50

Unknown keys are rejected. Every key has a default; where the method fixes a
value (optimizer settings, heads, widths, dropout) the default is that value.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any

from .losses import LossWeights
from .model import ModelConfig


class ConfigError(ValueError):
    pass


@dataclass
class OptimConfig:
    lr: float = 1e-4
    beta1: float = 0.95
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-4


@dataclass
class LossConfig:
    w1: float = 1.0
    w2: float = 1.0
    w3: float = 1.0
    mtl: bool = False

    def __post_init__(self):
        self.weights()

    def weights(self) -> LossWeights:
        return LossWeights(self.w1, self.w2, self.w3)


@dataclass
class DataConfig:
    # manifest path, or empty for an in-memory synthetic dataset
    manifest: str = ""
    transition_prob: float = 1.0
    n_samples: int = 1000
    mask_fraction: float = 0.0
    corpus: str = ""
    corpus_size: int = 512
    n_centers: int = 1
    align_tolerance_months: int = 6


@dataclass
class SplitConfig:
    # fixed | kfold | center
    mode: str = "fixed"
    k: int = 3
    valid_fraction: float = 0.2


@dataclass
class AugmentConfig:
    enabled: bool = True
    noise_sigma: float = 0.3
    rotation_degrees: float = 10.0
    gamma_low: float = 0.5
    gamma_high: float = 1.5
    resize_ratio: float = 280 / 256


@dataclass
class TrainConfig:
    epochs: int = 50
    batch_size: int = 32
    eval_batch_size: int = 256
    patience: int = 10
    # model selection and early stopping: ba (validation BA) or loss (validation loss)
    select: str = "ba"
    seed: int = 0
    out: str = "runs/default"

    def __post_init__(self):
        if self.select not in ("ba", "loss"):
            raise ValueError(f"train.select must be 'ba' or 'loss', got {self.select!r}")


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    data: DataConfig = field(default_factory=DataConfig)
    split: SplitConfig = field(default_factory=SplitConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    train: TrainConfig = field(default_factory=TrainConfig)

    def to_flat(self) -> dict[str, str]:
        flat = {}
        for sec in fields(self):
            section = getattr(self, sec.name)
            for f in fields(section):
                flat[f"{sec.name}.{f.name}"] = _format(getattr(section, f.name))
        return flat

    def dumps(self) -> str:
        return "".join(f"{k} = {v}\n" for k, v in sorted(self.to_flat().items()))

    def save(self, path) -> None:
        Path(path).write_text(self.dumps())

    @classmethod
    def from_flat(cls, items: dict[str, str]) -> "RunConfig":
        sections: dict[str, dict[str, Any]] = {f.name: {} for f in fields(cls)}
        defaults = cls.__new__(cls)
        for f in fields(cls):
            setattr(defaults, f.name, f.default_factory())
        for key, raw in items.items():
            if "." not in key:
                raise ConfigError(f"config key {key!r} must be 'section.name'")
            sec, name = key.split(".", 1)
            if sec not in sections:
                raise ConfigError(f"unknown config section {sec!r} in {key!r}")
            section_default = getattr(defaults, sec)
            known = {f.name: f for f in fields(section_default)}
            if name not in known:
                raise ConfigError(f"unknown config key {key!r}")
            sections[sec][name] = _parse(raw, getattr(section_default, name), key)
        kwargs = {}
        for f in fields(cls):
            base = dataclasses.asdict(getattr(defaults, f.name))
            base.update(sections[f.name])
            try:
                kwargs[f.name] = type(getattr(defaults, f.name))(**base)
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"invalid [{f.name}] settings: {exc}") from None
        return cls(**kwargs)

    @classmethod
    def loads(cls, text: str) -> "RunConfig":
        items = {}
        for lineno, line in enumerate(text.splitlines(), start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
            k, v = line.split("=", 1)
            items[k.strip()] = v.strip()
        return cls.from_flat(items)

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
        return cls.loads(text)

    def override(self, **items: str) -> "RunConfig":
        flat = self.to_flat()
        flat.update(items)
        return RunConfig.from_flat(flat)


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (tuple, list)):
        return ",".join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _parse(raw: str, default, key: str):
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            return tuple(int(v) for v in raw.split(",") if v.strip())
        return raw
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {type(default).__name__}") from None
