"""Experiment configuration as plain ``section.key = value`` text."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

from .tensorcore import ConfigError

MODES = ("baseline", "filtered", "oracle", "multitask")


@dataclass
class DataSection:
    path: str = "data"
    seed: int = 7
    k: int = 6
    n_train: int = 200
    n_val: int = 50
    size: int = 64
    distractor_rate: float = 0.3


@dataclass
class NetSection:
    stages: tuple = ((16, 2), (32, 2))
    classifier_channels: int = 64
    dilated_last: bool = False
    share_features: bool = True


@dataclass
class HeadSection:
    kind: str = "dc"
    hidden_units: int = 128
    spp_levels: tuple = (1, 2, 4)
    dc_window: int = 4
    dc_stride: int = 2
    dc_channels: int = 64
    embed_dim: int = 16
    meta: str = "ohe"


@dataclass
class TrainSection:
    mode: str = "filtered"
    epochs: int = 30
    learning_rate: float = 1e-3
    momentum: float = 0.99
    loss_balance: float = 1.0
    auto_balance: bool = False
    flip_augment: bool = True
    scale_set: tuple = (0.7, 0.8, 0.9, 1.0, 1.1, 1.2, 1.3)
    seed: int = 7
    filter_order: str = "filter_then_upsample"
    eps: float = 1e-7
    oracle_m: float = 30.0
    grad_clip: float = 0.0


@dataclass
class ExperimentSection:
    name: str = "run"
    out_dir: str = "runs"


@dataclass
class ExperimentConfig:
    experiment: ExperimentSection = field(default_factory=ExperimentSection)
    data: DataSection = field(default_factory=DataSection)
    net: NetSection = field(default_factory=NetSection)
    head: HeadSection = field(default_factory=HeadSection)
    train: TrainSection = field(default_factory=TrainSection)

    def validate(self) -> "ExperimentConfig":
        t = self.train
        if t.mode not in MODES:
            raise ConfigError(f"train.mode must be one of {MODES}, got {t.mode!r}")
        if t.loss_balance <= 0:
            raise ConfigError("train.loss_balance must be positive")
        if not t.scale_set:
            raise ConfigError("train.scale_set must not be empty")
        if t.epochs < 1:
            raise ConfigError("train.epochs must be >= 1")
        if not 0 <= t.momentum < 1:
            raise ConfigError("train.momentum must lie in [0, 1)")
        return self

    def override(self, key: str, value: str) -> None:
        section, _, name = key.partition(".")
        sec = getattr(self, section, None)
        if sec is None or not dataclasses.is_dataclass(sec) or not name:
            raise ConfigError(f"unknown config key {key!r}")
        fields = {f.name: f for f in dataclasses.fields(sec)}
        if name not in fields:
            raise ConfigError(f"unknown config key {key!r}")
        setattr(sec, name, _coerce(getattr(sec, name), value.strip(), key))

    def to_text(self) -> str:
        lines = []
        for sec in dataclasses.fields(self):
            obj = getattr(self, sec.name)
            for f in dataclasses.fields(obj):
                lines.append(f"{sec.name}.{f.name} = {_render(getattr(obj, f.name))}")
        return "\n".join(lines) + "\n"


def _render(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        if value and isinstance(value[0], tuple):
            return " ".join(":".join(str(x) for x in item) for item in value)
        return " ".join(repr(x) if isinstance(x, float) else str(x) for x in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _coerce(current, text: str, key: str):
    try:
        if isinstance(current, bool):
            low = text.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(text)
            return low in ("true", "1", "yes")
        if isinstance(current, int):
            return int(text)
        if isinstance(current, float):
            return float(text)
        if isinstance(current, tuple):
            items = text.replace(",", " ").split()
            if current and isinstance(current[0], tuple):
                return tuple(tuple(int(x) for x in it.split(":")) for it in items)
            if current and isinstance(current[0], float):
                return tuple(float(x) for x in items)
            return tuple(int(x) for x in items)
        return text
    except ValueError:
        raise ConfigError(f"bad value for {key}: {text!r}") from None


def parse_config(text: str, base: ExperimentConfig | None = None) -> ExperimentConfig:
    cfg = base or ExperimentConfig()
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {n}: expected 'section.key = value', got {raw!r}")
        key, value = line.split("=", 1)
        cfg.override(key.strip(), value)
    return cfg.validate()


def load_config(path) -> ExperimentConfig:
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file {p} does not exist")
    return parse_config(p.read_text())
