"""Run configuration and its INI-style file format."""

from __future__ import annotations

import configparser
import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigError
from .postprocess import PostprocessConfig
from .preprocess import AugmentConfig, MixupPolicy


@dataclass
class DataConfig:
    dataset: str = ""
    image_size: int = 192
    frame_mode: str = "three"
    split: str = "random"            # random | subject
    holdout_subject: str = ""
    train_fraction: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.image_size <= 0 or self.image_size % 16:
            raise ConfigError(f"image_size must be a positive multiple of 16, got {self.image_size}")
        if self.frame_mode not in ("single", "three"):
            raise ConfigError(f"frame_mode must be 'single' or 'three', got {self.frame_mode!r}")
        if self.split not in ("random", "subject"):
            raise ConfigError(f"split must be 'random' or 'subject', got {self.split!r}")
        if self.split == "subject" and not self.holdout_subject:
            raise ConfigError("holdout_subject is required when split = subject")
        if not 0 < self.train_fraction <= 1:
            raise ConfigError("train_fraction must be in (0, 1]")


@dataclass
class ModelConfig:
    channel_scale: float = 1.0
    dropout2d: float = 0.15

    def __post_init__(self):
        if not self.channel_scale > 0:
            raise ConfigError("channel_scale must be > 0")
        if not 0 <= self.dropout2d < 1:
            raise ConfigError("dropout2d must be in [0, 1)")


@dataclass
class TrainConfig:
    epochs: int = 200
    batch_size: int = 16
    learning_rate: float = 1e-3
    momentum: float = 0.9
    weight_decay: float = 1e-3
    classifier_epochs: int = 60
    threads: int = 1

    def __post_init__(self):
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if not self.learning_rate >= 0:
            raise ConfigError("learning_rate must be >= 0")
        if not 0 <= self.momentum < 1:
            raise ConfigError("momentum must be in [0, 1)")
        if not self.weight_decay >= 0:
            raise ConfigError("weight_decay must be >= 0")
        if self.classifier_epochs < 0:
            raise ConfigError("classifier_epochs must be >= 0")
        if self.threads < 1:
            raise ConfigError("threads must be >= 1")


@dataclass
class LossConfig:
    alpha_bce: float = 0.25
    alpha_dice: float = 1.0
    w_c: float | None = None          # None: background/foreground ratio of the training masks

    def __post_init__(self):
        if not self.alpha_bce >= 0:
            raise ConfigError("alpha_bce must be >= 0")
        if not self.alpha_dice >= 0:
            raise ConfigError("alpha_dice must be >= 0")
        if self.w_c is not None and not self.w_c >= 0:
            raise ConfigError("w_c must be >= 0")


@dataclass
class RunConfig:
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    mixup: MixupPolicy = field(default_factory=MixupPolicy)
    postprocess: PostprocessConfig = field(default_factory=PostprocessConfig)
    output_dir: str = "run"

    def to_ini(self):
        cp = configparser.ConfigParser(interpolation=None)
        for f in dataclasses.fields(self):
            section = getattr(self, f.name)
            if not dataclasses.is_dataclass(section):
                continue
            cp[f.name] = {g.name: _fmt(getattr(section, g.name))
                          for g in dataclasses.fields(section)}
        cp["output"] = {"dir": self.output_dir}
        lines = []
        for name in cp.sections():
            lines.append(f"[{name}]")
            lines += [f"{k} = {v}" for k, v in cp[name].items()]
            lines.append("")
        return "\n".join(lines)

    def save(self, path):
        Path(path).write_text(self.to_ini())

    @classmethod
    def from_ini(cls, text):
        cp = configparser.ConfigParser(interpolation=None)
        try:
            cp.read_string(text)
        except configparser.Error as e:
            raise ConfigError(f"unparsable config: {e}") from e
        known = {f.name: f for f in dataclasses.fields(cls)}
        kwargs = {}
        for name in cp.sections():
            if name == "output":
                kwargs["output_dir"] = cp[name].get("dir", "run")
                continue
            if name not in known:
                raise ConfigError(f"unknown config section [{name}]")
            sec_cls = known[name].default_factory
            defaults = sec_cls()
            sec_fields = {g.name for g in dataclasses.fields(sec_cls)}
            values = {}
            for key, raw in cp[name].items():
                if key not in sec_fields:
                    raise ConfigError(f"unknown config field {name}.{key}")
                try:
                    values[key] = _parse(raw, getattr(defaults, key))
                except ValueError as e:
                    raise ConfigError(f"{name}.{key}: cannot parse {raw!r}") from e
            try:
                kwargs[name] = sec_cls(**values)
            except (ConfigError, ValueError) as e:
                raise ConfigError(f"[{name}] {e}") from e
        return cls(**kwargs)

    @classmethod
    def load(cls, path):
        try:
            text = Path(path).read_text()
        except OSError as e:
            raise ConfigError(f"cannot read config {path}: {e}") from e
        return cls.from_ini(text)


def _fmt(v):
    if v is None:
        return "auto"
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ", ".join(_fmt(x) for x in v)
    if isinstance(v, float):
        return repr(float(v))
    return str(v)


def _parse(raw, default):
    raw = raw.strip()
    if default is None:
        return None if raw == "auto" else float(raw)
    if isinstance(default, bool):
        if raw.lower() in ("true", "1", "yes", "on"):
            return True
        if raw.lower() in ("false", "0", "no", "off"):
            return False
        raise ValueError(raw)
    if isinstance(default, tuple):
        return tuple(_parse(p, default[0]) for p in raw.split(","))
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    return raw
