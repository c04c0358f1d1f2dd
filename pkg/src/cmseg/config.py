"""Experiment configuration: dataclasses plus an INI reader/writer.

The file has a ``[train]`` section for ``TrainConfig`` fields and ``[model]`` /
``[loss]`` sections for the nested configs; keys are the field names.  Overrides
use ``section.key=value`` (``train.`` may be omitted).
"""

from __future__ import annotations

import configparser
import dataclasses
import hashlib
import json
import typing
from dataclasses import dataclass, field
from pathlib import Path

from .losses import LossConfig
from .models import ModelConfig

PROTOCOLS = ("baseline", "fine-tune", "joint", "conditional-interleaved")
WARMUP_FRACTIONS = (0.02, 0.04, 0.06)


class ConfigError(ValueError):
    pass


@dataclass
class TrainConfig:
    protocol: str = "conditional-interleaved"
    epochs: int = 150
    peak_lr: float = 1e-3
    warmup_fraction: float = 0.04
    weight_decay: float = 1e-5
    betas: tuple[float, ...] = (0.9, 0.999)
    adam_eps: float = 1e-8
    grad_clip: float = 1.0  # global-norm clip; 0 disables
    samples_per_batch: int = 4  # N_s
    crops_per_sample: int = 2  # N_c
    seed: int = 0
    manifest: str = ""
    target_modality: int = 1
    assistant_modality: int = 0
    modality_sampling: str = "proportional"
    val_every: int = 1
    overlap: float = 0.5
    infer_batch: int = 4
    precision: str = "f32"
    deterministic: bool = True
    source_checkpoint: str = ""
    out_dir: str = "runs/default"
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossConfig = field(default_factory=LossConfig)

    def __post_init__(self):
        self.betas = tuple(float(b) for b in self.betas)

    @property
    def effective_batch(self) -> int:
        return self.samples_per_batch * self.crops_per_sample

    def validate(self) -> "TrainConfig":
        if self.protocol not in PROTOCOLS:
            raise ConfigError(f"protocol must be one of {PROTOCOLS}, got {self.protocol!r}")
        if not any(abs(self.warmup_fraction - w) < 1e-12 for w in WARMUP_FRACTIONS):
            raise ConfigError(f"warmup_fraction must be one of {WARMUP_FRACTIONS}")
        if self.epochs < 1 or self.samples_per_batch < 1 or self.crops_per_sample < 1:
            raise ConfigError("epochs, samples_per_batch and crops_per_sample must be >= 1")
        if self.peak_lr <= 0 or self.weight_decay < 0 or self.grad_clip < 0:
            raise ConfigError("peak_lr must be > 0; weight_decay and grad_clip >= 0")
        if len(self.betas) != 2 or not all(0 <= b < 1 for b in self.betas):
            raise ConfigError("betas must be two values in [0, 1)")
        if self.loss.lambda_dice <= 0 or self.loss.lambda_focal <= 0:
            raise ConfigError("lambda_dice and lambda_focal must be > 0")
        if self.modality_sampling not in ("proportional", "uniform"):
            raise ConfigError("modality_sampling must be 'proportional' or 'uniform'")
        if not 0 <= self.overlap < 1:
            raise ConfigError("overlap must be in [0, 1)")
        if self.precision not in ("f32", "f64"):
            raise ConfigError("precision must be f32 or f64")
        if self.protocol == "fine-tune" and not self.source_checkpoint:
            raise ConfigError("fine-tune needs source_checkpoint")
        if self.target_modality == self.assistant_modality:
            raise ConfigError("target and assistant modality must differ")
        return self

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def hash(self) -> str:
        """Digest of everything except output location and fine-tune source."""
        d = self.to_dict()
        for key in ("out_dir", "source_checkpoint", "manifest"):
            d.pop(key)
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]


def _convert(value: str, tp):
    origin = typing.get_origin(tp)
    if origin is tuple:
        inner = typing.get_args(tp)[0]
        items = [v for v in value.replace(",", " ").split() if v]
        return tuple(inner(v) for v in items)
    if tp is bool:
        low = value.strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"not a boolean: {value!r}")
    try:
        return tp(value.strip())
    except ValueError:
        raise ConfigError(f"cannot parse {value!r} as {tp.__name__}") from None


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return " ".join(str(v) for v in value)
    return str(value)


def _set_field(obj, key: str, value: str) -> None:
    hints = typing.get_type_hints(type(obj))
    names = {f.name for f in dataclasses.fields(obj)}
    if key not in names or dataclasses.is_dataclass(hints[key]):
        raise ConfigError(f"unknown key {key!r} for {type(obj).__name__}")
    setattr(obj, key, _convert(value, hints[key]))


def apply_override(cfg: TrainConfig, assignment: str) -> None:
    key, sep, value = assignment.partition("=")
    if not sep:
        raise ConfigError(f"override must look like key=value, got {assignment!r}")
    section, _, name = key.strip().rpartition(".")
    target = {"": cfg, "train": cfg, "model": cfg.model, "loss": cfg.loss}.get(section)
    if target is None:
        raise ConfigError(f"unknown section {section!r}")
    _set_field(target, name, value)
    target.__post_init__()


def load_config(path=None, overrides=()) -> TrainConfig:
    cfg = TrainConfig()
    if path:
        parser = configparser.ConfigParser(interpolation=None)
        parser.optionxform = str
        if not parser.read(path):
            raise ConfigError(f"cannot read config file {path}")
        for section in parser.sections():
            for key, value in parser.items(section):
                apply_override(cfg, f"{section}.{key}={value}")
    for item in overrides:
        apply_override(cfg, item)
    return cfg


def dump_config(cfg: TrainConfig) -> str:
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    parser["train"] = {f.name: _format(getattr(cfg, f.name)) for f in dataclasses.fields(cfg)
                       if f.name not in ("model", "loss")}
    parser["model"] = {f.name: _format(getattr(cfg.model, f.name)) for f in dataclasses.fields(cfg.model)}
    parser["loss"] = {f.name: _format(getattr(cfg.loss, f.name)) for f in dataclasses.fields(cfg.loss)}
    lines = []
    for section in parser.sections():
        lines.append(f"[{section}]")
        lines += [f"{k} = {v}" for k, v in parser[section].items()]
        lines.append("")
    return "\n".join(lines)


def config_from_dict(d: dict) -> TrainConfig:
    d = dict(d)
    model = ModelConfig(**d.pop("model"))
    loss = LossConfig(**d.pop("loss"))
    return TrainConfig(**d, model=model, loss=loss)


def save_config(cfg: TrainConfig, path) -> None:
    Path(path).write_text(dump_config(cfg))
