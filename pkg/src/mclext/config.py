"""Run configuration: flat dotted keys (``section.field: value``) with schema validation.

Sections map to dataclasses: ``model``, ``train``, ``loss``, ``scene``,
``stft`` and ``geometry``.  Unknown keys and ill-typed values are errors.
"""
from __future__ import annotations

import dataclasses
import typing
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .dsp import StftConfig
from .errors import ConfigError
from .model import ModelConfig
from .objectives import LossConfig
from .scenesim import ArrayGeometry, SceneConfig
from .trainer import TrainConfig

SECTIONS = {
    "model": ModelConfig,
    "train": TrainConfig,
    "loss": LossConfig,
    "scene": SceneConfig,
    "stft": StftConfig,
    "geometry": ArrayGeometry,
}
_SKIP = {("train", "loss")}  # the loss lives in its own section


@dataclass(frozen=True)
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    scene: SceneConfig = field(default_factory=SceneConfig)
    stft: StftConfig = field(default_factory=StftConfig)
    geometry: ArrayGeometry = field(default_factory=ArrayGeometry)

    def __post_init__(self):
        if self.model.channels != self.geometry.mic_count:
            raise ConfigError(f"model.channels={self.model.channels} but geometry.mic_count={self.geometry.mic_count}")
        if self.scene.sample_rate != self.stft.sample_rate:
            raise ConfigError(f"scene.sample_rate={self.scene.sample_rate} but stft.sample_rate={self.stft.sample_rate}")
        if self.scene.hop_ms != self.stft.hop_ms:
            raise ConfigError(f"scene.hop_ms={self.scene.hop_ms} but stft.hop_ms={self.stft.hop_ms}")

    def flat(self) -> dict:
        out = {}
        for section, obj in (("model", self.model), ("train", self.train), ("loss", self.train.loss),
                             ("scene", self.scene), ("stft", self.stft), ("geometry", self.geometry)):
            for f in dataclasses.fields(obj):
                if (section, f.name) not in _SKIP:
                    out[f"{section}.{f.name}"] = getattr(obj, f.name)
        return out


def schema() -> dict[str, object]:
    """``{dotted key: type}`` for every accepted key."""
    out = {}
    for section, cls in SECTIONS.items():
        hints = typing.get_type_hints(cls)
        for f in dataclasses.fields(cls):
            if (section, f.name) not in _SKIP:
                out[f"{section}.{f.name}"] = hints[f.name]
    return out


def _coerce(key: str, value, tp):
    args = typing.get_args(tp)
    if type(None) in args:
        if value is None:
            return None
        tp = next(a for a in args if a is not type(None))
    if tp is bool:
        if isinstance(value, bool):
            return value
    elif tp is int:
        if isinstance(value, int) and not isinstance(value, bool):
            return value
    elif tp is float:
        if isinstance(value, (int, float)) and not isinstance(value, bool):
            return float(value)
    elif tp is str:
        if isinstance(value, str):
            return value
    raise ConfigError(f"{key}: expected {getattr(tp, '__name__', tp)}, got {value!r}")


def parse_override(text: str) -> tuple[str, object]:
    """``key=value`` with a YAML scalar value."""
    if "=" not in text:
        raise ConfigError(f"override {text!r} is not of the form key=value")
    key, raw = text.split("=", 1)
    try:
        return key.strip(), yaml.safe_load(raw)
    except yaml.YAMLError as exc:
        raise ConfigError(f"override {text!r}: {exc}") from exc


def load_flat(path) -> dict:
    path = Path(path)
    try:
        data = yaml.safe_load(path.read_text()) or {}
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: invalid YAML ({exc})") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be a mapping of dotted keys")
    for k, v in data.items():
        if isinstance(v, dict):
            raise ConfigError(f"{path}: nested mapping under {k!r}; use flat dotted keys such as '{k}.<field>'")
    return data


def build(values: dict) -> RunConfig:
    """Validate a flat ``{dotted key: value}`` map and build the run config."""
    sch = schema()
    per_section: dict[str, dict] = {s: {} for s in SECTIONS}
    for key, value in values.items():
        if key not in sch:
            raise ConfigError(f"unknown config key {key!r}")
        section, name = key.split(".", 1)
        per_section[section][name] = _coerce(key, value, sch[key])
    loss = LossConfig(**per_section["loss"])
    return RunConfig(
        model=ModelConfig(**per_section["model"]),
        train=TrainConfig(loss=loss, **per_section["train"]),
        scene=SceneConfig(**per_section["scene"]),
        stft=StftConfig(**per_section["stft"]),
        geometry=ArrayGeometry(**per_section["geometry"]),
    )


def load_run_config(path=None, overrides: typing.Sequence[str] = (), extra: dict | None = None) -> RunConfig:
    """File values, then ``extra`` (from dedicated flags), then ``key=value`` overrides."""
    values = load_flat(path) if path is not None else {}
    values.update(extra or {})
    for text in overrides:
        k, v = parse_override(text)
        values[k] = v
    return build(values)


def dump_flat(cfg: RunConfig) -> str:
    return yaml.safe_dump(cfg.flat(), sort_keys=False)


__all__ = ["RunConfig", "build", "dump_flat", "load_flat", "load_run_config", "parse_override", "schema"]
