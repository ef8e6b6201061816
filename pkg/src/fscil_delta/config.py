"""Experiment configuration files (YAML) with strict validation.

Unknown keys anywhere are rejected.  Example::

    seed: 0
    encoder:
      embed_dim: 32
      depth: 6
      adapted_blocks: 6
      update_target: attention_qkv
    trainer:
      epochs: 30
      batch_size: 32
    protocol:
      base_classes: 20
      ways: 5
      shots: 5
      sessions: 4
    data:
      source: synthetic
      classes: 40
      samples_per_class: 30
"""

from __future__ import annotations

from pathlib import Path
from typing import Literal, Optional

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from .encoder import EncoderConfig, UpdateTarget
from .errors import ContractError
from .trainer import TrainConfig


class ConfigError(ValueError):
    """Configuration failed to parse or validate; ``str()`` lists each offending field."""


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class EncoderSection(_Strict):
    image_size: int = 16
    channels: int = 3
    patch_size: int = 4
    embed_dim: int = 32
    depth: int = 6
    heads: int = 4
    mlp_hidden: Optional[int] = None
    adapted_blocks: Optional[int] = None
    update_target: UpdateTarget = UpdateTarget.ATTENTION_QKV
    share_updates: bool = True

    @model_validator(mode="after")
    def _check(self):
        try:
            self.build()
        except ContractError as exc:
            raise ValueError(str(exc)) from None
        return self

    def build(self) -> EncoderConfig:
        return EncoderConfig(**self.model_dump())


class TrainerSection(_Strict):
    epochs: int = Field(30, ge=0)
    batch_size: int = Field(32, ge=1)
    learning_rate: float = Field(0.05, ge=0)
    momentum: float = Field(0.9, ge=0, lt=1)
    temperature: float = Field(16.0, gt=0)
    precision: Literal["double", "single"] = "double"

    def build(self, seed: int) -> TrainConfig:
        return TrainConfig(
            epochs=self.epochs, batch_size=self.batch_size, learning_rate=self.learning_rate,
            momentum=self.momentum, seed=seed, precision=self.precision, temperature=self.temperature,
        )


class ProtocolSection(_Strict):
    base_classes: int = Field(ge=1)
    ways: int = Field(ge=1)
    shots: int = Field(ge=1)
    sessions: int = Field(ge=0)


class DataSection(_Strict):
    source: Literal["synthetic", "file"]
    classes: int = Field(40, ge=2)
    samples_per_class: int = Field(30, ge=2)
    separation: float = Field(1.0, gt=0)
    noise_std: float = Field(0.2, ge=0)
    train_fraction: float = Field(0.8, gt=0, lt=1)
    path: Optional[str] = None

    @model_validator(mode="after")
    def _check(self):
        if self.source == "file" and not self.path:
            raise ValueError("data.path is required when data.source is 'file'")
        return self


class ExperimentConfig(_Strict):
    seed: int
    encoder: EncoderSection = EncoderSection()
    trainer: TrainerSection = TrainerSection()
    protocol: ProtocolSection
    data: DataSection
    output: Optional[str] = None

    def encoder_config(self) -> EncoderConfig:
        return self.encoder.build()

    def train_config(self) -> TrainConfig:
        return self.trainer.build(self.seed)

    def echo(self) -> dict:
        return self.model_dump(mode="json")


def _describe(exc: ValidationError) -> str:
    lines = []
    for err in exc.errors():
        where = ".".join(str(p) for p in err["loc"]) or "<root>"
        lines.append(f"{where}: {err['msg']}")
    return "\n".join(lines)


def parse_config(raw: dict) -> ExperimentConfig:
    if not isinstance(raw, dict):
        raise ConfigError("<root>: config must be a mapping")
    try:
        return ExperimentConfig.model_validate(raw)
    except ValidationError as exc:
        raise ConfigError(_describe(exc)) from None


def load_config(path: str | Path) -> ExperimentConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"config {path} is not valid YAML: {exc}") from None
    return parse_config(raw if raw is not None else {})
