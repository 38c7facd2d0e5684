"""Run configuration: everything a ``train`` invocation needs, as one JSON file."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

from .. import _serde
from .._serde import ConfigError
from ..frames import EncoderConfig
from ..model import ModelConfig
from ..pipeline import TrainConfig


def _default_train() -> TrainConfig:
    return TrainConfig(encoder=EncoderConfig(spatial_size=ModelConfig().image_size))


@dataclass(frozen=True)
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=_default_train)
    train_manifest: str | None = None
    test_manifest: str | None = None
    output_dir: str = "runs/default"

    def __post_init__(self):
        m, t = self.model, self.train
        if t.clip_len != m.clip_len:
            raise ConfigError("$.train.clip_len", f"{t.clip_len} != model.clip_len {m.clip_len}")
        if t.encoder.spatial_size != m.image_size:
            raise ConfigError(
                "$.train.encoder.spatial_size", f"{t.encoder.spatial_size} != model.image_size {m.image_size}"
            )
        if t.encoder.channels != m.in_channels:
            raise ConfigError(
                "$.train.encoder.channel_layout",
                f"gives {t.encoder.channels} channels, model.in_channels is {m.in_channels}",
            )

    def to_dict(self) -> dict:
        return _serde.to_dict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        return _serde.from_dict(cls, data)


def load_run_config(path) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"config file not found: {path}")
    try:
        data = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError("$", f"invalid JSON: {exc}") from None
    return RunConfig.from_dict(data)


def save_run_config(config: RunConfig, path) -> None:
    Path(path).write_text(json.dumps(config.to_dict(), indent=2))
