"""Run configuration: one JSON document holding every module's settings."""

from __future__ import annotations

import json
from dataclasses import dataclass, field, fields

from .data import GeneratorSpec
from .downstream import DownstreamConfig
from .errors import ConfigError
from .pretraining import PretrainConfig
from .tsne import TsneConfig

_SECTIONS = {
    "generator": GeneratorSpec,
    "pretrain": PretrainConfig,
    "finetune": DownstreamConfig,
    "tsne": TsneConfig,
}


def _check_keys(section: str, doc: dict):
    if not isinstance(doc, dict):
        raise ConfigError(f"section {section!r} must be an object")
    allowed = {f.name for f in fields(_SECTIONS[section])}
    unknown = set(doc) - allowed
    if unknown:
        raise ConfigError(f"unknown {section} keys: {sorted(unknown)}")


@dataclass
class RunConfig:
    generator: dict = field(default_factory=dict)
    pretrain: dict = field(default_factory=dict)
    finetune: dict = field(default_factory=dict)
    tsne: dict = field(default_factory=dict)
    split_seed: int = 0

    def __post_init__(self):
        for name in _SECTIONS:
            _check_keys(name, getattr(self, name))

    @classmethod
    def from_dict(cls, doc: dict) -> "RunConfig":
        if not isinstance(doc, dict):
            raise ConfigError("run config must be a JSON object")
        unknown = set(doc) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"unknown run config keys: {sorted(unknown)}")
        return cls(**doc)

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            with open(path) as fh:
                doc = json.load(fh)
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path} is not valid JSON: {exc}") from None
        return cls.from_dict(doc)

    def generator_spec(self, **overrides) -> GeneratorSpec:
        return GeneratorSpec.from_dict({**self.generator, **_present(overrides)})

    def pretrain_config(self, objective: str, **overrides) -> PretrainConfig:
        merged = {k: v for k, v in {**self.pretrain, **_present(overrides)}.items() if k != "objective"}
        cfg = PretrainConfig.defaults(objective, **merged)
        cfg.validate()
        return cfg

    def finetune_config(self, **overrides) -> DownstreamConfig:
        merged = {**self.finetune, **_present(overrides)}
        _check_keys("finetune", merged)
        cfg = DownstreamConfig(**merged)
        cfg.validate()
        return cfg

    def tsne_config(self, **overrides) -> TsneConfig:
        merged = {**self.tsne, **_present(overrides)}
        _check_keys("tsne", merged)
        cfg = TsneConfig(**merged)
        cfg.validate()
        return cfg


def _present(overrides: dict) -> dict:
    """Drop flags the user did not pass (argparse leaves them as None)."""
    return {k: v for k, v in overrides.items() if v is not None}
