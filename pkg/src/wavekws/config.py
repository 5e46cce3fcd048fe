"""Run configuration: every tunable knob in one YAML document.

Unknown sections or keys are rejected so that typos fail loudly.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from wavekws.dataio import AugmentSpec
from wavekws.errors import ConfigError
from wavekws.evaluation import SmoothingConfig, TriggerConfig
from wavekws.features import FeatureConfig
from wavekws.labeling import LabelingConfig, VadConfig
from wavekws.network import Architecture
from wavekws.training import TrainConfig

SCHEMA_VERSION = 1

SECTIONS = {
    "features": FeatureConfig,
    "labeling": LabelingConfig,
    "vad": VadConfig,
    "network": Architecture,
    "training": TrainConfig,
    "smoothing": SmoothingConfig,
    "trigger": TriggerConfig,
    "augment": AugmentSpec,
}


@dataclass(frozen=True)
class RunConfig:
    features: FeatureConfig = field(default_factory=FeatureConfig)
    labeling: LabelingConfig = field(default_factory=LabelingConfig)
    vad: VadConfig = field(default_factory=VadConfig)
    network: Architecture = field(default_factory=Architecture)
    training: TrainConfig = field(default_factory=TrainConfig)
    smoothing: SmoothingConfig = field(default_factory=SmoothingConfig)
    trigger: TriggerConfig = field(default_factory=TriggerConfig)
    augment: AugmentSpec = field(default_factory=AugmentSpec)

    def to_dict(self) -> dict:
        out = {"schema_version": SCHEMA_VERSION}
        for name in SECTIONS:
            d = dataclasses.asdict(getattr(self, name))
            out[name] = {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}
        return out

    @classmethod
    def from_dict(cls, d: dict | None) -> RunConfig:
        d = dict(d or {})
        version = d.pop("schema_version", SCHEMA_VERSION)
        if version != SCHEMA_VERSION:
            raise ConfigError(f"unsupported config schema_version {version} (expected {SCHEMA_VERSION})")
        unknown = set(d) - set(SECTIONS)
        if unknown:
            raise ConfigError(f"unknown config section(s): {', '.join(sorted(unknown))}")
        kwargs = {}
        for name, klass in SECTIONS.items():
            section = d.get(name) or {}
            if not isinstance(section, dict):
                raise ConfigError(f"config section {name!r} must be a mapping")
            bad = set(section) - {f.name for f in dataclasses.fields(klass)}
            if bad:
                raise ConfigError(f"unknown config key(s) in {name!r}: {', '.join(f'{name}.{k}' for k in sorted(bad))}")
            try:
                kwargs[name] = klass(**section)
            except TypeError as err:
                raise ConfigError(f"invalid {name!r} section: {err}") from None
        return cls(**kwargs)

    def replace(self, section: str, **changes) -> RunConfig:
        return dataclasses.replace(self, **{section: dataclasses.replace(getattr(self, section), **changes)})


def load_config(path) -> RunConfig:
    try:
        text = Path(path).read_text()
    except OSError as err:
        raise ConfigError(f"cannot read config {path}: {err}") from None
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as err:
        raise ConfigError(f"config {path} is not valid YAML: {err}") from None
    if data is not None and not isinstance(data, dict):
        raise ConfigError(f"config {path} must be a mapping")
    return RunConfig.from_dict(data)


def dump_config(config: RunConfig, path):
    Path(path).write_text(yaml.safe_dump(config.to_dict(), sort_keys=False))
