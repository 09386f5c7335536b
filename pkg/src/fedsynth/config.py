"""Experiment configuration: one JSON file, overridable from the command line."""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

from .data import DEFAULT_SITE_A, DEFAULT_SITE_B, SiteProfile
from .models import DiscriminatorConfig, GeneratorConfig
from .training import Hyperparams


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ExperimentConfig:
    resolution: int = 256
    hyper: Hyperparams = field(default_factory=Hyperparams)
    generator_base_channels: int = 64
    generator_channel_cap: int = 512
    dropout_rate: float = 0.5
    discriminator_base_channels: int = 64
    sites: tuple[SiteProfile, SiteProfile] = (DEFAULT_SITE_A, DEFAULT_SITE_B)
    n_train: int = 80
    n_test: int = 20
    data_seed: int = 1234
    out: str = "runs/experiment"
    checkpoint_every: int = 10
    weighting: str = "size"
    aggregate_discriminator: bool = True
    deterministic: bool = True
    montage_rows: int = 4

    def __post_init__(self):
        if self.n_train < 1 or self.n_test < 1:
            raise ConfigError(f"n_train and n_test must be >= 1 (got {self.n_train}, {self.n_test})")
        if len(self.sites) != 2:
            raise ConfigError("exactly two site profiles are required")
        if self.sites[0].site_id == self.sites[1].site_id:
            raise ConfigError("site ids must differ")
        if self.weighting not in ("size", "equal"):
            raise ConfigError(f"weighting must be 'size' or 'equal', got {self.weighting!r}")
        if self.checkpoint_every < 0 or self.montage_rows < 1:
            raise ConfigError("checkpoint_every must be >= 0 and montage_rows >= 1")
        try:
            self.generator_config()
            self.discriminator_config()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    def generator_config(self) -> GeneratorConfig:
        return GeneratorConfig(
            resolution=self.resolution,
            base_channels=self.generator_base_channels,
            channel_cap=self.generator_channel_cap,
            dropout_rate=self.dropout_rate,
        )

    def discriminator_config(self) -> DiscriminatorConfig:
        return DiscriminatorConfig(base_channels=self.discriminator_base_channels)

    @property
    def out_dir(self) -> Path:
        return Path(self.out)

    def to_dict(self) -> dict:
        return {
            "resolution": self.resolution,
            "hyper": self.hyper.to_dict(),
            "generator_base_channels": self.generator_base_channels,
            "generator_channel_cap": self.generator_channel_cap,
            "dropout_rate": self.dropout_rate,
            "discriminator_base_channels": self.discriminator_base_channels,
            "sites": [s.to_dict() for s in self.sites],
            "n_train": self.n_train,
            "n_test": self.n_test,
            "data_seed": self.data_seed,
            "out": self.out,
            "checkpoint_every": self.checkpoint_every,
            "weighting": self.weighting,
            "aggregate_discriminator": self.aggregate_discriminator,
            "deterministic": self.deterministic,
            "montage_rows": self.montage_rows,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = dict(d)
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        try:
            if "hyper" in d:
                d["hyper"] = Hyperparams.from_dict(d["hyper"])
            if "sites" in d:
                d["sites"] = tuple(SiteProfile.from_dict(s) for s in d["sites"])
            return cls(**d)
        except ConfigError:
            raise
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def with_overrides(self, **kw) -> "ExperimentConfig":
        hyper_kw = {k: kw.pop(k) for k in ("seed", "total_epochs") if kw.get(k) is not None}
        kw = {k: v for k, v in kw.items() if v is not None}
        try:
            hyper = replace(self.hyper, **hyper_kw)
            return replace(self, hyper=hyper, **kw)
        except ConfigError:
            raise
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc


def load_config(path: str | Path | None) -> ExperimentConfig:
    if path is None:
        return ExperimentConfig()
    try:
        raw = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return ExperimentConfig.from_dict(raw)
