"""Flat ``key = value`` run configuration with layered defaults.

Precedence, lowest first: built-in defaults, the named profile, the config
file, command-line overrides. The resolved values are written back out as a
snapshot in the same format.
"""
from __future__ import annotations

import os
from dataclasses import dataclass, field, fields
from pathlib import Path

from .losses import LossWeights
from .networks import (
    TINY_DISCRIMINATOR,
    TINY_GENERATOR,
    DiscriminatorConfig,
    GeneratorConfig,
)
from .training import TrainConfig

DEVICE_ENV = "WEAKLOC_DEVICE"


class ConfigError(ValueError):
    pass


MODEL_PRESETS = {
    "reference": (GeneratorConfig(), DiscriminatorConfig()),
    "tiny": (TINY_GENERATOR, TINY_DISCRIMINATOR),
}

# desk-scale schedule of the training smoke test
PROFILES = {
    "default": {},
    "smoke": {
        "model_preset": "tiny",
        "image_size": 64,
        "n_train": 200,
        "n_val": 50,
        "n_test": 100,
        "max_epochs": 30,
        "batch_size": 8,
    },
}


@dataclass
class RunConfig:
    # dataset
    image_size: int = 256
    n_train: int = 2000
    n_val: int = 200
    n_test: int = 200
    data_seed: int = 0
    peak_displacement: float = 10.0
    workers: int = 1
    # models
    model_preset: str = "reference"
    # optimisation; mirrors TrainConfig
    learning_rate: float = 1e-4
    adam_beta1: float = 0.5
    adam_beta2: float = 0.999
    critic_updates_per_gen: int = 5
    batch_size: int = 8
    max_epochs: int = 100
    seed: int = 0
    checkpoint_interval: int = 10
    gp_partner: str = "same_class"
    fake_critic: str = "target"
    eval_batch_size: int = 16
    device: str = "cpu"
    # loss weights; mirrors LossWeights
    lambda_adv_d: float = 20.0
    lambda_gp: float = 10.0
    lambda_id: float = 50.0
    lambda_rec: float = 50.0
    lambda_adv_g: float = 1.0
    lambda_cls_g: float = 1.0
    lambda_cls_d: float = 5.0
    profile: str = "default"
    sources: dict = field(default_factory=dict, repr=False, compare=False)

    def validate(self) -> None:
        if self.model_preset not in MODEL_PRESETS:
            raise ConfigError(f"model_preset must be one of {sorted(MODEL_PRESETS)}")
        if self.gp_partner not in ("same_class", "translated"):
            raise ConfigError("gp_partner must be 'same_class' or 'translated'")
        if self.fake_critic not in ("target", "source"):
            raise ConfigError("fake_critic must be 'target' or 'source'")
        if self.batch_size < 2 or self.batch_size % 2:
            raise ConfigError("batch_size must be even and >= 2")
        if self.max_epochs < 0 or self.critic_updates_per_gen < 1:
            raise ConfigError("max_epochs >= 0 and critic_updates_per_gen >= 1 required")
        if self.image_size <= 0 or 256 % self.image_size:
            raise ConfigError("image_size must divide 256")
        try:
            self.weights()
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    def weights(self) -> LossWeights:
        return LossWeights(
            adv_d=self.lambda_adv_d, gp=self.lambda_gp, id=self.lambda_id, rec=self.lambda_rec,
            adv_g=self.lambda_adv_g, cls_g=self.lambda_cls_g, cls_d=self.lambda_cls_d,
        )

    def train_config(self) -> TrainConfig:
        names = {f.name for f in fields(TrainConfig)} - {"weights"}
        return TrainConfig(weights=self.weights(), **{n: getattr(self, n) for n in names})

    def model_configs(self) -> tuple[GeneratorConfig, DiscriminatorConfig]:
        return MODEL_PRESETS[self.model_preset]

    def values(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self) if f.name != "sources"}

    def dump(self, path) -> None:
        lines = [f"{k} = {v}" for k, v in self.values().items()]
        Path(path).write_text("\n".join(lines) + "\n")


_FIELDS = {f.name: f for f in fields(RunConfig) if f.name != "sources"}


def _coerce(key: str, raw):
    if key not in _FIELDS:
        raise ConfigError(f"unknown config key {key!r}")
    kind = type(getattr(RunConfig(), key))
    if isinstance(raw, kind) and not (kind is int and isinstance(raw, bool)):
        return raw
    try:
        if kind is int:
            return int(str(raw))
        if kind is float:
            return float(str(raw))
        return str(raw)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {kind.__name__}") from None


def read_config_file(path) -> dict[str, str]:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file {path} not found")
    out = {}
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        _coerce(key, value)
        out[key] = value
    return out


def resolve(config_file=None, overrides: dict | None = None, profile: str | None = None) -> RunConfig:
    """Layer defaults, profile, file and overrides; record where each value came from."""
    file_values = read_config_file(config_file) if config_file else {}
    overrides = {k: v for k, v in (overrides or {}).items() if v is not None}
    profile = overrides.get("profile") or file_values.get("profile") or profile or "default"
    if profile not in PROFILES:
        raise ConfigError(f"unknown profile {profile!r}; choose from {sorted(PROFILES)}")

    cfg = RunConfig()
    sources = {k: "default" for k in _FIELDS}
    env_device = os.environ.get(DEVICE_ENV)
    if env_device:
        cfg.device = env_device
        sources["device"] = "env"
    layers = [(PROFILES[profile], "profile"), (file_values, "file"), (overrides, "flag")]
    for values, origin in layers:
        for k, v in values.items():
            setattr(cfg, k, _coerce(k, v))
            sources[k] = origin
    cfg.profile = profile
    cfg.sources = sources
    cfg.validate()
    return cfg


def parse_assignments(items) -> dict[str, str]:
    """``["a=1", "b = x"]`` -> ``{"a": "1", "b": "x"}``."""
    out = {}
    for item in items or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        k, v = (s.strip() for s in item.split("=", 1))
        out[k] = v
    return out
