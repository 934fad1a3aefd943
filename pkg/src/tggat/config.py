"""Run configuration: one flat record, two named profiles, and a ``key = value`` file format.

A config file may start with ``profile = paper`` (or ``desk``); the remaining
lines override individual fields of that profile.
"""
from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass
from pathlib import Path

from .augment import AugConfig
from .env import EnvConfig
from .losses import LossWeights


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class Config:
    profile: str = "desk"
    # model
    d_model: int = 64
    n_heads: int = 4
    n_mhca_layers: int = 1
    n_text_layers: int = 2
    n_gat_layers: int = 2
    ffn_mult: int = 4
    max_text_len: int = 48
    # loss weights
    kappa1: float = 1.0
    kappa2: float = 3.0
    kappa3: float = 1.5
    lambda1: float = 0.2
    lambda2: float = 0.1
    lambda3: float = 0.25
    # optimisation
    learning_rate: float = 1e-3
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    grad_clip: float = 1.0
    batch_size: int = 4
    max_iterations: int = 5000
    alternation_period: int = 1
    teacher_only: bool = False
    eval_interval: int = 500
    eval_episodes: int = 50
    seed: int = 0
    # augmentation
    aug_p: float = 0.4
    aug_noise_sigma: float = 0.1
    aug_blur: bool = True
    aug_contrast_lo: float = 0.7
    aug_contrast_hi: float = 1.3
    aug_dropout_rate: float = 0.1
    # environment
    grid: int = 8
    world_cells: int = 48
    scale_m: float = 10.0
    altitude: float = 40.0
    fov: float = math.pi / 2
    max_step: float = 40.0
    max_steps: int = 10
    z_min: float = 10.0
    z_max: float = 100.0

    def __post_init__(self):
        positive = ("d_model", "n_heads", "ffn_mult", "max_text_len", "batch_size", "max_iterations",
                    "alternation_period", "grid", "max_steps", "learning_rate")
        for name in positive:
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if self.d_model % self.n_heads:
            raise ConfigError("n_heads must divide d_model")
        if not 0.0 <= self.aug_p <= 1.0:
            raise ConfigError("aug_p must lie in [0, 1]")
        try:
            LossWeights(**self._loss_kwargs())
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    def _loss_kwargs(self):
        return {k: getattr(self, k) for k in ("kappa1", "kappa2", "kappa3", "lambda1", "lambda2", "lambda3")}

    @property
    def weights(self) -> LossWeights:
        return LossWeights(**self._loss_kwargs())

    @property
    def aug(self) -> AugConfig:
        return AugConfig(p=self.aug_p, noise_sigma=self.aug_noise_sigma, blur_enabled=self.aug_blur,
                         contrast_range=(self.aug_contrast_lo, self.aug_contrast_hi),
                         dropout_rate=self.aug_dropout_rate)

    @property
    def env(self) -> EnvConfig:
        return EnvConfig(world_cells=self.world_cells, scale_m=self.scale_m, altitude=self.altitude,
                         fov=self.fov, grid=self.grid, max_step=self.max_step, max_steps=self.max_steps,
                         z_min=self.z_min, z_max=self.z_max)

    def replace(self, **changes) -> "Config":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_dict(cls, data: dict) -> "Config":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - names
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**data)


PROFILES = {
    "desk": {},
    "paper": {
        "d_model": 768,
        "n_heads": 12,
        "n_mhca_layers": 1,
        "n_text_layers": 9,
        "n_gat_layers": 2,
        "learning_rate": 1e-5,
        "batch_size": 4,
        "max_iterations": 200_000,
        "aug_p": 0.4,
    },
}


def profile(name: str, **overrides) -> Config:
    if name not in PROFILES:
        raise ConfigError(f"unknown profile {name!r}")
    return Config(profile=name, **{**PROFILES[name], **overrides})


def _coerce(field: dataclasses.Field, raw: str):
    raw = raw.strip()
    kind = field.type if isinstance(field.type, str) else field.type.__name__
    try:
        if kind == "bool":
            if raw.lower() not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return raw.lower() in ("true", "1", "yes")
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(f"bad value for {field.name}: {raw!r}") from None


def parse_config(text: str) -> Config:
    fields = {f.name: f for f in dataclasses.fields(Config)}
    pairs = []
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in fields:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        pairs.append((key, value))
    base = dict(pairs).get("profile", "desk")
    overrides = {k: _coerce(fields[k], v) for k, v in pairs if k != "profile"}
    return profile(base, **overrides)


def load_config(path) -> Config:
    return parse_config(Path(path).read_text())


def dump_config(cfg: Config) -> str:
    """Serialise as a config file that reproduces ``cfg`` under its profile."""
    base = profile(cfg.profile).to_dict()
    lines = [f"profile = {cfg.profile}"]
    for key, value in cfg.to_dict().items():
        if key != "profile" and value != base[key]:
            lines.append(f"{key} = {value!r}" if isinstance(value, float) else f"{key} = {value}")
    return "\n".join(lines) + "\n"
