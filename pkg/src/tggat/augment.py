"""Observation perturbations applied during training (never at inference)."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import uniform_filter

OPS = ("blur", "noise", "contrast", "dropout")


@dataclass(frozen=True)
class AugConfig:
    p: float = 0.4
    noise_sigma: float = 0.1
    blur_enabled: bool = True
    contrast_range: tuple = (0.7, 1.3)
    dropout_rate: float = 0.1

    def __post_init__(self):
        if not 0.0 <= self.p <= 1.0:
            raise ValueError("augmentation probability must lie in [0, 1]")

    @property
    def ops(self) -> tuple:
        return tuple(op for op in OPS if op != "blur" or self.blur_enabled)


def box_blur(obs: np.ndarray) -> np.ndarray:
    """3x3 mean filter per channel with clamped (nearest) borders."""
    return uniform_filter(obs, size=(1, 3, 3), mode="nearest")


def choose_ops(rng: np.random.Generator, cfg: AugConfig) -> tuple:
    ops = cfg.ops
    while True:
        picked = tuple(op for op in ops if rng.random() < 0.5)
        if picked:
            return picked


def apply_ops(obs: np.ndarray, ops, cfg: AugConfig, rng: np.random.Generator) -> np.ndarray:
    out = obs.copy()
    if "blur" in ops:
        out = box_blur(out)
    if "noise" in ops:
        out = out + rng.normal(0.0, cfg.noise_sigma, size=out.shape)
    if "contrast" in ops:
        out = out * rng.uniform(*cfg.contrast_range)
    if "dropout" in ops:
        keep = rng.random(out.shape[1:]) >= cfg.dropout_rate
        out = out * keep[None]
    return out


def augment_observation(obs: np.ndarray, cfg: AugConfig, seed) -> np.ndarray:
    """With probability ``cfg.p`` apply a random non-empty subset of blur, noise,
    contrast and cell dropout; otherwise return ``obs`` untouched."""
    rng = np.random.default_rng(seed)
    if cfg.p == 0.0 or rng.random() >= cfg.p:
        return obs
    return apply_ops(obs, choose_ops(rng, cfg), cfg, rng)
