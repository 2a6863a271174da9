"""Pseudo background/foreground labels and pseudo-label sampling."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from .wstal import BG, FG, ConfigError, ForwardMaps

GENERATORS = ("uniform_random", "distribution_aware", "class_activation", "attention", "segment_prediction")


@dataclass
class PseudoLabels:
    video_id: str
    labels: np.ndarray
    sample_mask: np.ndarray

    def to_json(self) -> str:
        return json.dumps({
            "video_id": self.video_id,
            "labels": [int(x) for x in self.labels],
            "sample_mask": [int(x) for x in self.sample_mask],
        })


@dataclass
class GeneratorKind:
    kind: str = "segment_prediction"
    theta: float | None = None
    rho: float | None = None

    def validate(self) -> None:
        if self.kind not in GENERATORS:
            raise ConfigError(f"unknown generator {self.kind!r}; expected one of {GENERATORS}")
        if self.theta is not None and not 0.0 <= self.theta <= 1.0:
            raise ConfigError(f"theta must be in [0, 1], got {self.theta}")
        if self.rho is not None and not 0.0 <= self.rho <= 1.0:
            raise ConfigError(f"rho must be in [0, 1], got {self.rho}")


def gen_uniform(T: int, seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    return (rng.random(T) < 0.5).astype(np.int64)


def gen_distribution_aware(T: int, rho: float | None, seed: int) -> np.ndarray:
    if rho is None:
        raise ConfigError("distribution_aware generator needs an explicit foreground ratio rho")
    rng = np.random.default_rng(seed)
    return (rng.random(T) < rho).astype(np.int64)


def gen_class_activation(maps: ForwardMaps, theta: float | None = None) -> np.ndarray:
    """Foreground where the top class probability reaches ``theta``.

    Defaults to the video's mean top-class probability.
    """
    top = maps.Cbar.max(axis=1)
    theta = float(top.mean()) if theta is None else theta
    return np.where(top >= theta, FG, BG)


def gen_attention(maps: ForwardMaps, theta: float | None = None) -> np.ndarray:
    """Foreground where temporal attention reaches ``theta`` (default 1/T)."""
    theta = 1.0 / maps.T if theta is None else theta
    return np.where(maps.Atime >= theta, FG, BG)


def gen_segment_prediction(predictions, T: int) -> np.ndarray:
    labels = np.full(T, BG, dtype=np.int64)
    for p in predictions:
        if not 0 <= p.start <= p.end <= T - 1:
            raise ValueError(f"prediction ({p.start}, {p.end}) outside [0, {T - 1}]")
        labels[p.start:p.end + 1] = FG
    return labels


def sample_count(S: float, T: int) -> int:
    return int(math.floor(S * T + 0.5))


def sample_pseudo(labels, S: float, seed: int) -> np.ndarray:
    if not 0.0 <= S <= 1.0:
        raise ValueError(f"S must be in [0, 1], got {S}")
    T = len(labels)
    mask = np.zeros(T, dtype=bool)
    k = sample_count(S, T)
    if k:
        mask[np.random.default_rng(seed).choice(T, size=k, replace=False)] = True
    return mask


def write_pseudo(pseudo, path) -> None:
    with open(path, "w") as f:
        for p in pseudo:
            f.write(p.to_json() + "\n")
