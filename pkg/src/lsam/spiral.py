"""Two-arm spiral benchmark augmented with a noise and a signal feature."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .data import FeatureSchema, TabularDataset
from .errors import ConfigError
from .numerics import seeded_rng

SPIRAL_FEATURES = ("x1", "x2", "x3", "x4")


@dataclass(frozen=True)
class SpiralConfig:
    n: int = 2000
    turns: float = 2.0
    noise_std: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if int(self.n) < 2:
            raise ConfigError(f"spiral needs at least 2 rows, got {self.n}")
        if self.turns <= 0 or self.noise_std < 0:
            raise ConfigError("turns must be positive and noise_std nonnegative")


def gen_spiral(config: SpiralConfig = SpiralConfig()) -> TabularDataset:
    """Interleaved two-arm spiral in (x1, x2) plus x3 ~ N(0, 1) and x4 = y + U[0, 1).

    Class 1 is class 0's arm rotated by pi.  Each class gets ``n // 2`` rows
    (class 1 takes the extra row when ``n`` is odd); row order is shuffled.
    """
    rng = seeded_rng(config.seed)
    n0 = config.n // 2
    n1 = config.n - n0
    y = np.concatenate([np.zeros(n0, dtype=np.int64), np.ones(n1, dtype=np.int64)])
    rng.shuffle(y)
    t = rng.uniform(0.0, 1.0, config.n)
    angle = 2.0 * math.pi * config.turns * t + math.pi * y
    x1 = t * np.cos(angle) + config.noise_std * rng.standard_normal(config.n)
    x2 = t * np.sin(angle) + config.noise_std * rng.standard_normal(config.n)
    x3 = rng.standard_normal(config.n)
    x4 = y + rng.uniform(0.0, 1.0, config.n)
    values = np.column_stack([x1, x2, x3, x4])
    schema = tuple(FeatureSchema(name) for name in SPIRAL_FEATURES)
    return TabularDataset(values, np.zeros_like(values, dtype=bool), y, schema, ("0", "1"), "y")
