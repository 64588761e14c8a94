"""MCAR / MAR / MNAR missingness generators for complete datasets.

Each generator picks ``ceil(column_fraction * d)`` columns and deletes exactly
``ceil(cell_fraction * n)`` cells in each.  MAR and MNAR delete the rows with
the largest conditioning value (the left neighbour's original value for MAR,
the cell's own value for MNAR), breaking ties by lower row index first.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .data import TabularDataset
from .errors import CorruptionError
from .numerics import seeded_rng

PATTERNS = ("mcar", "mar", "mnar")


@dataclass(frozen=True)
class CorruptionSpec:
    pattern: str = "mcar"
    column_fraction: float = 0.4
    cell_fraction: float = 0.4
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "pattern", self.pattern.lower())
        if self.pattern not in PATTERNS:
            raise CorruptionError(f"unknown pattern {self.pattern!r}; expected one of {PATTERNS}")
        for name in ("column_fraction", "cell_fraction"):
            v = getattr(self, name)
            if not 0.0 < v <= 1.0:
                raise CorruptionError(f"{name} must lie in (0, 1], got {v}")


def fraction_count(fraction: float, n: int) -> int:
    """``ceil(fraction * n)`` without floating-point overshoot (0.7 * 10 -> 7, not 8)."""
    return min(n, math.ceil(round(fraction * n, 9)))


def _require_complete(dataset: TabularDataset) -> None:
    if dataset.mask.any():
        raise CorruptionError(f"dataset already has {int(dataset.mask.sum())} missing cells; corruption needs complete data")


def _top_rows(values: np.ndarray, k: int) -> np.ndarray:
    """Indices of the ``k`` largest values; ties resolved toward lower row index."""
    order = np.lexsort((np.arange(values.size), -values))
    return order[:k]


def corrupt_mcar(dataset: TabularDataset, spec: CorruptionSpec) -> TabularDataset:
    _require_complete(dataset)
    n, d = dataset.values.shape
    rng = seeded_rng(spec.seed)
    cols = np.sort(rng.choice(d, size=fraction_count(spec.column_fraction, d), replace=False))
    k = fraction_count(spec.cell_fraction, n)
    mask = np.zeros((n, d), dtype=bool)
    for j in cols:
        mask[rng.choice(n, size=k, replace=False), j] = True
    return dataset.with_mask(mask)


def corrupt_mar(dataset: TabularDataset, spec: CorruptionSpec) -> TabularDataset:
    _require_complete(dataset)
    n, d = dataset.values.shape
    if d < 2:
        raise CorruptionError(f"MAR needs at least 2 features to condition on a left neighbour, got {d}")
    rng = seeded_rng(spec.seed)
    n_cols = min(fraction_count(spec.column_fraction, d), d - 1)
    cols = np.sort(rng.choice(np.arange(1, d), size=n_cols, replace=False))
    k = fraction_count(spec.cell_fraction, n)
    snapshot = dataset.values  # conditioning values come from the uncorrupted data
    mask = np.zeros((n, d), dtype=bool)
    for j in cols:
        mask[_top_rows(snapshot[:, j - 1], k), j] = True
    return dataset.with_mask(mask)


def corrupt_mnar(dataset: TabularDataset, spec: CorruptionSpec) -> TabularDataset:
    _require_complete(dataset)
    n, d = dataset.values.shape
    rng = seeded_rng(spec.seed)
    cols = np.sort(rng.choice(d, size=fraction_count(spec.column_fraction, d), replace=False))
    k = fraction_count(spec.cell_fraction, n)
    mask = np.zeros((n, d), dtype=bool)
    for j in cols:
        mask[_top_rows(dataset.values[:, j], k), j] = True
    return dataset.with_mask(mask)


def corrupt(dataset: TabularDataset, spec: CorruptionSpec) -> TabularDataset:
    return {"mcar": corrupt_mcar, "mar": corrupt_mar, "mnar": corrupt_mnar}[spec.pattern](dataset, spec)
