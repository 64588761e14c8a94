"""Tabular datasets with explicit missingness masks.

Missing cells hold NaN in ``values``; the boolean ``mask`` (True = missing) is
the authority on what is observed.  Categorical features are stored as
integer codes into the schema's sorted level list.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import DataFormatError, SplitError
from .numerics import seeded_rng

MISSING_TOKENS = frozenset({"", "NA"})


@dataclass(frozen=True)
class FeatureSchema:
    name: str
    kind: str = "numeric"  # "numeric" | "categorical"
    levels: tuple[str, ...] = ()

    def __post_init__(self):
        if self.kind not in ("numeric", "categorical"):
            raise ValueError(f"unknown feature kind {self.kind!r}")
        if self.kind == "categorical" and not self.levels:
            raise ValueError(f"categorical feature {self.name!r} needs at least one level")

    @property
    def is_categorical(self) -> bool:
        return self.kind == "categorical"

    @property
    def cardinality(self) -> int:
        return len(self.levels)


@dataclass(frozen=True, eq=False)
class TabularDataset:
    values: np.ndarray
    mask: np.ndarray
    targets: np.ndarray
    schema: tuple[FeatureSchema, ...]
    classes: tuple[str, ...] = ()
    target_name: str = "y"

    def __post_init__(self):
        values = np.array(self.values, dtype=np.float64)
        mask = np.array(self.mask, dtype=bool)
        targets = np.array(self.targets, dtype=np.int64)
        if values.ndim != 2 or mask.shape != values.shape:
            raise ValueError(f"values {values.shape} and mask {mask.shape} must be identical 2-d shapes")
        if targets.shape != (values.shape[0],):
            raise ValueError(f"expected {values.shape[0]} targets, got shape {targets.shape}")
        if len(self.schema) != values.shape[1]:
            raise ValueError(f"schema has {len(self.schema)} features, values have {values.shape[1]}")
        values[mask] = np.nan
        if not np.isfinite(values[~mask]).all():
            raise ValueError("observed cells must be finite")
        for j, feat in enumerate(self.schema):
            if feat.is_categorical:
                codes = values[~mask[:, j], j]
                if ((codes < 0) | (codes >= feat.cardinality) | (codes != np.round(codes))).any():
                    raise ValueError(f"categorical feature {feat.name!r} has codes outside [0, {feat.cardinality})")
        classes = self.classes or tuple(str(c) for c in range(int(targets.max()) + 1 if targets.size else 0))
        if targets.size and (targets.min() < 0 or targets.max() >= len(classes)):
            raise ValueError("targets outside the class range")
        for arr in (values, mask, targets):
            arr.flags.writeable = False
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "mask", mask)
        object.__setattr__(self, "targets", targets)
        object.__setattr__(self, "schema", tuple(self.schema))
        object.__setattr__(self, "classes", tuple(classes))

    @property
    def n_rows(self) -> int:
        return self.values.shape[0]

    @property
    def n_features(self) -> int:
        return self.values.shape[1]

    @property
    def n_classes(self) -> int:
        return len(self.classes)

    @property
    def feature_names(self) -> list[str]:
        return [f.name for f in self.schema]

    def feature_index(self, name_or_index) -> int:
        if isinstance(name_or_index, (int, np.integer)):
            return int(name_or_index)
        return self.feature_names.index(name_or_index)

    def subset_rows(self, rows) -> "TabularDataset":
        rows = np.asarray(rows, dtype=np.intp)
        return replace(self, values=self.values[rows], mask=self.mask[rows], targets=self.targets[rows])

    def with_mask(self, mask: np.ndarray) -> "TabularDataset":
        """Copy with ``mask`` applied; cells already missing stay missing."""
        return replace(self, values=self.values, mask=np.asarray(mask, dtype=bool) | self.mask)

    def filled(self, fill: float = 0.0) -> np.ndarray:
        """Values with missing cells replaced by ``fill``; the only sanctioned way to feed a model."""
        return np.where(self.mask, fill, self.values)


@dataclass(frozen=True)
class SplitSpec:
    train: float = 0.8
    validation: float = 0.1
    test: float = 0.1
    seed: int = 0

    def __post_init__(self):
        fr = (self.train, self.validation, self.test)
        if any(f < 0 for f in fr) or not math.isclose(self.train + self.validation + self.test, 1.0, abs_tol=1e-9):
            raise SplitError(f"split fractions must be nonnegative and sum to 1, got {fr}")


@dataclass
class Standardizer:
    """Per-feature affine statistics fitted on observed training cells."""

    mean: np.ndarray
    scale: np.ndarray
    constant: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=bool))

    def transform(self, dataset: TabularDataset) -> TabularDataset:
        values = (dataset.values - self.mean) / self.scale
        return replace(dataset, values=values)

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "scale": self.scale.tolist(), "constant": self.constant.tolist()}


def _parse_float(text: str) -> float | None:
    try:
        v = float(text)
    except ValueError:
        return None
    return v if math.isfinite(v) else None


def load_csv(
    path,
    target: str = "y",
    schema: Sequence[FeatureSchema] | None = None,
    classes: Sequence[str] | None = None,
) -> TabularDataset:
    """Read a header-first CSV; empty cells and ``NA`` are missing.

    Without ``schema`` a column is numeric when every non-missing cell parses
    as a float, otherwise categorical with lexicographically ordered levels.
    Class labels are ordered numerically when they all parse, else
    lexicographically, unless ``classes`` fixes the order.
    """
    path = Path(path)
    with path.open(newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise DataFormatError("empty file, header row required")
    header = [h.strip() for h in rows[0]]
    body = rows[1:]
    width = len(header)
    for i, r in enumerate(body, start=2):
        if len(r) != width:
            raise DataFormatError(f"expected {width} fields, found {len(r)}", row=i)
    if target not in header:
        raise DataFormatError(f"target column {target!r} not found in header {header}")
    t_col = header.index(target)
    feat_cols = [j for j in range(width) if j != t_col]
    raw = [[r[j].strip() for r in body] for j in range(width)]

    labels = raw[t_col]
    for i, lab in enumerate(labels, start=2):
        if lab in MISSING_TOKENS:
            raise DataFormatError("target value is missing", row=i, column=target)
    if classes is None:
        uniq = sorted(set(labels))
        parsed = [_parse_float(u) for u in uniq]
        if all(p is not None for p in parsed):
            uniq = [u for _, u in sorted(zip(parsed, uniq))]
        classes = uniq
    classes = tuple(classes)
    lookup = {c: k for k, c in enumerate(classes)}
    try:
        targets = np.array([lookup[lab] for lab in labels], dtype=np.int64)
    except KeyError as exc:
        raise DataFormatError(f"unknown class label {exc.args[0]!r}", column=target) from None

    if schema is None:
        schema = []
        for j in feat_cols:
            observed = [c for c in raw[j] if c not in MISSING_TOKENS]
            if all(_parse_float(c) is not None for c in observed):
                schema.append(FeatureSchema(header[j]))
            else:
                schema.append(FeatureSchema(header[j], "categorical", tuple(sorted(set(observed)))))
    schema = tuple(schema)
    if [f.name for f in schema] != [header[j] for j in feat_cols]:
        raise DataFormatError("schema feature names do not match the CSV header")

    n = len(body)
    values = np.full((n, len(feat_cols)), np.nan)
    mask = np.zeros((n, len(feat_cols)), dtype=bool)
    for k, (j, feat) in enumerate(zip(feat_cols, schema)):
        codes = {lev: c for c, lev in enumerate(feat.levels)}
        for i, cell in enumerate(raw[j]):
            if cell in MISSING_TOKENS:
                mask[i, k] = True
            elif feat.is_categorical:
                if cell not in codes:
                    raise DataFormatError(f"unknown level {cell!r}", row=i + 2, column=feat.name)
                values[i, k] = codes[cell]
            else:
                v = _parse_float(cell)
                if v is None:
                    raise DataFormatError(f"cannot parse {cell!r} as a number", row=i + 2, column=feat.name)
                values[i, k] = v
    return TabularDataset(values, mask, targets, schema, classes, target)


def write_csv(dataset: TabularDataset, path) -> None:
    """Write ``dataset`` so that :func:`load_csv` reproduces it exactly."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(dataset.feature_names + [dataset.target_name])
        for i in range(dataset.n_rows):
            row = []
            for j, feat in enumerate(dataset.schema):
                if dataset.mask[i, j]:
                    row.append("")
                elif feat.is_categorical:
                    row.append(feat.levels[int(dataset.values[i, j])])
                else:
                    row.append(repr(float(dataset.values[i, j])))
            row.append(dataset.classes[dataset.targets[i]])
            w.writerow(row)


def fit_standardizer(train: TabularDataset) -> Standardizer:
    """Observed-cell mean and population std of every numeric training column.

    Categorical and constant columns get mean 0 and scale 1 (identity);
    constant columns are flagged.
    """
    d = train.n_features
    mean = np.zeros(d)
    scale = np.ones(d)
    constant = np.zeros(d, dtype=bool)
    for j, feat in enumerate(train.schema):
        if feat.is_categorical:
            continue
        col = train.values[~train.mask[:, j], j]
        if col.size == 0:
            continue
        sd = col.std()
        if sd <= 1e-12 * max(1.0, abs(col.mean())):
            constant[j] = True
            continue
        mean[j] = col.mean()
        scale[j] = sd
    return Standardizer(mean, scale, constant)


def standardize(train: TabularDataset, *others: TabularDataset):
    """Standardize ``train`` (and optionally other splits) with training statistics.

    Returns ``(standardizer, train, *others)``.
    """
    st = fit_standardizer(train)
    return (st, st.transform(train), *(st.transform(o) for o in others))


def _largest_remainder(total: int, weights: np.ndarray) -> np.ndarray:
    raw = total * weights / weights.sum()
    out = np.floor(raw).astype(int)
    short = total - out.sum()
    order = np.argsort(-(raw - out), kind="stable")
    out[order[:short]] += 1
    return out


def split(dataset: TabularDataset, spec: SplitSpec = SplitSpec()):
    """Stratified train/validation/test partition, deterministic under ``spec.seed``."""
    n = dataset.n_rows
    fractions = np.array([spec.train, spec.validation, spec.test])
    n_parts = int((fractions > 0).sum())
    sizes = _largest_remainder(n, fractions)
    classes, counts = np.unique(dataset.targets, return_counts=True)
    for c, k in zip(classes, counts):
        if k < n_parts:
            raise SplitError(f"class {dataset.classes[c]!r} has {k} rows, fewer than the {n_parts} splits")
    # per (class, split) cell counts that hit both the class totals and split totals
    alloc = np.zeros((len(classes), 3), dtype=int)
    remaining = sizes.copy()
    for ci in np.argsort(counts, kind="stable"):
        share = _largest_remainder(int(counts[ci]), np.maximum(remaining, 0).astype(float) + 1e-12)
        alloc[ci] = share
        remaining -= share
    rng = seeded_rng(spec.seed)
    parts: list[list[np.ndarray]] = [[], [], []]
    for ci, c in enumerate(classes):
        idx = np.flatnonzero(dataset.targets == c)
        idx = idx[rng.permutation(idx.size)]
        bounds = np.cumsum(alloc[ci])
        for p, chunk in enumerate(np.split(idx, bounds[:-1])):
            parts[p].append(chunk)
    return tuple(dataset.subset_rows(np.sort(np.concatenate(p))) for p in parts)
