"""Power-set ensemble of subset encoders with a shared head, and mean/mode imputation."""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from . import numerics as nx
from .data import FeatureSchema, TabularDataset
from .errors import EnsembleSizeError, ImputationError, MissingCellError, UntrainedMemberError
from .model import LsamConfig, as_constants, clip_probabilities
from .numerics import DiffValue

MAX_ENSEMBLE_FEATURES = 10


@dataclass(frozen=True, order=True)
class SubsetSpec:
    """A sorted set of feature indices."""

    indices: tuple[int, ...] = ()

    def __post_init__(self):
        idx = tuple(sorted(int(i) for i in self.indices))
        if len(set(idx)) != len(idx):
            raise ValueError(f"subset indices must be distinct, got {self.indices}")
        object.__setattr__(self, "indices", idx)

    @property
    def cardinality(self) -> int:
        return len(self.indices)

    def check(self, d: int) -> "SubsetSpec":
        if self.indices and (self.indices[0] < 0 or self.indices[-1] >= d):
            raise ValueError(f"subset {self.indices} outside [0, {d})")
        return self

    def union(self, other: "SubsetSpec | Sequence[int]") -> "SubsetSpec":
        extra = other.indices if isinstance(other, SubsetSpec) else tuple(other)
        return SubsetSpec(tuple(set(self.indices) | set(extra)))

    def label(self, names: Sequence[str] | None = None) -> str:
        names = names or [f"x{i + 1}" for i in range(max(self.indices, default=-1) + 1)]
        return "{" + ", ".join(names[i] for i in self.indices) + "}"


def power_set(d: int) -> list[SubsetSpec]:
    """All 2**d subsets, ordered by cardinality then lexicographically."""
    return [SubsetSpec(c) for r in range(d + 1) for c in itertools.combinations(range(d), r)]


class EnsembleNet:
    """One 2-layer encoder per feature subset feeding a shared 2-layer head.

    All members are evaluated in one batched product: member ``k`` sees the
    full encoded row but its first-layer weights are multiplied by a fixed
    0/1 mask over the columns of its subset, so columns outside the subset
    neither contribute nor receive gradient.  The empty-set member reduces to
    a learned constant.  Categorical features are one-hot encoded.
    """

    def __init__(self, schema: Sequence[FeatureSchema], config: LsamConfig):
        self.schema = tuple(schema)
        d = len(self.schema)
        if d > MAX_ENSEMBLE_FEATURES:
            raise EnsembleSizeError(
                f"power-set ensemble over {d} features needs 2**{d} members; use the attention model (LSAM) instead"
            )
        self.config = config
        self.subsets = power_set(d)
        self.index = {s: k for k, s in enumerate(self.subsets)}
        widths = [f.cardinality if f.is_categorical else 1 for f in self.schema]
        self.columns = np.repeat(np.arange(d), widths)  # encoded column -> feature
        self.in_dim = int(sum(widths))
        member = np.zeros((len(self.subsets), d))
        for k, s in enumerate(self.subsets):
            member[k, list(s.indices)] = 1.0
        self.member_features = member.astype(bool)  # (K, d)
        self.column_mask = member[:, self.columns][:, :, None]  # (K, D, 1)

    @property
    def n_features(self) -> int:
        return len(self.schema)

    @property
    def n_members(self) -> int:
        return len(self.subsets)

    def init_params(self, rng: np.random.Generator) -> dict[str, np.ndarray]:
        K, D = self.n_members, self.in_dim
        E, H, C = self.config.embed_dim, self.config.hidden_dim, self.config.out_dim
        # every member starts from the same encoder, so members only drift apart
        # as far as their feature subsets make them
        w1 = rng.standard_normal((D, H)) / math.sqrt(max(D, 1))
        b1 = rng.uniform(-1.0, 1.0, H)
        w2 = rng.standard_normal((H, E)) / math.sqrt(H)
        p = {
            "f.w1": np.broadcast_to(w1, (K, D, H)) * self.column_mask,
            "f.b1": np.tile(b1, (K, 1)),
            "f.w2": np.tile(w2, (K, 1, 1)),
            "f.b2": np.zeros((K, E)),
            "phi.w1": rng.standard_normal((E, H)) / math.sqrt(E),
            "phi.b1": np.zeros(H),
            "phi.w2": rng.standard_normal((H, C)) / math.sqrt(H),
            "phi.b2": np.zeros(C),
        }
        return p

    def encode(self, x: np.ndarray, missing: np.ndarray) -> np.ndarray:
        """Model input matrix (B, D); missing cells become zeros and are never read."""
        filled = np.where(missing, 0.0, x)
        cols = []
        for j, f in enumerate(self.schema):
            if f.is_categorical:
                onehot = np.zeros((x.shape[0], f.cardinality))
                obs = ~missing[:, j]
                onehot[np.flatnonzero(obs), filled[obs, j].astype(np.intp)] = 1.0
                cols.append(onehot)
            else:
                cols.append(filled[:, j : j + 1])
        return np.concatenate(cols, axis=1) if cols else np.zeros((x.shape[0], 0))

    def eligible(self, missing: np.ndarray) -> np.ndarray:
        """(K, B) boolean: member k may use row b (its whole subset is observed)."""
        return ~(self.member_features[:, None, :] & np.asarray(missing, dtype=bool)[None, :, :]).any(axis=2)

    def members_forward(self, pv: dict[str, DiffValue], xenc: np.ndarray, members: Sequence[int] | None = None) -> DiffValue:
        """Latents of the selected members for every row: (K', B, E)."""
        sel = slice(None) if members is None else np.asarray(members, dtype=np.intp)
        if members is None:
            w1, b1, w2, b2 = pv["f.w1"], pv["f.b1"], pv["f.w2"], pv["f.b2"]
            cmask = self.column_mask
        else:
            w1, b1, w2, b2 = (nx.take(pv[n], sel, axis=0) for n in ("f.w1", "f.b1", "f.w2", "f.b2"))
            cmask = self.column_mask[sel]
        k = cmask.shape[0]
        w1 = nx.mul(w1, cmask)
        h = nx.gelu(nx.add(nx.matmul(xenc[None], w1), nx.reshape(b1, (k, 1, -1))))
        return nx.add(nx.matmul(h, w2), nx.reshape(b2, (k, 1, -1)))

    def head(self, pv: dict[str, DiffValue], z: DiffValue) -> DiffValue:
        h = nx.gelu(nx.add(nx.matmul(z, pv["phi.w1"]), pv["phi.b1"]))
        return nx.add(nx.matmul(h, pv["phi.w2"]), pv["phi.b2"])

    def training_loss(self, pv, x, missing, y, rng=None) -> DiffValue:
        """Mean cross-entropy over every (member, row) pair whose subset is fully observed."""
        z = self.members_forward(pv, self.encode(x, missing))
        K, B, E = z.shape
        logits = self.head(pv, nx.reshape(z, (K * B, E)))
        weights = self.eligible(missing).reshape(-1).astype(np.float64)
        return nx.cross_entropy(logits, np.tile(y, K), weights)

    def member_for(self, missing_row: np.ndarray) -> int:
        """Highest-cardinality member: the one whose subset is exactly the observed set."""
        return self.index[SubsetSpec(tuple(np.flatnonzero(~np.asarray(missing_row, dtype=bool))))]

    def predict(self, params: dict, x: np.ndarray, missing: np.ndarray):
        """Per-row latents and probabilities from each row's highest-cardinality member."""
        missing = np.asarray(missing, dtype=bool)
        pv = as_constants(params)
        B = x.shape[0]
        z_out = np.zeros((B, self.config.embed_dim))
        p_out = np.zeros((B, self.config.out_dim))
        xenc = self.encode(x, missing)
        chosen = np.array([self.member_for(m) for m in missing], dtype=np.intp)
        for k in np.unique(chosen):
            rows = np.flatnonzero(chosen == k)
            z = self.members_forward(pv, xenc[rows], [k])
            z2 = nx.reshape(z, (rows.size, -1))
            z_out[rows] = z2.data
            p_out[rows] = clip_probabilities(nx.softmax(self.head(pv, z2)).data)
        return z_out, p_out

    def latent(self, params: dict, x: np.ndarray, missing: np.ndarray, subset) -> np.ndarray:
        x = np.atleast_2d(x)
        missing = np.atleast_2d(np.asarray(missing, dtype=bool))
        s = subset if isinstance(subset, SubsetSpec) else SubsetSpec(tuple(subset))
        s.check(self.n_features)
        if missing[:, list(s.indices)].any():
            raise MissingCellError(f"subset {list(s.indices)} requests a missing cell")
        z = self.members_forward(as_constants(params), self.encode(x, missing), [self.index[s]])
        return z.data[0]


@dataclass
class EnsembleModel:
    """A trained ensemble: architecture, parameters and per-member training row counts."""

    net: EnsembleNet
    params: dict
    member_rows: np.ndarray
    report: object = None

    @property
    def n_members(self) -> int:
        return self.net.n_members

    def predict(self, x, missing):
        return self.net.predict(self.params, x, missing)

    def latent(self, x, missing, subset) -> np.ndarray:
        s = subset if isinstance(subset, SubsetSpec) else SubsetSpec(tuple(subset))
        if self.member_rows[self.net.index[s.check(self.net.n_features)]] == 0:
            raise UntrainedMemberError(f"member {list(s.indices)} never saw a fully observed training row")
        return self.net.latent(self.params, x, missing, s)


def train_ensemble(train_ds: TabularDataset, val_ds: TabularDataset | None, model_config: LsamConfig, train_config) -> EnsembleModel:
    from .training import train

    net = EnsembleNet(train_ds.schema, replace(model_config, out_dim=train_ds.n_classes))
    params, report = train(net, train_ds, val_ds, train_config)
    counts = net.eligible(train_ds.mask).sum(axis=1)
    return EnsembleModel(net, params, counts, report)


def ensemble_predict(model: EnsembleModel, row: np.ndarray, observed_mask: np.ndarray) -> np.ndarray:
    """Class probabilities for one row; ``observed_mask`` is True where the value is missing."""
    _, probs = model.predict(np.atleast_2d(row), np.atleast_2d(observed_mask))
    return probs[0]


def ensemble_latent(model: EnsembleModel, row: np.ndarray, subset) -> np.ndarray:
    row = np.atleast_2d(np.asarray(row, dtype=np.float64))
    return model.latent(row, np.isnan(row), subset)[0]


# -- simple imputation ----------------------------------------------------------


@dataclass
class SimpleImputer:
    fill: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def transform(self, dataset: TabularDataset) -> TabularDataset:
        values = np.where(dataset.mask, self.fill[None, :], dataset.values)
        return replace(dataset, values=values, mask=np.zeros_like(dataset.mask))


def fit_simple_imputer(train_ds: TabularDataset) -> SimpleImputer:
    """Training mean for numeric features, training mode (lowest code on ties) for categorical."""
    fill = np.zeros(train_ds.n_features)
    for j, feat in enumerate(train_ds.schema):
        col = train_ds.values[~train_ds.mask[:, j], j]
        if col.size == 0:
            raise ImputationError(f"feature {feat.name!r} has no observed training cells")
        if feat.is_categorical:
            fill[j] = np.bincount(col.astype(np.intp), minlength=feat.cardinality).argmax()
        else:
            fill[j] = col.mean()
    return SimpleImputer(fill)


def simple_impute(train_ds: TabularDataset, *others: TabularDataset):
    """Impute ``train_ds`` and any further splits with training statistics.

    Returns ``(imputer, train, *others)`` with every mask cleared.
    """
    imp = fit_simple_imputer(train_ds)
    return (imp, imp.transform(train_ds), *(imp.transform(o) for o in others))
