"""Latent space attention model.

Each feature gets its own embedding network (a 2-layer MLP for numeric
features, a lookup table for categorical ones).  A learned aggregation token
then attends over the embeddings of the *participating* features for
``attn_layers`` pre-norm residual blocks, and its final state is the latent
``z``.  An output MLP maps ``z`` to class logits.

A feature participates when it is observed and kept by the feature mask.
Non-participating features receive an additive ``-inf`` attention bias, so
their values never influence the output.  When nothing participates the
attention context is zero and ``z`` depends on the parameters only.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import numerics as nx
from .data import FeatureSchema, TabularDataset
from .errors import ConfigError, MissingCellError, NonFiniteError
from .numerics import DiffValue

CHECKPOINT_FORMAT = "lsam-checkpoint"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class LsamConfig:
    out_dim: int = 2
    embed_dim: int = 32
    attn_layers: int = 2
    attn_heads: int = 4
    hidden_dim: int | None = None
    concrete_temperature: float = 0.1
    straight_through: bool = True

    def __post_init__(self):
        if self.hidden_dim is None:
            object.__setattr__(self, "hidden_dim", 2 * self.embed_dim)
        for name in ("out_dim", "embed_dim", "attn_layers", "attn_heads", "hidden_dim"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be a positive integer")
        if self.embed_dim % self.attn_heads:
            raise ConfigError(f"embed_dim {self.embed_dim} is not divisible by attn_heads {self.attn_heads}")
        if self.concrete_temperature <= 0:
            raise ConfigError("concrete_temperature must be positive")


@dataclass
class ConcreteMask:
    """Relaxed Bernoulli keep-gates for one training step."""

    gate: DiffValue  # soft keep-gates in (0, 1), differentiable w.r.t. rho

    def hard(self) -> DiffValue:
        """Straight-through gates: exact 0/1 forward, relaxed gradient."""
        return straight_through(self.gate)


def straight_through(gate: DiffValue) -> DiffValue:
    hard = (gate.data > 0.5).astype(np.float64)

    def bw(g):
        gate._accumulate(g)

    return nx._node(hard, (gate,), bw, "straight_through")


def sample_concrete_mask(rho: DiffValue, temperature: float, rng: np.random.Generator) -> ConcreteMask:
    """Draw keep-gates ``sigmoid((logit(1 - p) + G1 - G2) / temperature)`` with ``p = sigmoid(rho)``.

    ``p`` is the drop probability, so ``logit(1 - p) = -rho``.
    """
    if temperature <= 0:
        raise ConfigError(f"concrete temperature must be positive, got {temperature}")
    noise = rng.gumbel(size=rho.shape) - rng.gumbel(size=rho.shape)
    pre = nx.scale(nx.add(nx.scale(rho, -1.0), noise), 1.0 / temperature)
    return ConcreteMask(nx.sigmoid(pre))


def drop_probabilities(params: dict) -> np.ndarray:
    from scipy.special import expit

    return expit(np.asarray(params["rho"]))


class LsamModel:
    """Parameter layout, initialization and forward pass for one dataset schema.

    Parameters are a flat ``dict[str, np.ndarray]`` whose key prefix names the
    group: ``rho`` (drop logits), ``psi.*`` (embeddings), ``theta.*``
    (attention stack and aggregation token) and ``phi.*`` (output head).
    """

    def __init__(self, schema: Sequence[FeatureSchema], config: LsamConfig):
        self.schema = tuple(schema)
        self.config = config
        self.numeric = [j for j, f in enumerate(self.schema) if not f.is_categorical]
        self.categorical = [j for j, f in enumerate(self.schema) if f.is_categorical]
        order = self.numeric + self.categorical
        self._restore = None if order == list(range(len(order))) else np.argsort(order)

    @property
    def n_features(self) -> int:
        return len(self.schema)

    def init_params(self, rng: np.random.Generator) -> dict[str, np.ndarray]:
        c = self.config
        E, H, nN = c.embed_dim, c.hidden_dim, len(self.numeric)
        p: dict[str, np.ndarray] = {"rho": np.zeros(self.n_features)}
        if nN:
            p["psi.num.w1"] = rng.standard_normal((nN, H))
            p["psi.num.b1"] = rng.uniform(-1.0, 1.0, (nN, H))
            p["psi.num.w2"] = np.zeros((nN, H, E))
            p["psi.num.b2"] = np.zeros((nN, E))
        for j in self.categorical:
            p[f"psi.cat.{j}"] = rng.standard_normal((self.schema[j].cardinality, E))
        p["theta.token"] = rng.standard_normal(E)
        for layer in range(c.attn_layers):
            pre = f"theta.{layer}."
            p[pre + "ln1.g"] = np.ones(E)
            p[pre + "ln1.b"] = np.zeros(E)
            for w in ("wq", "wk", "wv", "wo"):
                p[pre + w] = rng.standard_normal((E, E)) / math.sqrt(E)
            p[pre + "ln2.g"] = np.ones(E)
            p[pre + "ln2.b"] = np.zeros(E)
            p[pre + "ff1.w"] = rng.standard_normal((E, H)) / math.sqrt(E)
            p[pre + "ff1.b"] = np.zeros(H)
            p[pre + "ff2.w"] = rng.standard_normal((H, E)) / math.sqrt(H)
            p[pre + "ff2.b"] = np.zeros(E)
        p["phi.w1"] = rng.standard_normal((E, H)) / math.sqrt(E)
        p["phi.b1"] = np.zeros(H)
        p["phi.w2"] = rng.standard_normal((H, c.out_dim)) / math.sqrt(H)
        p["phi.b2"] = np.zeros(c.out_dim)
        return p

    # -- forward -------------------------------------------------------------

    def embed(self, pv: dict[str, DiffValue], x: np.ndarray) -> DiffValue:
        """Token matrix (B, d, E); ``x`` must already have missing cells filled."""
        B = x.shape[0]
        E = self.config.embed_dim
        blocks = []
        if self.numeric:
            xn = x[:, self.numeric][:, :, None]
            h = nx.gelu(nx.add(nx.mul(xn, pv["psi.num.w1"]), pv["psi.num.b1"]))
            e = nx.matmul(nx.transpose(h, (1, 0, 2)), pv["psi.num.w2"])
            e = nx.add(e, nx.reshape(pv["psi.num.b2"], (len(self.numeric), 1, E)))
            blocks.append(nx.transpose(e, (1, 0, 2)))
        for j in self.categorical:
            codes = x[:, j].astype(np.intp)
            blocks.append(nx.reshape(nx.take(pv[f"psi.cat.{j}"], codes, axis=0), (B, 1, E)))
        tokens = blocks[0] if len(blocks) == 1 else nx.concat(blocks, axis=1)
        if self._restore is not None:
            tokens = nx.take(tokens, self._restore, axis=1)
        return tokens

    def attend(self, pv: dict[str, DiffValue], tokens: DiffValue, participation) -> DiffValue:
        """Run the aggregation token through the attention stack; returns z (B, E).

        ``participation`` is a (B, d) array or DiffValue of weights in [0, 1];
        zero means excluded.
        """
        c = self.config
        B, d, E = tokens.shape
        z = nx.add(np.zeros((B, E)), pv["theta.token"])
        for layer in range(c.attn_layers):
            pre = f"theta.{layer}."
            q = nx.matmul(nx.layer_norm(z, pv[pre + "ln1.g"], pv[pre + "ln1.b"]), pv[pre + "wq"])
            k = nx.matmul(tokens, pv[pre + "wk"])
            v = nx.matmul(tokens, pv[pre + "wv"])
            ctx = nx.attention_pool(q, k, v, participation, c.attn_heads)
            z = nx.add(z, nx.matmul(ctx, pv[pre + "wo"]))
            h = nx.layer_norm(z, pv[pre + "ln2.g"], pv[pre + "ln2.b"])
            h = nx.gelu(nx.add(nx.matmul(h, pv[pre + "ff1.w"]), pv[pre + "ff1.b"]))
            z = nx.add(z, nx.add(nx.matmul(h, pv[pre + "ff2.w"]), pv[pre + "ff2.b"]))
        return z

    def head(self, pv: dict[str, DiffValue], z: DiffValue) -> DiffValue:
        h = nx.gelu(nx.add(nx.matmul(z, pv["phi.w1"]), pv["phi.b1"]))
        return nx.add(nx.matmul(h, pv["phi.w2"]), pv["phi.b2"])

    def forward(self, pv: dict[str, DiffValue], x: np.ndarray, missing: np.ndarray, feature_mask=None):
        """Batched forward pass; returns ``(z, logits)`` as DiffValues.

        ``x`` holds raw values (NaN where missing), ``missing`` the boolean
        missingness mask.  ``feature_mask`` is a length-d array or DiffValue
        (1 = keep) or ``None`` for all features.
        """
        missing = np.asarray(missing, dtype=bool)
        if x.shape != missing.shape or x.shape[1] != self.n_features:
            raise MissingCellError(f"row block {x.shape} / mask {missing.shape} does not match {self.n_features} features")
        observed = np.where(missing, 0.0, 1.0)
        filled = np.where(missing, 0.0, x)
        if not np.isfinite(filled).all():
            raise NonFiniteError("non-finite value in an observed cell")
        tokens = self.embed(pv, filled)
        if feature_mask is None:
            part = observed
        elif isinstance(feature_mask, DiffValue):
            part = nx.mul(observed, nx.reshape(feature_mask, (1, self.n_features)))
        else:
            part = observed * np.asarray(feature_mask, dtype=np.float64).reshape(1, -1)
        z = self.attend(pv, tokens, part)
        return z, self.head(pv, z)

    def training_loss(self, pv: dict[str, DiffValue], x: np.ndarray, missing: np.ndarray, y: np.ndarray, rng) -> DiffValue:
        """Cross-entropy under one concrete feature mask drawn for the whole batch."""
        mask = sample_concrete_mask(pv["rho"], self.config.concrete_temperature, rng)
        fm = mask.hard() if self.config.straight_through else mask.gate
        _, logits = self.forward(pv, x, missing, fm)
        return nx.cross_entropy(logits, y)

    # -- numpy-level conveniences ------------------------------------------

    def predict(self, params: dict, x: np.ndarray, missing: np.ndarray, feature_mask=None, batch_size: int = 1024):
        """Evaluation-mode ``(z, probabilities)`` as arrays, in row chunks."""
        pv = as_constants(params)
        zs, ps = [], []
        for s in range(0, x.shape[0], batch_size):
            z, logits = self.forward(pv, x[s : s + batch_size], missing[s : s + batch_size], feature_mask)
            zs.append(z.data)
            ps.append(clip_probabilities(nx.softmax(logits).data))
        if not zs:
            return np.zeros((0, self.config.embed_dim)), np.zeros((0, self.config.out_dim))
        return np.concatenate(zs), np.concatenate(ps)

    def predict_dataset(self, params: dict, dataset: TabularDataset):
        return self.predict(params, dataset.values, dataset.mask)

    def latent(self, params: dict, rows: np.ndarray, missing: np.ndarray, subset: Sequence[int]) -> np.ndarray:
        """Latent ``z`` for each row restricted to ``subset`` (hard feature mask).

        Raises :class:`MissingCellError` if any requested cell is missing.
        """
        rows = np.atleast_2d(rows)
        missing = np.atleast_2d(np.asarray(missing, dtype=bool))
        fm = subset_indicator(subset, self.n_features)
        if (missing & fm.astype(bool)).any():
            raise MissingCellError(f"subset {list(subset)} requests a missing cell")
        z, _ = self.predict(params, rows, missing, fm)
        return z


def clip_probabilities(probs: np.ndarray) -> np.ndarray:
    """Keep probabilities strictly inside (0, 1); a saturated softmax can round to exactly 0 or 1."""
    return np.clip(probs, np.finfo(np.float64).tiny, np.nextafter(1.0, 0.0))


def subset_indicator(subset: Sequence[int], d: int) -> np.ndarray:
    fm = np.zeros(d)
    idx = list(subset)
    if idx and (min(idx) < 0 or max(idx) >= d):
        raise MissingCellError(f"subset {idx} has indices outside [0, {d})")
    fm[idx] = 1.0
    return fm


def as_params(params: dict) -> dict[str, DiffValue]:
    return {k: DiffValue(v, requires_grad=True) for k, v in params.items()}


def as_constants(params: dict) -> dict[str, DiffValue]:
    return {k: DiffValue(v) for k, v in params.items()}


def param_group(name: str) -> str:
    return name.split(".", 1)[0]


# -- checkpoints --------------------------------------------------------------


def save_checkpoint(path, kind: str, config, schema: Sequence[FeatureSchema], params: dict, extra: dict | None = None) -> None:
    """Write a JSON checkpoint: config, schema and flat float arrays.

    Floats are serialized with ``repr`` precision, so a load restores them
    bit-for-bit.
    """
    doc = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "kind": kind,
        "config": asdict(config),
        "schema": [{"name": f.name, "kind": f.kind, "levels": list(f.levels)} for f in schema],
        "params": {k: {"shape": list(np.shape(v)), "data": np.ravel(v).tolist()} for k, v in params.items()},
    }
    if extra:
        doc["extra"] = extra
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc))


def load_checkpoint(path) -> dict:
    doc = json.loads(Path(path).read_text())
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise ConfigError(f"{path} is not a checkpoint file")
    if doc.get("version") != CHECKPOINT_VERSION:
        raise ConfigError(f"unsupported checkpoint version {doc.get('version')}")
    doc["schema"] = tuple(FeatureSchema(s["name"], s["kind"], tuple(s["levels"])) for s in doc["schema"])
    doc["params"] = {k: np.array(v["data"], dtype=np.float64).reshape(v["shape"]) for k, v in doc["params"].items()}
    return doc
