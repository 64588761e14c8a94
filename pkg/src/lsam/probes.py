"""Latent-space probe experiments on the spiral benchmark and the corruption benchmark.

A *run* trains one model on one seeded spiral dataset and records latent
distances between feature subsets on the held-out split.  Studies repeat
runs over consecutive seeds and summarize them with two-sample Student
t-tests:

``table1``
    distance from the empty set to each of {x1}, {x2}, {x1, x2}, {x3}, {x4}.
``table2``
    distance from u to u + {x3} (noise) and to u + {x4} (signal).
``table3``
    distance from u to u + {x4} while x4 is increasingly missing.
``table4``
    learned drop probabilities over the same missingness sweep.

Tables 1 and 2 share their runs, as do tables 3 and 4.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import stats

from .baselines import SubsetSpec, simple_impute, train_ensemble
from .corruption import CorruptionSpec, corrupt
from .data import SplitSpec, TabularDataset, split, standardize
from .errors import DivergenceError, ProbeError
from .model import LsamConfig, LsamModel
from .numerics import seeded_rng
from .spiral import SPIRAL_FEATURES, SpiralConfig, gen_spiral
from .training import TrainConfig, nll_and_accuracy, train

log = logging.getLogger(__name__)

__all__ = [
    "EXPERIMENTS",
    "ProbeSettings",
    "ProbeReport",
    "BenchmarkReport",
    "gen_spiral",
    "missingness_inject",
    "subset_distance",
    "collect_runs",
    "summarize",
    "bootstrap_distance_study",
    "benchmark_run",
]

EXPERIMENTS = ("table1", "table2", "table3", "table4")
MODELS = ("lsam", "ensemble")
STRATEGIES = ("none", "simple")
RESEED_OFFSET = 1_000_003

X1, X2, NOISE, SIGNAL = 0, 1, 2, 3
BASE_SUBSETS = ((X1,), (X2,), (X1, X2), ())
TABLE1_SUBSETS = ((X1,), (X2,), (X1, X2), (NOISE,), (SIGNAL,))


@dataclass(frozen=True)
class ProbeSettings:
    """Everything that determines a study besides the number of repeats."""

    spiral: SpiralConfig = SpiralConfig()
    model: LsamConfig = LsamConfig(embed_dim=16)
    train: TrainConfig = TrainConfig(max_steps=2000)
    split: SplitSpec = SplitSpec()
    levels: tuple[float, ...] = (0.0, 0.2, 0.4, 0.6, 0.8, 0.99)
    base_seed: int = 0

    def to_dict(self) -> dict:
        return asdict(self)


def _label(subset: Sequence[int]) -> str:
    return SubsetSpec(tuple(subset)).label(SPIRAL_FEATURES)


def _pair_key(a: Sequence[int], b: Sequence[int]) -> str:
    return f"{_label(a)}|{_label(b)}"


# -- primitives ------------------------------------------------------------------


def missingness_inject(dataset: TabularDataset, feature, fraction: float, seed: int) -> TabularDataset:
    """Mask ``ceil(fraction * n)`` uniformly chosen cells of one feature (MCAR within the column)."""
    if not 0.0 <= fraction < 1.0:
        raise ProbeError(f"missingness fraction must lie in [0, 1), got {fraction}")
    j = dataset.feature_index(feature)
    k = min(dataset.n_rows, math.ceil(round(fraction * dataset.n_rows, 9)))
    if k == 0:
        return dataset
    rows = seeded_rng(seed).choice(dataset.n_rows, size=k, replace=False)
    mask = np.zeros_like(dataset.mask)
    mask[rows, j] = True
    return dataset.with_mask(mask)


def subset_distance(model, params: dict, dataset: TabularDataset, a, b, missing: str = "skip") -> float:
    """Mean Euclidean distance between the latents of subsets ``a`` and ``b`` over the rows of ``dataset``.

    ``model`` is an :class:`LsamModel` or :class:`EnsembleNet`.  With
    ``missing="skip"`` rows where either subset touches a missing cell are
    left out, and :class:`ProbeError` is raised when no row remains.  With
    ``missing="absent"`` every row is used and a missing feature simply does
    not participate, so a row missing the only difference between ``a`` and
    ``b`` contributes distance 0.
    """
    a = SubsetSpec(tuple(a.indices if isinstance(a, SubsetSpec) else a)).indices
    b = SubsetSpec(tuple(b.indices if isinstance(b, SubsetSpec) else b)).indices
    union = sorted(set(a) | set(b))
    X, M = dataset.values, dataset.mask
    if missing == "skip":
        keep = ~M[:, union].any(axis=1) if union else np.ones(dataset.n_rows, dtype=bool)
        if not keep.any():
            raise ProbeError(f"no row observes every feature of {_label(a)} and {_label(b)}")
        za = model.latent(params, X[keep], M[keep], a)
        zb = model.latent(params, X[keep], M[keep], b)
        return float(np.linalg.norm(za - zb, axis=1).mean())
    if missing != "absent":
        raise ProbeError(f"missing must be 'skip' or 'absent', got {missing!r}")
    if dataset.n_rows == 0:
        raise ProbeError("no rows to measure")
    dist = np.zeros(dataset.n_rows)
    patterns = M[:, union]
    for pattern in np.unique(patterns, axis=0):
        rows = np.flatnonzero((patterns == pattern).all(axis=1))
        gone = {f for f, m in zip(union, pattern) if m}
        a_eff = [i for i in a if i not in gone]
        b_eff = [i for i in b if i not in gone]
        if a_eff == b_eff:
            continue
        za = model.latent(params, X[rows], M[rows], a_eff)
        zb = model.latent(params, X[rows], M[rows], b_eff)
        dist[rows] = np.linalg.norm(za - zb, axis=1)
    return float(dist.mean())


def _ttest(x: Sequence[float], y: Sequence[float]) -> float:
    """Two-tailed equal-variance Student t-test p-value; identical constant samples give 1."""
    x, y = np.asarray(x, dtype=float), np.asarray(y, dtype=float)
    if x.size < 2 or y.size < 2:
        return math.nan
    p = float(stats.ttest_ind(x, y, equal_var=True).pvalue)
    if math.isnan(p):
        return 1.0 if np.mean(x) == np.mean(y) else 0.0
    return p


# -- single runs -----------------------------------------------------------------


def _prepare(settings: ProbeSettings, seed: int, fraction: float = 0.0):
    ds = gen_spiral(replace(settings.spiral, seed=seed))
    if fraction > 0:
        ds = missingness_inject(ds, SIGNAL, fraction, seed)
    tr, va, te = split(ds, replace(settings.split, seed=seed))
    _, tr, va, te = standardize(tr, va, te)
    return tr, va, te


def _fit(kind: str, settings: ProbeSettings, tr, va, seed: int):
    """Train one model; returns ``(net, params, report)`` with a uniform latent interface."""
    tc = replace(settings.train, seed=seed)
    if kind == "lsam":
        net = LsamModel(tr.schema, replace(settings.model, out_dim=tr.n_classes))
        params, report = train(net, tr, va, tc)
        return net, params, report
    if kind == "ensemble":
        em = train_ensemble(tr, va, settings.model, tc)
        return em.net, em.params, em.report
    raise ProbeError(f"unknown model {kind!r}; expected one of {MODELS}")


def _empty_set_probabilities(net, params, d: int) -> list[float]:
    x = np.zeros((1, d))
    _, probs = net.predict(params, x, np.ones((1, d), dtype=bool))
    return probs[0].tolist()


def _subset_run(kind: str, seed: int, settings: ProbeSettings) -> dict:
    tr, va, te = _prepare(settings, seed)
    net, params, report = _fit(kind, settings, tr, va, seed)
    pairs = [((), s) for s in TABLE1_SUBSETS]
    pairs += [(u, tuple(sorted(u + (extra,)))) for u in BASE_SUBSETS for extra in (NOISE, SIGNAL)]
    distances = {_pair_key(a, b): subset_distance(net, params, te, a, b) for a, b in pairs}
    nll, acc = nll_and_accuracy(net, params, te)
    return {
        "kind": "subsets",
        "model": kind,
        "seed": seed,
        "distances": distances,
        "drop_probabilities": list(report.drop_probabilities),
        "empty_set_probabilities": _empty_set_probabilities(net, params, te.n_features),
        "test_nll": nll,
        "test_accuracy": acc,
        "stop_step": report.stop_step,
    }


def _sweep_run(kind: str, seed: int, settings: ProbeSettings, fraction: float) -> dict:
    tr, va, te = _prepare(settings, seed, fraction)
    net, params, report = _fit(kind, settings, tr, va, seed)
    absent, skip = {}, {}
    for u in BASE_SUBSETS:
        key = _pair_key(u, tuple(sorted(u + (SIGNAL,))))
        absent[key] = subset_distance(net, params, te, u, u + (SIGNAL,), missing="absent")
        try:
            skip[key] = subset_distance(net, params, te, u, u + (SIGNAL,), missing="skip")
        except ProbeError:
            skip[key] = None
    return {
        "kind": "sweep",
        "model": kind,
        "seed": seed,
        "fraction": fraction,
        "distances": absent,
        "distances_observed_rows": skip,
        "drop_probabilities": list(report.drop_probabilities),
        "stop_step": report.stop_step,
    }


def _run_with_retry(task: tuple) -> dict:
    """Execute one run; a diverging run is re-seeded once before giving up."""
    kind, model, seed, settings, fraction = task
    for attempt, s in enumerate((seed, seed + RESEED_OFFSET)):
        try:
            if kind == "subsets":
                rec = _subset_run(model, s, settings)
            else:
                rec = _sweep_run(model, s, settings, fraction)
            rec["requested_seed"] = seed
            return rec
        except DivergenceError as exc:
            if attempt:
                raise ProbeError(f"{model} run with seed {seed} diverged twice") from exc
            log.warning("run %s/%d diverged (%s); re-seeding", model, seed, exc)
    raise AssertionError("unreachable")


def collect_runs(kind: str, repeats: int = 30, jobs: int = 1, models: Sequence[str] = MODELS, settings: ProbeSettings = ProbeSettings()) -> list[dict]:
    """All runs behind a pair of tables.

    ``kind`` is ``"subsets"`` (tables 1 and 2) or ``"sweep"`` (tables 3 and 4).
    Run ``r`` uses seed ``settings.base_seed + r`` for data, split and
    training, so the result does not depend on ``jobs``.
    """
    if kind not in ("subsets", "sweep"):
        raise ProbeError(f"unknown run kind {kind!r}")
    if repeats < 1:
        raise ProbeError("repeats must be positive")
    for m in models:
        if m not in MODELS:
            raise ProbeError(f"unknown model {m!r}; expected one of {MODELS}")
    seeds = [settings.base_seed + r for r in range(repeats)]
    fractions = settings.levels if kind == "sweep" else (0.0,)
    tasks = [(kind, m, s, settings, f) for m in models for f in fractions for s in seeds]
    if jobs <= 1:
        return [_run_with_retry(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(_run_with_retry, tasks))


# -- summaries -------------------------------------------------------------------


@dataclass
class ProbeReport:
    """Summary rows (one per comparison) plus the raw per-run records."""

    experiment: str
    rows: list[dict]
    summary: dict = field(default_factory=dict)
    config: dict = field(default_factory=dict)
    runs: list[dict] = field(default_factory=list)
    version: str = ""

    def row(self, model: str, u: str, condition: str) -> dict:
        for r in self.rows:
            if r["model"] == model and r["u"] == u and r["condition"] == condition:
                return r
        raise KeyError((model, u, condition))

    def to_dict(self) -> dict:
        return asdict(self)

    def write_json(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))

    def write_csv(self, path) -> None:
        _write_rows(path, self.rows)

    def write(self, out_dir) -> tuple[Path, Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        js, cs = out / f"{self.experiment}.json", out / f"{self.experiment}.csv"
        self.write_json(js)
        self.write_csv(cs)
        return js, cs


def _write_rows(path, rows: list[dict]) -> None:
    names: list[str] = []
    for r in rows:
        names += [k for k in r if k not in names]
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=names)
        w.writeheader()
        for r in rows:
            w.writerow({k: "" if v is None else v for k, v in r.items()})


def _stat_row(model, u, condition, sample, comparison, p) -> dict:
    sample = np.asarray(sample, dtype=float)
    return {
        "model": model,
        "u": u,
        "condition": condition,
        "mean": float(sample.mean()),
        "std": float(sample.std(ddof=1)) if sample.size > 1 else 0.0,
        "n": int(sample.size),
        "comparison": comparison,
        "p_value": p,
    }


def _by_model(runs: list[dict], kind: str) -> dict[str, list[dict]]:
    out: dict[str, list[dict]] = {}
    for r in runs:
        if r["kind"] == kind:
            out.setdefault(r["model"], []).append(r)
    if not out:
        raise ProbeError(f"no {kind} runs to summarize")
    return out


def _table1(runs):
    rows, summary = [], {"empty_set_probabilities": {}}
    for model, rs in _by_model(runs, "subsets").items():
        zeros = np.zeros(len(rs))
        samples = {s: [r["distances"][_pair_key((), s)] for r in rs] for s in TABLE1_SUBSETS}
        for s in TABLE1_SUBSETS:
            rows.append(_stat_row(model, "{}", _label(s), samples[s], "zero", _ttest(samples[s], zeros)))
        rows.append(
            _stat_row(model, "{}", _label((SIGNAL,)), samples[(SIGNAL,)], _label((NOISE,)), _ttest(samples[(SIGNAL,)], samples[(NOISE,)]))
        )
        summary["empty_set_probabilities"][model] = np.mean([r["empty_set_probabilities"] for r in rs], axis=0).tolist()
    return rows, summary


def _table2(runs):
    rows = []
    for model, rs in _by_model(runs, "subsets").items():
        for u in BASE_SUBSETS:
            noise = [r["distances"][_pair_key(u, tuple(sorted(u + (NOISE,))))] for r in rs]
            signal = [r["distances"][_pair_key(u, tuple(sorted(u + (SIGNAL,))))] for r in rs]
            p = _ttest(noise, signal)
            rows.append(_stat_row(model, _label(u), "+" + _label((NOISE,)), noise, "+" + _label((SIGNAL,)), p))
            rows.append(_stat_row(model, _label(u), "+" + _label((SIGNAL,)), signal, "+" + _label((NOISE,)), p))
    return rows, {}


def _level(f: float) -> str:
    return f"{round(100 * f)}%"


def _sweep_groups(runs):
    out = {}
    for model, rs in _by_model(runs, "sweep").items():
        levels = sorted({r["fraction"] for r in rs})
        out[model] = {f: [r for r in rs if r["fraction"] == f] for f in levels}
    return out


def _table3(runs):
    rows, ratios = [], {}
    for model, groups in _sweep_groups(runs).items():
        levels = list(groups)
        for u in BASE_SUBSETS:
            key = _pair_key(u, tuple(sorted(u + (SIGNAL,))))
            base = [r["distances"][key] for r in groups[levels[0]]]
            means = []
            for f in levels:
                sample = [r["distances"][key] for r in groups[f]]
                row = _stat_row(model, _label(u), _level(f), sample, _level(levels[0]), _ttest(sample, base))
                skip = [r["distances_observed_rows"][key] for r in groups[f] if r["distances_observed_rows"][key] is not None]
                row["mean_observed_rows"] = float(np.mean(skip)) if skip else None
                row["n_observed_rows"] = len(skip)
                rows.append(row)
                means.append(row["mean"])
            ratios.setdefault(model, {})[_label(u)] = means[0] / means[-1] if means[-1] > 0 else math.inf
    return rows, {"first_to_last_ratio": ratios}


def _table4(runs):
    rows = []
    for model, groups in _sweep_groups(runs).items():
        levels = list(groups)
        for j, name in enumerate(SPIRAL_FEATURES):
            base = [r["drop_probabilities"][j] for r in groups[levels[0]]]
            for f in levels:
                sample = [r["drop_probabilities"][j] for r in groups[f]]
                rows.append(_stat_row(model, name, _level(f), sample, _level(levels[0]), _ttest(sample, base)))
    return rows, {}


_SUMMARIZERS = {"table1": _table1, "table2": _table2, "table3": _table3, "table4": _table4}


def summarize(experiment: str, runs: list[dict], settings: ProbeSettings = ProbeSettings(), config: dict | None = None) -> ProbeReport:
    """Build the report of one experiment from already collected runs."""
    from . import __version__

    if experiment not in _SUMMARIZERS:
        raise ProbeError(f"unknown experiment {experiment!r}; expected one of {EXPERIMENTS}")
    rows, summary = _SUMMARIZERS[experiment](runs)
    cfg = {"settings": settings.to_dict()} if config is None else config
    return ProbeReport(experiment, rows, summary, cfg, runs, __version__)


def bootstrap_distance_study(
    experiment: str,
    repeats: int = 30,
    jobs: int = 1,
    models: Sequence[str] | None = None,
    settings: ProbeSettings = ProbeSettings(),
) -> ProbeReport:
    """Train ``repeats`` independently seeded runs and summarize one experiment.

    Tables 1 and 2 default to both models; the sweeps (tables 3 and 4) to
    the LSAM only.
    """
    if experiment not in EXPERIMENTS:
        raise ProbeError(f"unknown experiment {experiment!r}; expected one of {EXPERIMENTS}")
    kind = "subsets" if experiment in ("table1", "table2") else "sweep"
    if models is None:
        models = MODELS if kind == "subsets" else ("lsam",)
    runs = collect_runs(kind, repeats, jobs, models, settings)
    config = {"settings": settings.to_dict(), "repeats": repeats, "models": list(models)}
    return summarize(experiment, runs, settings, config)


# -- corruption benchmark -----------------------------------------------------------


@dataclass
class BenchmarkReport:
    """One row per (model, strategy).

    ``nll_delta`` is baseline NLL minus corrupted NLL and ``accuracy_delta``
    is corrupted accuracy minus baseline accuracy, so for both higher is
    better and 0 means no degradation.
    """

    rows: list[dict]
    config: dict = field(default_factory=dict)
    version: str = ""

    def row(self, model: str, strategy: str) -> dict:
        for r in self.rows:
            if r["model"] == model and r["strategy"] == strategy:
                return r
        raise KeyError((model, strategy))

    def to_dict(self) -> dict:
        return asdict(self)

    def write(self, out_dir) -> tuple[Path, Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        js, cs = out / "benchmark.json", out / "benchmark.csv"
        js.write_text(json.dumps(self.to_dict(), indent=2))
        _write_rows(cs, self.rows)
        return js, cs


def _evaluate(kind: str, settings: ProbeSettings, tr, va, te, seed: int) -> tuple[float, float]:
    net, params, _ = _fit(kind, settings, tr, va, seed)
    return nll_and_accuracy(net, params, te)


def benchmark_run(
    dataset: TabularDataset,
    corruption: CorruptionSpec | None,
    strategies: Sequence[str] = STRATEGIES,
    models: Sequence[str] = MODELS,
    settings: ProbeSettings = ProbeSettings(),
    seed: int = 0,
) -> BenchmarkReport:
    """Change in test NLL and accuracy caused by corrupting ``dataset``.

    The baseline trains each model on the complete data.  The corrupted
    dataset keeps the same train/validation/test rows; strategy ``none``
    feeds the missingness straight to the model, ``simple`` fills it with
    training means (modes for categoricals) first.  Test rows are corrupted
    too.
    """
    from . import __version__

    if dataset.mask.any():
        raise ProbeError("benchmark needs a complete dataset to compute the baseline")
    for s in strategies:
        if s not in STRATEGIES:
            raise ProbeError(f"unknown strategy {s!r}; expected one of {STRATEGIES}")
    sp = replace(settings.split, seed=seed)
    _, tr, va, te = standardize(*split(dataset, sp))
    damaged = corrupt(dataset, corruption) if corruption is not None else dataset
    ctr, cva, cte = split(damaged, sp)
    rows = []
    for kind in models:
        base_nll, base_acc = _evaluate(kind, settings, tr, va, te, seed)
        for strategy in strategies:
            parts = (ctr, cva, cte) if strategy == "none" else simple_impute(ctr, cva, cte)[1:]
            _, str_, sva, ste = standardize(*parts)
            nll, acc = _evaluate(kind, settings, str_, sva, ste, seed)
            rows.append(
                {
                    "model": kind,
                    "strategy": strategy,
                    "baseline_nll": base_nll,
                    "baseline_accuracy": base_acc,
                    "nll": nll,
                    "accuracy": acc,
                    "nll_delta": base_nll - nll,
                    "accuracy_delta": acc - base_acc,
                }
            )
    config = {
        "corruption": None if corruption is None else asdict(corruption),
        "strategies": list(strategies),
        "models": list(models),
        "settings": settings.to_dict(),
        "seed": seed,
    }
    return BenchmarkReport(rows, config, __version__)

