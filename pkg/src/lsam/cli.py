"""Command-line entry point: ``lsam <subcommand> [flags]``.

Every subcommand resolves one run configuration from built-in defaults, an
optional ``--config`` file (TOML or JSON) and command-line flags, in that
order of increasing precedence.  The seed falls back to ``LSAM_SEED`` when
neither the file nor a flag sets it.  The resolved configuration and the
package version are written into every report, and a report can be passed
back as ``--config`` to reproduce it.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np

from . import __version__
from .baselines import EnsembleModel, EnsembleNet, train_ensemble
from .corruption import CorruptionSpec, corrupt
from .data import FeatureSchema, SplitSpec, Standardizer, load_csv, split, standardize, write_csv
from .errors import ConfigError, LsamError
from .model import LsamConfig, LsamModel, load_checkpoint, save_checkpoint
from .probes import EXPERIMENTS, MODELS, STRATEGIES, BenchmarkReport, ProbeSettings, benchmark_run, collect_runs, summarize
from .spiral import SpiralConfig, gen_spiral
from .training import TrainConfig, nll_accuracy_from_probs, train

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

SECTIONS = {
    "spiral": SpiralConfig,
    "model": LsamConfig,
    "train": TrainConfig,
    "split": SplitSpec,
    "corruption": CorruptionSpec,
}

# sections and top-level keys each subcommand understands
COMMANDS = {
    "spiral-gen": (("spiral",), ("out",)),
    "corrupt": (("corruption",), ("input", "out")),
    "train": (("model", "train", "split"), ("input", "out", "target", "kind")),
    "eval": ((), ("input", "out", "target", "checkpoint")),
    "probe": (("spiral", "model", "train", "split"), ("out", "experiment", "repeats", "jobs", "models", "levels")),
    "benchmark": (("spiral", "model", "train", "split", "corruption"), ("input", "out", "target", "repeats", "jobs", "models", "strategies")),
}

TOP_DEFAULTS = {
    "out": "out",
    "target": "y",
    "kind": "lsam",
    "experiment": "table1",
    "repeats": 30,
    "jobs": 1,
    "models": None,
    "levels": list(ProbeSettings().levels),
    "strategies": list(STRATEGIES),
    "input": None,
    "checkpoint": None,
}

# benchmark and probe default to the spiral-scale training budget
PROBE_TRAIN = ProbeSettings().train
PROBE_MODEL = ProbeSettings().model


# -- configuration ---------------------------------------------------------------


def load_config_file(path) -> dict:
    """Read a TOML or JSON configuration; a report file yields its embedded run configuration."""
    path = Path(path)
    text = path.read_text()
    if path.suffix.lower() == ".toml":
        try:
            doc = tomllib.loads(text)
        except tomllib.TOMLDecodeError as e:
            raise ConfigError(f"{path}: {e}") from None
    else:
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: {e}") from None
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: top level must be a table")
    run = doc.get("config", {}).get("run") if isinstance(doc.get("config"), dict) else None
    return dict(run) if run is not None else doc


def _default_section(command: str, name: str) -> dict:
    if name == "train" and command in ("probe", "benchmark"):
        return asdict(PROBE_TRAIN)
    if name == "model" and command in ("probe", "benchmark"):
        return asdict(PROBE_MODEL)
    return asdict(SECTIONS[name]())


def resolve_config(command: str, file_doc: dict, flags: dict, env=os.environ) -> dict:
    """Merge defaults, config-file values and flags into one plain dict."""
    sections, tops = COMMANDS[command]
    file_doc = {k: v for k, v in file_doc.items() if k != "command"}
    unknown = set(file_doc) - set(sections) - set(tops) - {"seed"}
    if unknown:
        raise ConfigError(f"unknown configuration keys for {command}: {sorted(unknown)}")
    run = {"command": command}
    for name in sections:
        sec = _default_section(command, name)
        given = file_doc.get(name, {})
        bad = set(given) - set(sec)
        if bad:
            raise ConfigError(f"unknown keys in [{name}]: {sorted(bad)}")
        sec.update(given)
        sec.update({k.split(".", 1)[1]: v for k, v in flags.items() if k.startswith(name + ".")})
        run[name] = sec
    for key in tops:
        run[key] = flags.get(key, file_doc.get(key, TOP_DEFAULTS[key]))
    if "seed" in flags:
        seed = flags["seed"]
    elif "seed" in file_doc:
        seed = file_doc["seed"]
    elif env.get("LSAM_SEED"):
        try:
            seed = int(env["LSAM_SEED"])
        except ValueError:
            raise ConfigError(f"LSAM_SEED must be an integer, got {env['LSAM_SEED']!r}") from None
    else:
        seed = 0
    run["seed"] = int(seed)
    for name in sections:
        if "seed" in run[name]:
            run[name]["seed"] = run["seed"]
    return run


def _build(run: dict, name: str):
    try:
        return SECTIONS[name](**run[name])
    except TypeError as e:
        raise ConfigError(f"[{name}]: {e}") from None


def _settings(run: dict) -> ProbeSettings:
    return ProbeSettings(
        spiral=_build(run, "spiral"),
        model=_build(run, "model"),
        train=_build(run, "train"),
        split=_build(run, "split"),
        levels=tuple(float(f) for f in run.get("levels") or ProbeSettings().levels),
        base_seed=run["seed"],
    )


def _envelope(run: dict) -> dict:
    return {"run": run}


def _write_json(path: Path, doc: dict) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, indent=2))


def _require(run: dict, key: str) -> str:
    if not run.get(key):
        raise ConfigError(f"{run['command']} needs {key}")
    return run[key]


# -- subcommands -----------------------------------------------------------------


def cmd_spiral_gen(run: dict) -> str:
    out = Path(run["out"])
    ds = gen_spiral(_build(run, "spiral"))
    out.mkdir(parents=True, exist_ok=True)
    write_csv(ds, out / "spiral.csv")
    _write_json(out / "spiral.json", {"config": _envelope(run), "version": __version__, "rows": ds.n_rows})
    return f"wrote {ds.n_rows} rows to {out / 'spiral.csv'}"


def cmd_corrupt(run: dict) -> str:
    out = Path(run["out"])
    ds = load_csv(_require(run, "input"))
    spec = _build(run, "corruption")
    damaged = corrupt(ds, spec)
    out.mkdir(parents=True, exist_ok=True)
    write_csv(damaged, out / "corrupted.csv")
    per_col = damaged.mask.sum(axis=0)
    summary = {name: int(c) for name, c in zip(damaged.feature_names, per_col)}
    _write_json(out / "corrupted.json", {"config": _envelope(run), "version": __version__, "missing_per_column": summary})
    return f"{spec.pattern}: removed {int(per_col.sum())} cells in {int((per_col > 0).sum())} columns; wrote {out / 'corrupted.csv'}"


def _checkpoint_extra(ds, stats: Standardizer, extra: dict | None = None) -> dict:
    doc = {"classes": list(ds.classes), "standardizer": stats.to_dict()}
    doc.update(extra or {})
    return doc


def cmd_train(run: dict) -> str:
    out = Path(run["out"])
    ds = load_csv(_require(run, "input"), target=run["target"])
    cfg = replace(_build(run, "model"), out_dim=ds.n_classes)
    tc = _build(run, "train")
    stats, tr, va, te = standardize(*split(ds, _build(run, "split")))
    kind = run["kind"]
    if kind == "lsam":
        net = LsamModel(ds.schema, cfg)
        params, report = train(net, tr, va, tc)
        extra = _checkpoint_extra(ds, stats)
    elif kind == "ensemble":
        ens = train_ensemble(tr, va, cfg, tc)
        net, params, report = ens.net, ens.params, ens.report
        extra = _checkpoint_extra(ds, stats, {"member_rows": ens.member_rows.tolist()})
    else:
        raise ConfigError(f"kind must be 'lsam' or 'ensemble', got {kind!r}")
    _, probs = net.predict(params, te.values, te.mask)
    nll, acc = nll_accuracy_from_probs(probs, te.targets)
    save_checkpoint(out / "model.json", kind, cfg, ds.schema, params, extra)
    doc = {"config": _envelope(run), "version": __version__, "test_nll": nll, "test_accuracy": acc, "report": report.to_dict()}
    _write_json(out / "training.json", doc)
    return f"{kind}: stopped at step {report.stop_step}, test NLL {nll:.4f}, accuracy {acc:.4f}; checkpoint {out / 'model.json'}"


def cmd_eval(run: dict) -> str:
    out = Path(run["out"])
    doc = load_checkpoint(_require(run, "checkpoint"))
    extra = doc.get("extra", {})
    schema: tuple[FeatureSchema, ...] = doc["schema"]
    ds = load_csv(_require(run, "input"), target=run["target"], schema=schema, classes=extra.get("classes"))
    sd = extra.get("standardizer")
    if sd is not None:
        ds = Standardizer(np.array(sd["mean"]), np.array(sd["scale"]), np.array(sd["constant"], dtype=bool)).transform(ds)
    cfg = LsamConfig(**doc["config"])
    if doc["kind"] == "lsam":
        net = LsamModel(schema, cfg)
        _, probs = net.predict(doc["params"], ds.values, ds.mask)
    elif doc["kind"] == "ensemble":
        model = EnsembleModel(EnsembleNet(schema, cfg), doc["params"], np.array(extra.get("member_rows", [])))
        _, probs = model.predict(ds.values, ds.mask)
    else:
        raise ConfigError(f"unknown checkpoint kind {doc['kind']!r}")
    nll, acc = nll_accuracy_from_probs(probs, ds.targets)
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "eval.json", {"config": _envelope(run), "version": __version__, "nll": nll, "accuracy": acc, "rows": ds.n_rows})
    with open(out / "predictions.csv", "w") as fh:
        fh.write(",".join(f"p_{c}" for c in ds.classes) + ",y\n")
        for p, y in zip(probs, ds.targets):
            fh.write(",".join(repr(float(v)) for v in p) + f",{ds.classes[y]}\n")
    return f"NLL {nll:.4f}, accuracy {acc:.4f} on {ds.n_rows} rows"


def cmd_probe(run: dict) -> str:
    experiment = run["experiment"]
    if experiment not in EXPERIMENTS:
        raise ConfigError(f"experiment must be one of {EXPERIMENTS}, got {experiment!r}")
    settings = _settings(run)
    kind = "subsets" if experiment in ("table1", "table2") else "sweep"
    models = run["models"] or (list(MODELS) if kind == "subsets" else ["lsam"])
    runs = collect_runs(kind, int(run["repeats"]), int(run["jobs"]), tuple(models), settings)
    report = summarize(experiment, runs, settings, {**_envelope(run), "settings": settings.to_dict()})
    js, cs = report.write(run["out"])
    lines = [f"{experiment}: {len(report.rows)} rows from {run['repeats']} repeats; wrote {js} and {cs}"]
    for r in report.rows:
        lines.append(f"  {r['model']:<8} {r['u']:<10} {r['condition']:<10} {r['mean']:.4f} ± {r['std']:.4f}  p={r['p_value']:.3g}")
    return "\n".join(lines)


def _benchmark_one(task):
    dataset, spec, strategies, models, settings, seed = task
    return benchmark_run(dataset, spec, strategies, models, settings, seed)


def cmd_benchmark(run: dict) -> str:
    settings = _settings(run)
    if run["input"]:
        dataset = load_csv(run["input"], target=run["target"])
    else:
        dataset = gen_spiral(settings.spiral)
    base = _build(run, "corruption")
    models = tuple(run["models"] or MODELS)
    strategies = tuple(run["strategies"])
    seeds = [run["seed"] + i for i in range(int(run["repeats"]))]
    tasks = [(dataset, replace(base, seed=s), strategies, models, settings, s) for s in seeds]
    if int(run["jobs"]) > 1:
        with ProcessPoolExecutor(max_workers=int(run["jobs"])) as pool:
            reports = list(pool.map(_benchmark_one, tasks))
    else:
        reports = [_benchmark_one(t) for t in tasks]
    rows = [{"seed": s, **r} for s, rep in zip(seeds, reports) for r in rep.rows]
    report = BenchmarkReport(rows, {**_envelope(run), "settings": settings.to_dict()}, __version__)
    js, cs = report.write(run["out"])
    lines = [f"{base.pattern} benchmark over {len(seeds)} seeds; wrote {js} and {cs}"]
    for m in models:
        for s in strategies:
            sel = [r for r in rows if r["model"] == m and r["strategy"] == s]
            nd = np.mean([r["nll_delta"] for r in sel])
            ad = np.mean([r["accuracy_delta"] for r in sel])
            lines.append(f"  {m:<8} {s:<7} NLL delta {nd:+.4f}  accuracy delta {ad:+.4f}")
    return "\n".join(lines)


HANDLERS = {
    "spiral-gen": cmd_spiral_gen,
    "corrupt": cmd_corrupt,
    "train": cmd_train,
    "eval": cmd_eval,
    "probe": cmd_probe,
    "benchmark": cmd_benchmark,
}


# -- argument parsing ------------------------------------------------------------


def _add_section_flags(p: argparse.ArgumentParser, name: str) -> None:
    S = argparse.SUPPRESS
    if name == "spiral":
        p.add_argument("--n", dest="spiral.n", type=int, default=S, help="number of rows")
        p.add_argument("--turns", dest="spiral.turns", type=float, default=S)
        p.add_argument("--noise-std", dest="spiral.noise_std", type=float, default=S)
    elif name == "model":
        p.add_argument("--embed-dim", dest="model.embed_dim", type=int, default=S)
        p.add_argument("--attn-layers", dest="model.attn_layers", type=int, default=S)
        p.add_argument("--attn-heads", dest="model.attn_heads", type=int, default=S)
        p.add_argument("--hidden-dim", dest="model.hidden_dim", type=int, default=S)
        p.add_argument("--temperature", dest="model.concrete_temperature", type=float, default=S)
    elif name == "train":
        p.add_argument("--lr", dest="train.learning_rate", type=float, default=S)
        p.add_argument("--weight-decay", dest="train.weight_decay", type=float, default=S)
        p.add_argument("--batch-size", dest="train.batch_size", type=int, default=S)
        p.add_argument("--max-steps", dest="train.max_steps", type=int, default=S)
        p.add_argument("--patience", dest="train.patience", type=int, default=S)
        p.add_argument("--eval-every", dest="train.eval_every", type=int, default=S)
        p.add_argument("--optimizer", dest="train.optimizer", choices=("adam", "adabelief", "sgd"), default=S)
    elif name == "split":
        p.add_argument("--train-fraction", dest="split.train", type=float, default=S)
        p.add_argument("--val-fraction", dest="split.validation", type=float, default=S)
        p.add_argument("--test-fraction", dest="split.test", type=float, default=S)
    elif name == "corruption":
        p.add_argument("--pattern", dest="corruption.pattern", choices=("mcar", "mar", "mnar"), default=S)
        p.add_argument("--column-fraction", dest="corruption.column_fraction", type=float, default=S)
        p.add_argument("--cell-fraction", dest="corruption.cell_fraction", type=float, default=S)


def build_parser() -> argparse.ArgumentParser:
    S = argparse.SUPPRESS
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=None, help="TOML or JSON file; flags override its values")
    common.add_argument("--seed", type=int, default=S, help="global seed (falls back to LSAM_SEED, then 0)")
    common.add_argument("--out", default=S, help="output directory")

    parser = argparse.ArgumentParser(prog="lsam", description="Latent space attention model experiments.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("spiral-gen", parents=[common], help="write the synthetic spiral dataset")
    _add_section_flags(p, "spiral")

    p = sub.add_parser("corrupt", parents=[common], help="inject MCAR/MAR/MNAR missingness into a complete CSV")
    p.add_argument("input", nargs="?", default=S)
    _add_section_flags(p, "corruption")

    p = sub.add_parser("train", parents=[common], help="train a model on a CSV and save a checkpoint")
    p.add_argument("input", nargs="?", default=S)
    p.add_argument("--target", default=S)
    p.add_argument("--kind", choices=("lsam", "ensemble"), default=S)
    for name in ("model", "train", "split"):
        _add_section_flags(p, name)

    p = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint on a CSV")
    p.add_argument("input", nargs="?", default=S)
    p.add_argument("--checkpoint", default=S)
    p.add_argument("--target", default=S)

    p = sub.add_parser("probe", parents=[common], help="run a latent-space distance study")
    p.add_argument("--experiment", choices=EXPERIMENTS, default=S)
    p.add_argument("--repeats", type=int, default=S)
    p.add_argument("--jobs", type=int, default=S)
    p.add_argument("--models", nargs="+", choices=MODELS, default=S)
    p.add_argument("--levels", type=float, nargs="+", default=S, help="missingness levels for the x4 sweep")
    for name in ("spiral", "model", "train", "split"):
        _add_section_flags(p, name)

    p = sub.add_parser("benchmark", parents=[common], help="measure degradation under corruption")
    p.add_argument("--input", default=S, help="complete CSV (default: the spiral)")
    p.add_argument("--target", default=S)
    p.add_argument("--repeats", type=int, default=S, help="number of seeds")
    p.add_argument("--jobs", type=int, default=S)
    p.add_argument("--models", nargs="+", choices=MODELS, default=S)
    p.add_argument("--strategies", nargs="+", choices=STRATEGIES, default=S)
    for name in ("spiral", "model", "train", "split", "corruption"):
        _add_section_flags(p, name)
    return parser


def cli_main(argv=None) -> int:
    """Run one subcommand; returns 0 on success, 1 on a package error, 2 on a usage error."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    flags = {k: v for k, v in vars(args).items() if k not in ("command", "config")}
    try:
        file_doc = load_config_file(args.config) if args.config else {}
        run = resolve_config(args.command, file_doc, flags)
        print(HANDLERS[args.command](run))
    except (LsamError, OSError) as e:
        print(f"lsam {args.command}: error: {e}", file=sys.stderr)
        return 1
    return 0


def main() -> None:
    sys.exit(cli_main())


if __name__ == "__main__":
    main()
