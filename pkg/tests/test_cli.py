import csv
import json

import pytest

from lsam import __version__
from lsam.cli import cli_main, load_config_file, resolve_config

SMOKE = ["--n", "200", "--max-steps", "20", "--eval-every", "10", "--embed-dim", "8", "--attn-heads", "2"]


def _rows(path):
    with open(path) as fh:
        return list(csv.reader(fh))


def test_spiral_gen_writes_rows_and_config(tmp_path):
    assert cli_main(["spiral-gen", "--n", "2000", "--seed", "7", "--out", str(tmp_path / "d")]) == 0
    rows = _rows(tmp_path / "d" / "spiral.csv")
    assert rows[0] == ["x1", "x2", "x3", "x4", "y"]
    assert len(rows) == 2001 and all(len(r) == 5 for r in rows)
    doc = json.loads((tmp_path / "d" / "spiral.json").read_text())
    assert doc["version"] == __version__
    assert doc["config"]["run"]["spiral"]["n"] == 2000 and doc["config"]["run"]["spiral"]["seed"] == 7


def test_corrupt_is_deterministic(tmp_path):
    cli_main(["spiral-gen", "--n", "300", "--out", str(tmp_path / "d")])
    src = str(tmp_path / "d" / "spiral.csv")
    for name in ("a", "b"):
        assert cli_main(["corrupt", "--pattern", "mnar", "--seed", "1", src, "--out", str(tmp_path / name)]) == 0
    a = (tmp_path / "a" / "corrupted.csv").read_text()
    assert a == (tmp_path / "b" / "corrupted.csv").read_text()
    assert sum(r.count("") for r in _rows(tmp_path / "a" / "corrupted.csv")) == 2 * 120


def test_train_then_eval(tmp_path):
    cli_main(["spiral-gen", "--n", "200", "--out", str(tmp_path / "d")])
    src = str(tmp_path / "d" / "spiral.csv")
    for kind in ("lsam", "ensemble"):
        out = tmp_path / kind
        args = ["train", src, "--kind", kind, "--max-steps", "30", "--embed-dim", "8", "--attn-heads", "2", "--out", str(out)]
        assert cli_main(args) == 0
        assert cli_main(["eval", src, "--checkpoint", str(out / "model.json"), "--out", str(out / "eval")]) == 0
        doc = json.loads((out / "eval" / "eval.json").read_text())
        assert doc["rows"] == 200 and 0.0 <= doc["accuracy"] <= 1.0
        assert len(_rows(out / "eval" / "predictions.csv")) == 201


def test_probe_table2_smoke(tmp_path, capsys):
    assert cli_main(["probe", "--experiment", "table2", "--repeats", "3", *SMOKE, "--out", str(tmp_path)]) == 0
    doc = json.loads((tmp_path / "table2.json").read_text())
    lsam_rows = [r for r in doc["rows"] if r["model"] == "lsam"]
    assert len(lsam_rows) == 4 * 2
    assert {r["condition"] for r in lsam_rows} == {"+{x3}", "+{x4}"}
    assert all(r["n"] == 3 for r in doc["rows"])
    assert doc["version"] == __version__
    assert "table2" in capsys.readouterr().out


def test_report_reproduces_from_embedded_config(tmp_path):
    first = tmp_path / "first"
    assert cli_main(["probe", "--experiment", "table4", "--repeats", "2", "--levels", "0", "0.5", *SMOKE, "--seed", "3", "--out", str(first)]) == 0
    again = tmp_path / "again"
    assert cli_main(["probe", "--config", str(first / "table4.json"), "--out", str(again)]) == 0
    a = json.loads((first / "table4.json").read_text())
    b = json.loads((again / "table4.json").read_text())
    a["config"]["run"].pop("out")
    b["config"]["run"].pop("out")
    assert a == b


def test_flags_override_file_and_env_seed(tmp_path):
    cfg = tmp_path / "c.toml"
    cfg.write_text('seed = 5\n[spiral]\nn = 300\nturns = 1.5\n')
    doc = load_config_file(cfg)
    run = resolve_config("spiral-gen", doc, {"spiral.n": 100}, env={})
    assert run["spiral"] == {"n": 100, "turns": 1.5, "noise_std": 0.1, "seed": 5}
    assert resolve_config("spiral-gen", {}, {}, env={"LSAM_SEED": "11"})["seed"] == 11
    assert resolve_config("spiral-gen", {}, {"seed": 2}, env={"LSAM_SEED": "11"})["seed"] == 2
    assert resolve_config("spiral-gen", {"seed": 4}, {}, env={"LSAM_SEED": "11"})["seed"] == 4
    assert resolve_config("spiral-gen", {}, {}, env={})["seed"] == 0


def test_env_seed_reaches_outputs(tmp_path, monkeypatch):
    monkeypatch.setenv("LSAM_SEED", "9")
    assert cli_main(["spiral-gen", "--n", "50", "--out", str(tmp_path / "a")]) == 0
    assert cli_main(["spiral-gen", "--n", "50", "--seed", "9", "--out", str(tmp_path / "b")]) == 0
    assert (tmp_path / "a" / "spiral.csv").read_text() == (tmp_path / "b" / "spiral.csv").read_text()


def test_benchmark_smoke(tmp_path):
    args = ["benchmark", "--pattern", "mcar", "--models", "lsam", "--repeats", "2", *SMOKE, "--out", str(tmp_path)]
    assert cli_main(args) == 0
    doc = json.loads((tmp_path / "benchmark.json").read_text())
    assert [(r["seed"], r["strategy"]) for r in doc["rows"]] == [(0, "none"), (0, "simple"), (1, "none"), (1, "simple")]
    assert doc["config"]["run"]["corruption"]["pattern"] == "mcar"


@pytest.mark.parametrize(
    "argv",
    [
        [],
        ["bogus"],
        ["probe", "--experiment", "table9"],
        ["spiral-gen", "--n", "many"],
    ],
)
def test_usage_errors_exit_2(argv, capsys):
    assert cli_main(argv) == 2


def test_typed_errors_exit_1(tmp_path, capsys):
    assert cli_main(["corrupt", str(tmp_path / "missing.csv"), "--out", str(tmp_path)]) == 1
    bad = tmp_path / "bad.csv"
    bad.write_text("a,y\n1,0\n2,NA\n")
    assert cli_main(["corrupt", str(bad), "--out", str(tmp_path)]) == 1
    assert "error" in capsys.readouterr().err
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"spiral": {"bogus": 1}}))
    assert cli_main(["spiral-gen", "--config", str(cfg), "--out", str(tmp_path)]) == 1
    assert cli_main(["spiral-gen", "--n", "-5", "--out", str(tmp_path)]) == 1
    assert cli_main(["corrupt", "--out", str(tmp_path)]) == 1
